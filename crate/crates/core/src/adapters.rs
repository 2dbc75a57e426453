//! Tensor adapters for the Query/Key/Value projections.
//!
//! Every variant collects the `3·L` per-projection updates into one or more
//! tensors and parametrizes each tensor with a Tucker factorization:
//!
//! | variant         | tensors | shape                 |
//! |-----------------|---------|-----------------------|
//! | `Att`           | 3·L     | (d, d_h, h)           |
//! | `QKV`           | L       | (d, d, 3)             |
//! | `Depth`         | 3       | (d, d, L)             |
//! | `Att_QKV`       | L       | (d, d_h, h, 3)        |
//! | `Att_Depth`     | 3       | (d, d_h, h, L)        |
//! | `QKV_Depth`     | 1       | (d, d, 3, L)          |
//! | `Att_QKV_Depth` | 1       | (d, d_h, h, 3, L)     |
//!
//! `LoRA` keeps the plain `A·B` pair per projection and layer.
//!
//! Projections act as `out = in · W`, so mode 0 of every tensor is the input
//! dimension and mode 1 the output dimension (`d`, or `d_h` for head-split
//! variants). Head `j` owns output columns `[j·d_h, (j+1)·d_h)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::tucker::{orthonormal_init, tucker_slice, TuckerFactors};

/// Adapted projections per layer: Query, Key, Value.
pub const NUM_PROJECTIONS: usize = 3;

/// Default update scale.
pub const DEFAULT_ALPHA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    #[serde(rename = "h")]
    pub heads: usize,
    #[serde(rename = "L")]
    pub layers: usize,
}

impl ModelDims {
    pub fn new(d: usize, heads: usize, layers: usize) -> Result<Self> {
        let dims = Self { d, heads, layers };
        dims.validate()?;
        Ok(dims)
    }

    /// ViT-Base / RoBERTa-base geometry: d = 768, 12 heads, 12 layers.
    pub fn vit_base() -> Self {
        Self {
            d: 768,
            heads: 12,
            layers: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.layers == 0 {
            return Err(Error::InvalidDims(format!("{self:?} has a zero size")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::InvalidDims(format!(
                "d = {} is not divisible by h = {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    /// Coordinate on the projection mode: Q = 0, K = 1, V = 2.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::IndexOutOfRange {
            mode: 0,
            index: i,
            size: NUM_PROJECTIONS,
        })
    }

    pub fn letter(self) -> char {
        ['q', 'k', 'v'][self.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AdapterVariant {
    Lora,
    Att,
    Qkv,
    Depth,
    AttQkv,
    AttDepth,
    QkvDepth,
    AttQkvDepth,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 8] = [
        AdapterVariant::Lora,
        AdapterVariant::Att,
        AdapterVariant::Qkv,
        AdapterVariant::Depth,
        AdapterVariant::AttQkv,
        AdapterVariant::AttDepth,
        AdapterVariant::QkvDepth,
        AdapterVariant::AttQkvDepth,
    ];

    pub const TENSOR_VARIANTS: [AdapterVariant; 7] = [
        AdapterVariant::Att,
        AdapterVariant::Qkv,
        AdapterVariant::Depth,
        AdapterVariant::AttQkv,
        AdapterVariant::AttDepth,
        AdapterVariant::QkvDepth,
        AdapterVariant::AttQkvDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterVariant::Lora => "LoRA",
            AdapterVariant::Att => "Att",
            AdapterVariant::Qkv => "QKV",
            AdapterVariant::Depth => "Depth",
            AdapterVariant::AttQkv => "Att_QKV",
            AdapterVariant::AttDepth => "Att_Depth",
            AdapterVariant::QkvDepth => "QKV_Depth",
            AdapterVariant::AttQkvDepth => "Att_QKV_Depth",
        }
    }

    pub fn is_tensor(self) -> bool {
        self != AdapterVariant::Lora
    }

    pub fn splits_heads(self) -> bool {
        matches!(
            self,
            AdapterVariant::Att
                | AdapterVariant::AttQkv
                | AdapterVariant::AttDepth
                | AdapterVariant::AttQkvDepth
        )
    }

    pub fn stacks_projections(self) -> bool {
        matches!(
            self,
            AdapterVariant::Qkv
                | AdapterVariant::AttQkv
                | AdapterVariant::QkvDepth
                | AdapterVariant::AttQkvDepth
        )
    }

    pub fn stacks_layers(self) -> bool {
        matches!(
            self,
            AdapterVariant::Depth
                | AdapterVariant::AttDepth
                | AdapterVariant::QkvDepth
                | AdapterVariant::AttQkvDepth
        )
    }

    /// Mode labels of the variant's tensor, in mode order. For LoRA this is
    /// the `(d_in, d_out)` layout of the update matrix.
    pub fn modes(self) -> Vec<ModeLabel> {
        let mut modes = vec![ModeLabel::DIn];
        if self.splits_heads() {
            modes.extend([ModeLabel::DHead, ModeLabel::Heads]);
        } else {
            modes.push(ModeLabel::DOut);
        }
        if self.stacks_projections() {
            modes.push(ModeLabel::Qkv);
        }
        if self.stacks_layers() {
            modes.push(ModeLabel::Depth);
        }
        modes
    }

    /// Labels a [`RankPlan`] for this variant must cover.
    pub fn rank_labels(self) -> Vec<ModeLabel> {
        if self.is_tensor() {
            self.modes()
        } else {
            vec![ModeLabel::LoraRank]
        }
    }

    /// Number of tensors (or LoRA pairs) the variant instantiates.
    pub fn multiplicity(self, dims: &ModelDims) -> usize {
        let per_proj = if self.stacks_projections() { 1 } else { NUM_PROJECTIONS };
        let per_layer = if self.stacks_layers() { 1 } else { dims.layers };
        per_proj * per_layer
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == key)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown adapter variant '{s}'")))
    }
}

impl TryFrom<String> for AdapterVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AdapterVariant> for String {
    fn from(v: AdapterVariant) -> String {
        v.name().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModeLabel {
    #[serde(rename = "d_in")]
    DIn,
    #[serde(rename = "d_out")]
    DOut,
    #[serde(rename = "d_h")]
    DHead,
    #[serde(rename = "h")]
    Heads,
    #[serde(rename = "qkv")]
    Qkv,
    #[serde(rename = "depth")]
    Depth,
    /// The single rank of a LoRA pair.
    #[serde(rename = "r")]
    LoraRank,
}

impl ModeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeLabel::DIn => "d_in",
            ModeLabel::DOut => "d_out",
            ModeLabel::DHead => "d_h",
            ModeLabel::Heads => "h",
            ModeLabel::Qkv => "qkv",
            ModeLabel::Depth => "depth",
            ModeLabel::LoraRank => "r",
        }
    }

    /// Size of this mode under `dims`. `LoraRank` has no intrinsic size.
    pub fn size(self, dims: &ModelDims) -> Option<usize> {
        match self {
            ModeLabel::DIn | ModeLabel::DOut => Some(dims.d),
            ModeLabel::DHead => Some(dims.head_dim()),
            ModeLabel::Heads => Some(dims.heads),
            ModeLabel::Qkv => Some(NUM_PROJECTIONS),
            ModeLabel::Depth => Some(dims.layers),
            ModeLabel::LoraRank => None,
        }
    }
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entry of the shape catalog.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub shape: Vec<usize>,
    pub multiplicity: usize,
    pub modes: Vec<ModeLabel>,
}

/// Shape, multiplicity, and mode labels of the tensors a variant builds.
pub fn tensor_catalog(variant: AdapterVariant, dims: &ModelDims) -> Vec<TensorSpec> {
    let modes = variant.modes();
    let shape = modes
        .iter()
        .map(|m| m.size(dims).expect("catalog modes have sizes"))
        .collect();
    vec![TensorSpec {
        shape,
        multiplicity: variant.multiplicity(dims),
        modes,
    }]
}

/// Per-mode ranks. Ranks may exceed the mode size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankPlan(BTreeMap<ModeLabel, usize>);

impl RankPlan {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (ModeLabel, usize)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn lora(rank: usize) -> Self {
        Self::from_pairs([(ModeLabel::LoraRank, rank)])
    }

    /// Same rank on every mode of `variant`.
    pub fn uniform(variant: AdapterVariant, rank: usize) -> Self {
        Self::from_pairs(variant.rank_labels().into_iter().map(|l| (l, rank)))
    }

    /// Ranks listed in the variant's mode order.
    pub fn for_modes(variant: AdapterVariant, ranks: &[usize]) -> Result<Self> {
        let labels = variant.rank_labels();
        if labels.len() != ranks.len() {
            return Err(Error::InvalidRankPlan(format!(
                "{variant} needs {} ranks, got {}",
                labels.len(),
                ranks.len()
            )));
        }
        Ok(Self::from_pairs(labels.into_iter().zip(ranks.iter().copied())))
    }

    pub fn get(&self, label: ModeLabel) -> Option<usize> {
        self.0.get(&label).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (ModeLabel, usize)> + '_ {
        self.0.iter().map(|(l, r)| (*l, *r))
    }

    pub fn validate(&self, variant: AdapterVariant) -> Result<()> {
        let labels = variant.rank_labels();
        for l in &labels {
            match self.get(*l) {
                None => {
                    return Err(Error::InvalidRankPlan(format!(
                        "{variant} needs a rank for mode {l}"
                    )))
                }
                Some(0) => {
                    return Err(Error::InvalidRankPlan(format!("rank for mode {l} must be ≥ 1")))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.0.keys().find(|k| !labels.contains(k)) {
            return Err(Error::InvalidRankPlan(format!(
                "mode {extra} does not exist in {variant}"
            )));
        }
        Ok(())
    }

    /// Ranks in the variant's mode order.
    pub fn ordered(&self, variant: AdapterVariant) -> Result<Vec<usize>> {
        self.validate(variant)?;
        Ok(variant
            .rank_labels()
            .iter()
            .map(|l| self.0[l])
            .collect())
    }

    /// `d_in:7, d_h:4, h:12` in mode order.
    pub fn describe(&self, variant: AdapterVariant) -> String {
        variant
            .rank_labels()
            .iter()
            .filter_map(|l| self.get(*l).map(|r| format!("{l}:{r}")))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Trainable parameter count: `2·d·r·3·L` for LoRA, otherwise
/// `multiplicity · (∏ r_i + Σ dim_i·r_i)`.
pub fn param_count(variant: AdapterVariant, dims: &ModelDims, ranks: &RankPlan) -> Result<u64> {
    dims.validate()?;
    let r = ranks.ordered(variant)?;
    if !variant.is_tensor() {
        return Ok(2 * (dims.d * r[0] * NUM_PROJECTIONS * dims.layers) as u64);
    }
    let spec = &tensor_catalog(variant, dims)[0];
    let core: u64 = r.iter().map(|&x| x as u64).product();
    let factors: u64 = spec
        .shape
        .iter()
        .zip(&r)
        .map(|(&d, &x)| (d * x) as u64)
        .sum();
    Ok(spec.multiplicity as u64 * (core + factors))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AdapterTensor {
    Tucker(TuckerFactors),
    /// `ΔW = a · b` with `a: d×r`, `b: r×d`.
    Lora { a: DenseTensor, b: DenseTensor },
}

impl AdapterTensor {
    fn params(&self) -> Vec<&DenseTensor> {
        match self {
            AdapterTensor::Tucker(f) => std::iter::once(&f.core).chain(&f.factors).collect(),
            AdapterTensor::Lora { a, b } => vec![a, b],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        match self {
            AdapterTensor::Tucker(f) => std::iter::once(&mut f.core)
                .chain(f.factors.iter_mut())
                .collect(),
            AdapterTensor::Lora { a, b } => vec![a, b],
        }
    }
}

/// Where the update for one `(projection, layer)` lives: a tensor id and the
/// coordinates fixed on its projection and/or depth modes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub tensor: usize,
    pub fixed: Vec<(usize, usize)>,
}

/// Mixes a base seed with a path of indices (SplitMix64 finalizer).
pub(crate) fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensLoraAdapter {
    pub variant: AdapterVariant,
    pub dims: ModelDims,
    pub ranks: RankPlan,
    pub alpha: f64,
    pub seed: u64,
    pub tensors: Vec<AdapterTensor>,
}

/// Builds an adapter whose update is exactly zero: orthonormal factors with
/// zero cores, or orthonormal `A` with zero `B` for LoRA.
pub fn init_adapter(
    variant: AdapterVariant,
    dims: ModelDims,
    ranks: RankPlan,
    alpha: f64,
    seed: u64,
) -> Result<TensLoraAdapter> {
    dims.validate()?;
    let r = ranks.ordered(variant)?;
    let count = variant.multiplicity(&dims);
    let tensors = (0..count)
        .map(|t| {
            if variant.is_tensor() {
                let shape = &tensor_catalog(variant, &dims)[0].shape;
                let factors = shape
                    .iter()
                    .zip(&r)
                    .enumerate()
                    .map(|(m, (&dim, &rank))| {
                        orthonormal_init(dim, rank, derive_seed(seed, &[t as u64, m as u64]))
                    })
                    .collect();
                AdapterTensor::Tucker(TuckerFactors {
                    core: DenseTensor::zeros(&r),
                    factors,
                })
            } else {
                AdapterTensor::Lora {
                    a: orthonormal_init(dims.d, r[0], derive_seed(seed, &[t as u64, 0])),
                    b: DenseTensor::zeros(&[r[0], dims.d]),
                }
            }
        })
        .collect();
    Ok(TensLoraAdapter {
        variant,
        dims,
        ranks,
        alpha,
        seed,
        tensors,
    })
}

impl TensLoraAdapter {
    /// Tensor id and fixed coordinates holding the update of `(p, layer)`.
    pub fn slot(&self, p: Projection, layer: usize) -> Result<Slot> {
        slot_for(self.variant, &self.dims, p, layer)
    }

    /// All trainable tensors in a fixed order (per tensor: core then factors,
    /// or `a` then `b`).
    pub fn params(&self) -> Vec<&DenseTensor> {
        self.tensors.iter().flat_map(AdapterTensor::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.tensors
            .iter_mut()
            .flat_map(AdapterTensor::params_mut)
            .collect()
    }

    /// Names matching [`TensLoraAdapter::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, t) in self.tensors.iter().enumerate() {
            match t {
                AdapterTensor::Tucker(f) => {
                    names.push(format!("adapter.{i}.core"));
                    for m in 0..f.factors.len() {
                        names.push(format!("adapter.{i}.factor{m}"));
                    }
                }
                AdapterTensor::Lora { .. } => {
                    names.push(format!("adapter.{i}.a"));
                    names.push(format!("adapter.{i}.b"));
                }
            }
        }
        names
    }

    /// Counts instantiated trainable scalars one tensor at a time.
    pub fn enumerate_params(&self) -> u64 {
        self.params().iter().map(|p| p.len() as u64).sum()
    }

    /// Unscaled `d×d` update for projection `p` of `layer`.
    pub fn delta(&self, p: Projection, layer: usize) -> Result<DenseTensor> {
        let slot = self.slot(p, layer)?;
        match &self.tensors[slot.tensor] {
            AdapterTensor::Lora { a, b } => a.matmul(b),
            AdapterTensor::Tucker(f) => {
                let s = tucker_slice(f, &slot.fixed)?;
                self.to_square(s)
            }
        }
    }

    /// Head-split slices `(d, d_h, h)` become `d×d` with head `j` in output
    /// columns `[j·d_h, (j+1)·d_h)`.
    fn to_square(&self, s: DenseTensor) -> Result<DenseTensor> {
        let d = self.dims.d;
        if self.variant.splits_heads() {
            s.permute(&[0, 2, 1])?.into_reshaped(&[d, d])
        } else {
            s.into_reshaped(&[d, d])
        }
    }

    /// `W₀ + alpha·ΔW` for one projection.
    pub fn apply_one(&self, w0: &DenseTensor, p: Projection, layer: usize) -> Result<DenseTensor> {
        let d = self.dims.d;
        if w0.shape() != [d, d] {
            return Err(Error::ShapeMismatch {
                op: "apply",
                detail: format!("base weight {:?}, expected [{d}, {d}]", w0.shape()),
            });
        }
        let mut w = w0.clone();
        w.axpy(self.alpha, &self.delta(p, layer)?)?;
        Ok(w)
    }

    /// Effective weights for every slot; `base[l][p]` is `W₀` for projection
    /// `p` of layer `l`.
    pub fn apply(&self, base: &[[DenseTensor; 3]]) -> Result<Vec<[DenseTensor; 3]>> {
        if base.len() != self.dims.layers {
            return Err(Error::ShapeMismatch {
                op: "apply",
                detail: format!("{} layers of weights for {} adapted layers", base.len(), self.dims.layers),
            });
        }
        base.iter()
            .enumerate()
            .map(|(l, ws)| {
                Ok([
                    self.apply_one(&ws[0], Projection::Query, l)?,
                    self.apply_one(&ws[1], Projection::Key, l)?,
                    self.apply_one(&ws[2], Projection::Value, l)?,
                ])
            })
            .collect()
    }

    /// Places the parameters on `tape` for differentiable delta construction.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAdapter {
        let tensors = self
            .tensors
            .iter()
            .map(|t| match t {
                AdapterTensor::Tucker(f) => BoundTensor::Tucker {
                    core: tape.leaf(f.core.clone(), trainable),
                    factors: f
                        .factors
                        .iter()
                        .map(|m| tape.leaf(m.clone(), trainable))
                        .collect(),
                },
                AdapterTensor::Lora { a, b } => BoundTensor::Lora {
                    a: tape.leaf(a.clone(), trainable),
                    b: tape.leaf(b.clone(), trainable),
                },
            })
            .collect();
        BoundAdapter {
            variant: self.variant,
            dims: self.dims,
            alpha: self.alpha,
            tensors,
        }
    }

    /// Wraps variables already on a tape, in the order of
    /// [`TensLoraAdapter::params`], as this adapter's parameters.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundAdapter> {
        let expected: usize = self.tensors.iter().map(|t| t.params().len()).sum();
        if vars.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "bind_vars",
                detail: format!("{} variables for {expected} adapter parameters", vars.len()),
            });
        }
        let mut it = vars.iter().copied();
        let tensors = self
            .tensors
            .iter()
            .map(|t| match t {
                AdapterTensor::Tucker(f) => {
                    let core = it.next().expect("counted above");
                    let factors = it.by_ref().take(f.factors.len()).collect();
                    BoundTensor::Tucker { core, factors }
                }
                AdapterTensor::Lora { .. } => {
                    let a = it.next().expect("counted above");
                    let b = it.next().expect("counted above");
                    BoundTensor::Lora { a, b }
                }
            })
            .collect();
        Ok(BoundAdapter {
            variant: self.variant,
            dims: self.dims,
            alpha: self.alpha,
            tensors,
        })
    }

    /// Adds `N(0, std²)` noise to every parameter, drawn from `seed`.
    pub fn perturbed(&self, std: f64, seed: u64) -> Self {
        let mut out = self.clone();
        for (i, p) in out.params_mut().into_iter().enumerate() {
            let noise = DenseTensor::random_normal(p.shape(), derive_seed(seed, &[i as u64]));
            p.axpy(std, &noise).expect("noise has the parameter's shape");
        }
        out
    }

    /// Same adapter with every core (or LoRA `b`) zeroed, i.e. no update.
    pub fn emptied(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            match t {
                AdapterTensor::Tucker(f) => f.core = DenseTensor::zeros(f.core.shape()),
                AdapterTensor::Lora { b, .. } => *b = DenseTensor::zeros(b.shape()),
            }
        }
        out
    }
}

pub(crate) fn slot_for(
    variant: AdapterVariant,
    dims: &ModelDims,
    p: Projection,
    layer: usize,
) -> Result<Slot> {
    if layer >= dims.layers {
        return Err(Error::IndexOutOfRange {
            mode: 1,
            index: layer,
            size: dims.layers,
        });
    }
    let modes = variant.modes();
    let mode_of = |label| modes.iter().position(|&m| m == label);
    let mut fixed = Vec::new();
    if let Some(m) = mode_of(ModeLabel::Qkv) {
        fixed.push((m, p.index()));
    }
    if let Some(m) = mode_of(ModeLabel::Depth) {
        fixed.push((m, layer));
    }
    let tensor = match (variant.stacks_projections(), variant.stacks_layers()) {
        (false, false) => p.index() * dims.layers + layer,
        (true, false) => layer,
        (false, true) => p.index(),
        (true, true) => 0,
    };
    Ok(Slot { tensor, fixed })
}

#[derive(Clone, Debug)]
enum BoundTensor {
    Tucker { core: Var, factors: Vec<Var> },
    Lora { a: Var, b: Var },
}

/// An adapter whose parameters live on a [`Tape`].
#[derive(Clone, Debug)]
pub struct BoundAdapter {
    variant: AdapterVariant,
    dims: ModelDims,
    alpha: f64,
    tensors: Vec<BoundTensor>,
}

impl BoundAdapter {
    /// Variables in the order of [`TensLoraAdapter::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.tensors
            .iter()
            .flat_map(|t| match t {
                BoundTensor::Tucker { core, factors } => {
                    std::iter::once(*core).chain(factors.iter().copied()).collect::<Vec<_>>()
                }
                BoundTensor::Lora { a, b } => vec![*a, *b],
            })
            .collect()
    }

    /// Differentiable counterpart of [`TensLoraAdapter::delta`]: fixed modes
    /// are contracted with single factor rows first, then the free modes.
    pub fn delta(&self, tape: &mut Tape, p: Projection, layer: usize) -> Result<Var> {
        let slot = slot_for(self.variant, &self.dims, p, layer)?;
        let d = self.dims.d;
        match &self.tensors[slot.tensor] {
            BoundTensor::Lora { a, b } => tape.matmul(*a, *b),
            BoundTensor::Tucker { core, factors } => {
                let order = factors.len();
                let mut coord = vec![None; order];
                for &(m, c) in &slot.fixed {
                    coord[m] = Some(c);
                }
                let mut x = *core;
                for (m, c) in coord.iter().enumerate() {
                    if let Some(c) = *c {
                        let row = tape.narrow(factors[m], 0, c, 1)?;
                        x = tape.mode_product(x, row, m)?;
                    }
                }
                for (m, c) in coord.iter().enumerate() {
                    if c.is_none() {
                        x = tape.mode_product(x, factors[m], m)?;
                    }
                }
                if self.variant.splits_heads() {
                    let (dh, h) = (self.dims.head_dim(), self.dims.heads);
                    let s = tape.reshape(x, &[d, dh, h])?;
                    let s = tape.permute(s, &[0, 2, 1])?;
                    tape.reshape(s, &[d, d])
                } else {
                    tape.reshape(x, &[d, d])
                }
            }
        }
    }

    /// `W₀ + alpha·ΔW` on the tape.
    pub fn effective_weight(
        &self,
        tape: &mut Tape,
        w0: Var,
        p: Projection,
        layer: usize,
    ) -> Result<Var> {
        let delta = self.delta(tape, p, layer)?;
        let scaled = tape.scale(delta, self.alpha);
        tape.add(w0, scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelDims {
        ModelDims::new(8, 2, 3).unwrap()
    }

    fn randomized(adapter: &TensLoraAdapter, seed: u64) -> TensLoraAdapter {
        let mut a = adapter.clone();
        for (i, p) in a.params_mut().into_iter().enumerate() {
            *p = DenseTensor::random_normal(p.shape(), seed + i as u64);
        }
        a
    }

    #[test]
    fn dims_validation() {
        assert!(ModelDims::new(10, 3, 2).is_err());
        assert!(ModelDims::new(0, 1, 1).is_err());
        assert_eq!(ModelDims::vit_base().head_dim(), 64);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AdapterVariant::ALL {
            assert_eq!(v.name().parse::<AdapterVariant>().unwrap(), v);
        }
        assert_eq!("att-qkv-depth".parse::<AdapterVariant>().unwrap(), AdapterVariant::AttQkvDepth);
        assert!("mlp".parse::<AdapterVariant>().is_err());
    }

    #[test]
    fn catalog_vit_base() {
        let dims = ModelDims::vit_base();
        let qd = &tensor_catalog(AdapterVariant::QkvDepth, &dims)[0];
        assert_eq!(qd.shape, vec![768, 768, 3, 12]);
        assert_eq!(qd.multiplicity, 1);
        let att = &tensor_catalog(AdapterVariant::Att, &dims)[0];
        assert_eq!(att.shape, vec![768, 64, 12]);
        assert_eq!(att.multiplicity, 36);
        let lora = &tensor_catalog(AdapterVariant::Lora, &dims)[0];
        assert_eq!(lora.multiplicity, 36);
        let expected = [
            (AdapterVariant::Qkv, vec![768, 768, 3], 12),
            (AdapterVariant::Depth, vec![768, 768, 12], 3),
            (AdapterVariant::AttQkv, vec![768, 64, 12, 3], 12),
            (AdapterVariant::AttDepth, vec![768, 64, 12, 12], 3),
            (AdapterVariant::AttQkvDepth, vec![768, 64, 12, 3, 12], 1),
        ];
        for (v, shape, mult) in expected {
            let spec = &tensor_catalog(v, &dims)[0];
            assert_eq!((spec.shape.clone(), spec.multiplicity), (shape, mult), "{v}");
        }
    }

    #[test]
    fn rank_plan_validation() {
        let v = AdapterVariant::Qkv;
        assert!(RankPlan::uniform(v, 2).validate(v).is_ok());
        let missing = RankPlan::from_pairs([(ModeLabel::DIn, 2), (ModeLabel::DOut, 2)]);
        assert!(missing.validate(v).is_err());
        let extra = RankPlan::from_pairs([
            (ModeLabel::DIn, 2),
            (ModeLabel::DOut, 2),
            (ModeLabel::Qkv, 2),
            (ModeLabel::Heads, 2),
        ]);
        assert!(extra.validate(v).is_err());
        assert!(RankPlan::uniform(v, 0).validate(v).is_err());
        assert!(init_adapter(v, tiny(), missing, 4.0, 0).is_err());
    }

    #[test]
    fn lora_count_vit_base() {
        let n = param_count(AdapterVariant::Lora, &ModelDims::vit_base(), &RankPlan::lora(4)).unwrap();
        assert_eq!(n, 221_184);
    }

    #[test]
    fn isorank_counts_vit_base() {
        let dims = ModelDims::vit_base();
        let count = |v| param_count(v, &dims, &RankPlan::uniform(v, 4)).unwrap();
        assert_eq!(count(AdapterVariant::Att), 123_840);
        assert_eq!(count(AdapterVariant::AttQkv), 43_728);
    }

    #[test]
    fn qkv_depth_preset_count() {
        let v = AdapterVariant::QkvDepth;
        let plan = RankPlan::for_modes(v, &[60, 60, 3, 12]).unwrap();
        assert_eq!(param_count(v, &ModelDims::vit_base(), &plan).unwrap(), 221_913);
    }

    #[test]
    fn count_matches_enumeration_tiny() {
        for v in AdapterVariant::ALL {
            for r in [1, 2, 5] {
                let plan = RankPlan::uniform(v, r);
                let a = init_adapter(v, tiny(), plan.clone(), 4.0, 1).unwrap();
                assert_eq!(param_count(v, &tiny(), &plan).unwrap(), a.enumerate_params(), "{v} r={r}");
                assert_eq!(a.param_names().len(), a.params().len());
            }
        }
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        for v in AdapterVariant::ALL {
            let a = init_adapter(v, tiny(), RankPlan::uniform(v, 3), 4.0, 2).unwrap();
            for p in Projection::ALL {
                for l in 0..3 {
                    assert_eq!(a.delta(p, l).unwrap().max_abs(), 0.0, "{v}");
                }
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        for v in AdapterVariant::ALL {
            let a = init_adapter(v, tiny(), RankPlan::uniform(v, 2), 4.0, 9).unwrap();
            let b = init_adapter(v, tiny(), RankPlan::uniform(v, 2), 4.0, 9).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lora_init_leaves_weights_unchanged() {
        let a = init_adapter(AdapterVariant::Lora, tiny(), RankPlan::lora(2), 4.0, 3).unwrap();
        let w0 = DenseTensor::random_normal(&[8, 8], 4);
        assert_eq!(a.apply_one(&w0, Projection::Key, 1).unwrap(), w0);
    }

    #[test]
    fn delta_out_of_range() {
        let a = init_adapter(AdapterVariant::Depth, tiny(), RankPlan::uniform(AdapterVariant::Depth, 2), 4.0, 0).unwrap();
        assert!(a.delta(Projection::Value, 3).is_err());
    }

    #[test]
    fn qkv_delta_is_slice_of_reconstruction() {
        let v = AdapterVariant::Qkv;
        let a = randomized(&init_adapter(v, tiny(), RankPlan::uniform(v, 3), 4.0, 5).unwrap(), 100);
        for l in 0..3 {
            let AdapterTensor::Tucker(f) = &a.tensors[l] else { unreachable!() };
            let full = f.reconstruct().unwrap();
            let expected = full.index_modes(&[(2, 1)]).unwrap();
            assert!(a.delta(Projection::Key, l).unwrap().max_abs_diff(&expected) < 1e-12);
        }
    }

    #[test]
    fn att_single_entry_lands_in_head_block() {
        let dims = tiny();
        let (d, dh) = (dims.d, dims.head_dim());
        let v = AdapterVariant::Att;
        let mut a = init_adapter(v, dims, RankPlan::from_pairs([
            (ModeLabel::DIn, d),
            (ModeLabel::DHead, dh),
            (ModeLabel::Heads, 2),
        ]), 4.0, 0).unwrap();
        // identity factors, one-hot core => one-hot reconstruction at (i, j, head 1)
        let (i, j, head) = (5, 3, 1);
        let slot = a.slot(Projection::Value, 2).unwrap();
        let AdapterTensor::Tucker(f) = &mut a.tensors[slot.tensor] else { unreachable!() };
        f.factors = vec![DenseTensor::identity(d), DenseTensor::identity(dh), DenseTensor::identity(2)];
        f.core.set(&[i, j, head], 1.0);
        let delta = a.delta(Projection::Value, 2).unwrap();
        for r in 0..d {
            for c in 0..d {
                let expected = if (r, c) == (i, head * dh + j) { 1.0 } else { 0.0 };
                assert_eq!(delta.get(&[r, c]), expected);
            }
        }
    }

    #[test]
    fn delta_matches_full_reconstruction_for_every_variant() {
        let dims = tiny();
        for v in AdapterVariant::TENSOR_VARIANTS {
            let a = randomized(&init_adapter(v, dims, RankPlan::uniform(v, 2), 4.0, 6).unwrap(), 200);
            for p in Projection::ALL {
                for l in 0..dims.layers {
                    let slot = a.slot(p, l).unwrap();
                    let AdapterTensor::Tucker(f) = &a.tensors[slot.tensor] else { unreachable!() };
                    let full = f.reconstruct().unwrap().index_modes(&slot.fixed).unwrap();
                    // flatten (d_h, h) column-block-wise
                    let expected = if v.splits_heads() {
                        let dh = dims.head_dim();
                        DenseTensor::from_fn(&[dims.d, dims.d], |ix| {
                            full.get(&[ix[0], ix[1] % dh, ix[1] / dh])
                        })
                    } else {
                        full
                    };
                    let got = a.delta(p, l).unwrap();
                    assert!(got.max_abs_diff(&expected) < 1e-12, "{v} {p:?} {l}");
                }
            }
        }
    }

    #[test]
    fn bound_delta_matches_plain_delta() {
        let dims = tiny();
        for v in AdapterVariant::ALL {
            let a = randomized(&init_adapter(v, dims, RankPlan::uniform(v, 2), 4.0, 7).unwrap(), 300);
            let mut tape = Tape::new();
            let bound = a.bind(&mut tape, true);
            assert_eq!(bound.param_vars().len(), a.params().len());
            for p in Projection::ALL {
                for l in 0..dims.layers {
                    let dv = bound.delta(&mut tape, p, l).unwrap();
                    assert!(tape.value(dv).max_abs_diff(&a.delta(p, l).unwrap()) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn apply_scales_by_alpha() {
        let dims = tiny();
        let v = AdapterVariant::AttQkvDepth;
        let mut a = randomized(&init_adapter(v, dims, RankPlan::uniform(v, 2), 4.0, 8).unwrap(), 400);
        let base: Vec<[DenseTensor; 3]> = (0..3)
            .map(|l| std::array::from_fn(|p| DenseTensor::random_normal(&[8, 8], 10 * l + p as u64)))
            .collect();
        let applied = a.apply(&base).unwrap();
        for l in 0..3 {
            for p in Projection::ALL {
                let mut expected = base[l][p.index()].clone();
                expected.axpy(4.0, &a.delta(p, l).unwrap()).unwrap();
                assert!(applied[l][p.index()].max_abs_diff(&expected) < 1e-12);
            }
        }
        a.alpha = 0.0;
        assert_eq!(a.apply(&base).unwrap(), base);
        assert!(a.apply(&base[..2]).is_err());
        assert!(a.apply_one(&DenseTensor::zeros(&[8, 4]), Projection::Query, 0).is_err());
    }

    #[test]
    fn emptied_adapter_has_zero_delta() {
        let dims = tiny();
        for v in AdapterVariant::ALL {
            let a = randomized(&init_adapter(v, dims, RankPlan::uniform(v, 2), 4.0, 8).unwrap(), 500).emptied();
            assert_eq!(a.delta(Projection::Query, 0).unwrap().max_abs(), 0.0);
        }
    }
}
