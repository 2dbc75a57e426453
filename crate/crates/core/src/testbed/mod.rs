//! A small pre-norm transformer encoder classifier used as a frozen backbone.
//!
//! Only the classifier head and adapter parameters are ever trained; every
//! other weight is drawn once from the config seed and left untouched.

mod task;
mod train;

pub use task::{make_task, make_task_range, majority_label, pairwise_label, Example, SyntheticTask, TaskKind};
pub use train::{train_adapter, AdamW, AdamWParams, LrSchedule, TrainConfig, TrainLog, TrainRecord};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{derive_seed, BoundAdapter, ModelDims, Projection, TensLoraAdapter};
use crate::autograd::{finite_diff_check, GradCheckOptions, GradCheckReport};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub dims: ModelDims,
    pub vocab: usize,
    pub seq_len: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.vocab < 2 || self.seq_len < 2 || self.classes < 2 || self.mlp_ratio < 1 {
            return Err(Error::InvalidConfig(format!(
                "backbone needs vocab, seq_len, classes ≥ 2 and mlp_ratio ≥ 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.dims.d * self.mlp_ratio
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: DenseTensor,
    pub wk: DenseTensor,
    pub wv: DenseTensor,
    pub wo: DenseTensor,
    pub ln1_gamma: DenseTensor,
    pub ln1_beta: DenseTensor,
    pub ln2_gamma: DenseTensor,
    pub ln2_beta: DenseTensor,
    pub mlp_w1: DenseTensor,
    pub mlp_b1: DenseTensor,
    pub mlp_w2: DenseTensor,
    pub mlp_b2: DenseTensor,
}

impl LayerWeights {
    fn projection(&self, p: Projection) -> &DenseTensor {
        match p {
            Projection::Query => &self.wq,
            Projection::Key => &self.wk,
            Projection::Value => &self.wv,
        }
    }

    fn projection_mut(&mut self, p: Projection) -> &mut DenseTensor {
        match p {
            Projection::Query => &mut self.wq,
            Projection::Key => &mut self.wk,
            Projection::Value => &mut self.wv,
        }
    }

    fn named(&self) -> [(&'static str, &DenseTensor); 12] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBackbone {
    pub config: BackboneConfig,
    pub token_embedding: DenseTensor,
    pub position_embedding: DenseTensor,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: DenseTensor,
    pub final_beta: DenseTensor,
    /// Trainable classifier head, `d × classes`.
    pub head_w: DenseTensor,
    pub head_b: DenseTensor,
}

fn scaled_normal(shape: &[usize], std: f64, seed: u64) -> DenseTensor {
    DenseTensor::random_normal(shape, seed).scale(std)
}

impl TransformerBackbone {
    /// Random backbone drawn from `config.seed`.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dims.d;
        let m = config.hidden();
        let s = |path: &[u64]| derive_seed(config.seed, path);
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();
        let layers = (0..config.dims.layers as u64)
            .map(|l| LayerWeights {
                wq: scaled_normal(&[d, d], inv_sqrt(d), s(&[1, l, 0])),
                wk: scaled_normal(&[d, d], inv_sqrt(d), s(&[1, l, 1])),
                wv: scaled_normal(&[d, d], inv_sqrt(d), s(&[1, l, 2])),
                wo: scaled_normal(&[d, d], inv_sqrt(d), s(&[1, l, 3])),
                ln1_gamma: DenseTensor::filled(&[d], 1.0),
                ln1_beta: DenseTensor::zeros(&[d]),
                ln2_gamma: DenseTensor::filled(&[d], 1.0),
                ln2_beta: DenseTensor::zeros(&[d]),
                mlp_w1: scaled_normal(&[d, m], inv_sqrt(d), s(&[1, l, 4])),
                mlp_b1: DenseTensor::zeros(&[m]),
                mlp_w2: scaled_normal(&[m, d], inv_sqrt(m), s(&[1, l, 5])),
                mlp_b2: DenseTensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            token_embedding: scaled_normal(&[config.vocab, d], 1.0, s(&[0, 0])),
            position_embedding: scaled_normal(&[config.seq_len, d], 0.5, s(&[0, 1])),
            layers,
            final_gamma: DenseTensor::filled(&[d], 1.0),
            final_beta: DenseTensor::zeros(&[d]),
            head_w: scaled_normal(&[d, config.classes], inv_sqrt(d), s(&[2, 0])),
            head_b: DenseTensor::zeros(&[config.classes]),
            config,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.config.dims
    }

    /// Every frozen tensor with a stable name (head excluded).
    pub fn frozen_tensors(&self) -> Vec<(String, &DenseTensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_gamma".to_string(), &self.final_gamma));
        out.push(("final_beta".to_string(), &self.final_beta));
        out
    }

    /// Frozen tensors followed by the head.
    pub fn named_tensors(&self) -> Vec<(String, &DenseTensor)> {
        let mut out = self.frozen_tensors();
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    /// Rebuilds a backbone from tensors named as in
    /// [`TransformerBackbone::named_tensors`].
    pub fn from_named(config: BackboneConfig, mut tensors: BTreeMap<String, DenseTensor>) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        let mut take = |name: &str, like: &DenseTensor| -> Result<DenseTensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::InvalidConfig(format!("missing backbone tensor '{name}'")))?;
            if t.shape() != like.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load backbone",
                    detail: format!("'{name}' has shape {:?}, expected {:?}", t.shape(), like.shape()),
                });
            }
            Ok(t)
        };
        let mut out = reference.clone();
        out.token_embedding = take("token_embedding", &reference.token_embedding)?;
        out.position_embedding = take("position_embedding", &reference.position_embedding)?;
        for (l, layer) in out.layers.iter_mut().enumerate() {
            let r = &reference.layers[l];
            let slots: [(&str, &mut DenseTensor, &DenseTensor); 12] = [
                ("wq", &mut layer.wq, &r.wq),
                ("wk", &mut layer.wk, &r.wk),
                ("wv", &mut layer.wv, &r.wv),
                ("wo", &mut layer.wo, &r.wo),
                ("ln1_gamma", &mut layer.ln1_gamma, &r.ln1_gamma),
                ("ln1_beta", &mut layer.ln1_beta, &r.ln1_beta),
                ("ln2_gamma", &mut layer.ln2_gamma, &r.ln2_gamma),
                ("ln2_beta", &mut layer.ln2_beta, &r.ln2_beta),
                ("mlp_w1", &mut layer.mlp_w1, &r.mlp_w1),
                ("mlp_b1", &mut layer.mlp_b1, &r.mlp_b1),
                ("mlp_w2", &mut layer.mlp_w2, &r.mlp_w2),
                ("mlp_b2", &mut layer.mlp_b2, &r.mlp_b2),
            ];
            for (name, dst, like) in slots {
                *dst = take(&format!("layer{l}.{name}"), like)?;
            }
        }
        out.final_gamma = take("final_gamma", &reference.final_gamma)?;
        out.final_beta = take("final_beta", &reference.final_beta)?;
        out.head_w = take("head_w", &reference.head_w)?;
        out.head_b = take("head_b", &reference.head_b)?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::InvalidConfig(format!("unexpected backbone tensor '{extra}'")));
        }
        Ok(out)
    }

    /// SHA-256 over the names and little-endian bytes of the frozen tensors.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.frozen_tensors() {
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Projection weights `[W_Q, W_K, W_V]` per layer.
    pub fn qkv_weights(&self) -> Vec<[DenseTensor; 3]> {
        self.layers
            .iter()
            .map(|l| [l.wq.clone(), l.wk.clone(), l.wv.clone()])
            .collect()
    }

    /// Places the weights on `tape`; only the head may require gradients.
    pub fn bind(&self, tape: &mut Tape, train_head: bool) -> BoundBackbone {
        let c = |tape: &mut Tape, t: &DenseTensor| tape.constant(t.clone());
        BoundBackbone {
            token_embedding: c(tape, &self.token_embedding),
            position_embedding: c(tape, &self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    qkv: [c(tape, &l.wq), c(tape, &l.wk), c(tape, &l.wv)],
                    wo: c(tape, &l.wo),
                    ln1: (c(tape, &l.ln1_gamma), c(tape, &l.ln1_beta)),
                    ln2: (c(tape, &l.ln2_gamma), c(tape, &l.ln2_beta)),
                    mlp_w1: c(tape, &l.mlp_w1),
                    mlp_b1: c(tape, &l.mlp_b1),
                    mlp_w2: c(tape, &l.mlp_w2),
                    mlp_b2: c(tape, &l.mlp_b2),
                })
                .collect(),
            final_ln: (c(tape, &self.final_gamma), c(tape, &self.final_beta)),
            head_w: tape.leaf(self.head_w.clone(), train_head),
            head_b: tape.leaf(self.head_b.clone(), train_head),
            config: self.config.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct BoundLayer {
    qkv: [Var; 3],
    wo: Var,
    ln1: (Var, Var),
    ln2: (Var, Var),
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

/// A backbone whose weights live on a [`Tape`].
#[derive(Clone, Debug)]
pub struct BoundBackbone {
    config: BackboneConfig,
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<BoundLayer>,
    final_ln: (Var, Var),
    pub head_w: Var,
    pub head_b: Var,
}

impl BoundBackbone {
    /// Logits `(batch × classes)` for token sequences of length `seq_len`.
    /// Each layer uses `W_p + alpha·ΔW_p` for p ∈ {Q, K, V} when an adapter is
    /// given; the output projection is never adapted. The head reads the
    /// final representation of position 0.
    pub fn forward(
        &self,
        tape: &mut Tape,
        adapter: Option<&BoundAdapter>,
        batch: &[Vec<usize>],
    ) -> Result<Var> {
        let cfg = &self.config;
        let (d, h) = (cfg.dims.d, cfg.dims.heads);
        let dh = cfg.dims.head_dim();
        let (b, s) = (batch.len(), cfg.seq_len);
        if b == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(b * s);
        for seq in batch {
            if seq.len() != s {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    detail: format!("sequence of length {}, expected {s}", seq.len()),
                });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= cfg.vocab) {
                return Err(Error::IndexOutOfRange {
                    mode: 0,
                    index: bad,
                    size: cfg.vocab,
                });
            }
            ids.extend_from_slice(seq);
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let tok = tape.embedding(self.token_embedding, &ids)?;
        let pos = tape.embedding(self.position_embedding, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        for (l, layer) in self.layers.iter().enumerate() {
            let xn = tape.layer_norm(x, layer.ln1.0, layer.ln1.1)?;
            let mut heads = [xn; 3];
            for p in Projection::ALL {
                let w = match adapter {
                    Some(a) => a.effective_weight(tape, layer.qkv[p.index()], p, l)?,
                    None => layer.qkv[p.index()],
                };
                let y = tape.matmul(xn, w)?;
                let y = tape.reshape(y, &[b, s, h, dh])?;
                // keys are laid out (b·h, d_h, s) so scores = Q · K directly
                let perm: &[usize] = if p == Projection::Key { &[0, 2, 3, 1] } else { &[0, 2, 1, 3] };
                let y = tape.permute(y, perm)?;
                let shape: [usize; 3] = if p == Projection::Key { [b * h, dh, s] } else { [b * h, s, dh] };
                heads[p.index()] = tape.reshape(y, &shape)?;
            }
            let [q, k, v] = heads;
            let scores = tape.batch_matmul(q, k)?;
            let scores = tape.scale(scores, inv_sqrt_dh);
            let attn = tape.softmax(scores);
            let o = tape.batch_matmul(attn, v)?;
            let o = tape.reshape(o, &[b, h, s, dh])?;
            let o = tape.permute(o, &[0, 2, 1, 3])?;
            let o = tape.reshape(o, &[b * s, d])?;
            let o = tape.matmul(o, layer.wo)?;
            x = tape.add(x, o)?;

            let xn = tape.layer_norm(x, layer.ln2.0, layer.ln2.1)?;
            let m = tape.matmul(xn, layer.mlp_w1)?;
            let m = tape.add_bias(m, layer.mlp_b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, layer.mlp_w2)?;
            let m = tape.add_bias(m, layer.mlp_b2)?;
            x = tape.add(x, m)?;
        }
        let x = tape.layer_norm(x, self.final_ln.0, self.final_ln.1)?;
        // classify from the first position of each sequence
        let rows = tape.reshape(x, &[b, s * d])?;
        let pooled = tape.narrow(rows, 1, 0, d)?;
        let logits = tape.matmul(pooled, self.head_w)?;
        tape.add_bias(logits, self.head_b)
    }
}

fn check_adapter_dims(backbone: &TransformerBackbone, adapter: &TensLoraAdapter) -> Result<()> {
    if adapter.dims != backbone.config.dims {
        return Err(Error::InvalidDims(format!(
            "adapter dims {:?} do not match backbone dims {:?}",
            adapter.dims, backbone.config.dims
        )));
    }
    Ok(())
}

/// Logits for a batch without recording gradients.
pub fn forward(
    backbone: &TransformerBackbone,
    adapter: Option<&TensLoraAdapter>,
    batch: &[Vec<usize>],
) -> Result<DenseTensor> {
    if let Some(a) = adapter {
        check_adapter_dims(backbone, a)?;
    }
    let mut tape = Tape::new();
    let bb = backbone.bind(&mut tape, false);
    let bound = adapter.map(|a| a.bind(&mut tape, false));
    let logits = bb.forward(&mut tape, bound.as_ref(), batch)?;
    Ok(tape.value(logits).clone())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &DenseTensor) -> Vec<usize> {
    let c = logits.dim(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Examples per evaluation shard.
const EVAL_CHUNK: usize = 64;

/// Argmax predictions for every example, sharded across threads.
pub fn predict(
    backbone: &TransformerBackbone,
    adapter: Option<&TensLoraAdapter>,
    data: &[Example],
) -> Result<Vec<usize>> {
    let chunks: Vec<&[Example]> = data.chunks(EVAL_CHUNK).collect();
    let per_chunk = parallel::map_slice(&chunks, |chunk| {
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        forward(backbone, adapter, &tokens).map(|l| argmax_rows(&l))
    });
    let mut out = Vec::with_capacity(data.len());
    for p in per_chunk {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn evaluate(
    backbone: &TransformerBackbone,
    adapter: Option<&TensLoraAdapter>,
    data: &[Example],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate an empty dataset".into()));
    }
    let preds = predict(backbone, adapter, data)?;
    let correct = preds.iter().zip(data).filter(|(p, e)| **p == e.label).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Folds `alpha·ΔW` into the Q/K/V weights of a copy of `backbone`.
pub fn merge(backbone: &TransformerBackbone, adapter: &TensLoraAdapter) -> Result<TransformerBackbone> {
    check_adapter_dims(backbone, adapter)?;
    let mut out = backbone.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for p in Projection::ALL {
            let w = adapter.apply_one(layer.projection(p), p, l)?;
            *layer.projection_mut(p) = w;
        }
    }
    Ok(out)
}

/// End-to-end gradient audit: cross-entropy of the classifier on `data`
/// differentiated with respect to every adapter parameter, compared with
/// central differences. The backbone, head included, stays constant.
pub fn audit_gradients(
    backbone: &TransformerBackbone,
    adapter: &TensLoraAdapter,
    data: &[Example],
    options: GradCheckOptions,
) -> Result<GradCheckReport> {
    check_adapter_dims(backbone, adapter)?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("gradient audit needs at least one example".into()));
    }
    let tokens: Vec<Vec<usize>> = data.iter().map(|e| e.tokens.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let params: Vec<DenseTensor> = adapter.params().into_iter().cloned().collect();
    let build = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let bb = backbone.bind(tape, false);
        let bound = adapter.bind_vars(vars)?;
        let logits = bb.forward(tape, Some(&bound), &tokens)?;
        tape.cross_entropy(logits, &labels)
    };
    finite_diff_check(build, &params, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterVariant, RankPlan};

    fn config() -> BackboneConfig {
        BackboneConfig {
            dims: ModelDims::new(16, 2, 2).unwrap(),
            vocab: 8,
            seq_len: 6,
            mlp_ratio: 2,
            classes: 2,
            seed: 3,
        }
    }

    fn randomize(adapter: &mut TensLoraAdapter, seed: u64) {
        for (i, p) in adapter.params_mut().into_iter().enumerate() {
            *p = DenseTensor::random_normal(p.shape(), seed + i as u64).scale(0.2);
        }
    }

    fn batch(n: usize, seed: u64) -> Vec<Vec<usize>> {
        let task = SyntheticTask::majority(8, 6, seed);
        make_task(&task, n).unwrap().into_iter().map(|e| e.tokens).collect()
    }

    #[test]
    fn zero_adapter_logits_identical() {
        let bb = TransformerBackbone::new(config()).unwrap();
        let x = batch(5, 1);
        let plain = forward(&bb, None, &x).unwrap();
        for v in AdapterVariant::ALL {
            let a = init_adapter(v, bb.config.dims, RankPlan::uniform(v, 2), 4.0, 7).unwrap();
            let with = forward(&bb, Some(&a), &x).unwrap();
            assert_eq!(with.max_abs_diff(&plain), 0.0, "{v}");
        }
    }

    #[test]
    fn merged_matches_dynamic() {
        let bb = TransformerBackbone::new(config()).unwrap();
        let x = batch(4, 2);
        for v in AdapterVariant::ALL {
            let mut a = init_adapter(v, bb.config.dims, RankPlan::uniform(v, 2), 4.0, 7).unwrap();
            randomize(&mut a, 50);
            let merged = merge(&bb, &a).unwrap();
            let dynamic = forward(&bb, Some(&a), &x).unwrap();
            let folded = forward(&merged, None, &x).unwrap();
            assert!(dynamic.max_abs_diff(&folded) < 1e-9, "{v}");
        }
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let bb = TransformerBackbone::new(config()).unwrap();
        let x = batch(4, 3);
        let rev: Vec<Vec<usize>> = x.iter().rev().cloned().collect();
        let a = forward(&bb, None, &x).unwrap();
        let b = forward(&bb, None, &rev).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                assert_eq!(a.get(&[i, c]), b.get(&[3 - i, c]));
            }
        }
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let bb = TransformerBackbone::new(config()).unwrap();
        assert!(forward(&bb, None, &[vec![0, 1, 2, 3, 4, 8]]).is_err());
        assert!(forward(&bb, None, &[vec![0, 1]]).is_err());
        assert!(forward(&bb, None, &[]).is_err());
    }

    #[test]
    fn mismatched_adapter_rejected() {
        let bb = TransformerBackbone::new(config()).unwrap();
        let dims = ModelDims::new(8, 2, 2).unwrap();
        let a = init_adapter(AdapterVariant::Qkv, dims, RankPlan::uniform(AdapterVariant::Qkv, 2), 4.0, 0).unwrap();
        assert!(merge(&bb, &a).is_err());
        assert!(forward(&bb, Some(&a), &batch(1, 0)).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let l = DenseTensor::matrix(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![0, 1]);
    }

    #[test]
    fn constant_winner_accuracy_equals_class_frequency() {
        // zero head with a positive bias on class 1: every prediction is 1
        let mut bb = TransformerBackbone::new(config()).unwrap();
        bb.head_w = DenseTensor::zeros(bb.head_w.shape());
        bb.head_b = DenseTensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let data = make_task(&SyntheticTask::majority(8, 6, 4), 300).unwrap();
        let freq = data.iter().filter(|e| e.label == 1).count() as f64 / 300.0;
        assert_eq!(evaluate(&bb, None, &data).unwrap(), freq);
        assert!(evaluate(&bb, None, &[]).is_err());
    }

    #[test]
    fn named_round_trip() {
        let bb = TransformerBackbone::new(config()).unwrap();
        let map: BTreeMap<String, DenseTensor> = bb
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let back = TransformerBackbone::from_named(bb.config.clone(), map.clone()).unwrap();
        assert_eq!(back, bb);
        let mut missing = map;
        missing.remove("layer1.wv");
        assert!(TransformerBackbone::from_named(bb.config.clone(), missing).is_err());
    }

    #[test]
    fn checksum_tracks_frozen_weights_only() {
        let bb = TransformerBackbone::new(config()).unwrap();
        let mut other = bb.clone();
        other.head_w = other.head_w.scale(2.0);
        assert_eq!(bb.frozen_checksum(), other.frozen_checksum());
        other.layers[0].wo.data_mut()[0] += 1.0;
        assert_ne!(bb.frozen_checksum(), other.frozen_checksum());
    }
}
