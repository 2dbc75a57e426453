//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BackwardFault, Tape, Var};
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::DenseTensor;

/// Which coordinates of each parameter tensor get perturbed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    All,
    /// At most `per_param` coordinates of each tensor, chosen by `seed`.
    Random { per_param: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub sampling: Sampling,
    /// Corrupts one backward rule on the analytic tape (negative control).
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            sampling: Sampling::All,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + analytic.abs()).max(1e-12)
}

fn coordinates(params: &[DenseTensor], sampling: Sampling) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (p, t) in params.iter().enumerate() {
        match sampling {
            Sampling::All => out.extend((0..t.len()).map(|c| (p, c))),
            Sampling::Random { per_param, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(p as u64));
                let k = per_param.min(t.len());
                let mut picked: Vec<usize> = sample(&mut rng, t.len(), k).into_vec();
                picked.sort_unstable();
                out.extend(picked.into_iter().map(|c| (p, c)));
            }
        }
    }
    out
}

/// Compares `analytic` gradients of a scalar function `f` against central
/// differences with step `h`, returning the worst relative error
/// `|a − n| / max(1e-12, |a| + |n|)` over the sampled coordinates.
pub fn central_difference_check<F>(
    f: F,
    params: &[DenseTensor],
    analytic: &[DenseTensor],
    h: f64,
    sampling: Sampling,
) -> Result<GradCheckReport>
where
    F: Fn(&[DenseTensor]) -> f64 + Sync + Send,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::InvalidConfig(format!("finite-difference step {h} must be positive")));
    }
    if analytic.len() != params.len()
        || analytic.iter().zip(params).any(|(a, p)| a.shape() != p.shape())
    {
        return Err(Error::ShapeMismatch {
            op: "central_difference_check",
            detail: "analytic gradients do not match parameter shapes".into(),
        });
    }
    let loss = f(params);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("function value {loss}")));
    }
    let coords = coordinates(params, sampling);
    let errors = parallel::map_slice(&coords, |&(p, c)| {
        let mut shifted = params.to_vec();
        let x0 = params[p].data()[c];
        shifted[p].data_mut()[c] = x0 + h;
        let plus = f(&shifted);
        shifted[p].data_mut()[c] = x0 - h;
        let minus = f(&shifted);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameter {p} coordinate {c}: f(x±h) = {plus}, {minus}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        Ok(relative_error(analytic[p].data()[c], numeric))
    });
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        worst: None,
        loss,
    };
    for (e, &coord) in errors.into_iter().zip(&coords) {
        let e = e?;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some(coord);
        }
    }
    Ok(report)
}

/// Gradient audit of a tape-building scalar function. `build` receives the
/// parameters as tape variables and returns the scalar loss. Analytic
/// gradients come from one reverse sweep; every perturbed evaluation uses a
/// fresh tape with constant inputs.
pub fn finite_diff_check<F>(
    build: F,
    params: &[DenseTensor],
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync + Send,
{
    let mut tape = match options.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<DenseTensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .cloned()
                .unwrap_or_else(|| DenseTensor::zeros(p.shape()))
        })
        .collect();
    let eval = |ps: &[DenseTensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        match build(&mut t, &vs) {
            Ok(l) => t.value(l).data()[0],
            Err(_) => f64::NAN,
        }
    };
    central_difference_check(eval, params, &analytic, options.step, options.sampling)
}
