//! AdamW with linear warmup and cosine annealing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate, make_task, Example, SyntheticTask, TransformerBackbone};
use crate::adapters::{TensLoraAdapter, DEFAULT_ALPHA};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Must equal the adapter's own alpha.
    pub alpha: f64,
    /// Size of the fixed training set drawn from the task.
    pub train_size: usize,
    pub adamw: AdamWParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            min_lr: 1e-6,
            warmup_steps: 50,
            total_steps: 500,
            batch: 32,
            seed: 0,
            alpha: DEFAULT_ALPHA,
            train_size: 2048,
            adamw: AdamWParams::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with `total` steps and a warmup of 10% of them.
    pub fn with_steps(total: usize) -> Self {
        Self {
            total_steps: total,
            warmup_steps: total / 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.min_lr >= 0.0 && self.min_lr < self.peak_lr && self.peak_lr.is_finite()) {
            return bad(format!("need 0 ≤ min_lr < peak_lr, got {} and {}", self.min_lr, self.peak_lr));
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "need warmup_steps < total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch == 0 || self.train_size == 0 {
            return bad("batch and train_size must be ≥ 1".into());
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 || a.weight_decay < 0.0 {
            return bad(format!("invalid AdamW parameters {a:?}"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            min: self.min_lr,
            warmup: self.warmup_steps,
            total: self.total_steps,
        }
    }
}

/// Linear warmup from 0 to `peak`, then cosine annealing down to `min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return self.min;
        }
        let t = (step - self.warmup) as f64 / (self.total - self.warmup) as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.peak * w + self.min * (1.0 - w)
    }
}

/// Decoupled-weight-decay Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    params: AdamWParams,
    m: Vec<DenseTensor>,
    v: Vec<DenseTensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: AdamWParams, shapes: &[&[usize]]) -> Self {
        Self {
            params,
            m: shapes.iter().map(|s| DenseTensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| DenseTensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [&mut DenseTensor], grads: &[DenseTensor]) {
        self.t += 1;
        let AdamWParams { beta1, beta2, eps, weight_decay } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *x -= lr * (update + weight_decay * *x);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Accuracy on the step's minibatch.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub records: Vec<TrainRecord>,
    /// Accuracy on the whole training set after the last step.
    pub train_accuracy: f64,
}

impl TrainLog {
    /// First step whose minibatch accuracy reaches `threshold`.
    pub fn first_step_reaching(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.accuracy >= threshold).map(|r| r.step)
    }
}

fn batch_accuracy(logits: &DenseTensor, labels: &[usize]) -> f64 {
    let preds = super::argmax_rows(logits);
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Trains the adapter (when given) together with the classifier head.
/// Steps run `1..=total_steps`; step `s` uses `lr(s)`, so the final update
/// uses exactly `min_lr`.
pub fn train_adapter(
    backbone: &mut TransformerBackbone,
    mut adapter: Option<&mut TensLoraAdapter>,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    task.validate()?;
    if task.vocab != backbone.config.vocab || task.seq_len != backbone.config.seq_len {
        return Err(Error::InvalidConfig(format!(
            "task (vocab {}, seq_len {}) does not fit backbone (vocab {}, seq_len {})",
            task.vocab, task.seq_len, backbone.config.vocab, backbone.config.seq_len
        )));
    }
    if task.classes() != backbone.config.classes {
        return Err(Error::InvalidConfig(format!(
            "task has {} classes, backbone head has {}",
            task.classes(),
            backbone.config.classes
        )));
    }
    if let Some(a) = adapter.as_deref() {
        super::check_adapter_dims(backbone, a)?;
        if a.alpha != cfg.alpha {
            return Err(Error::InvalidConfig(format!(
                "adapter alpha {} differs from train alpha {}",
                a.alpha, cfg.alpha
            )));
        }
    }
    let data = make_task(task, cfg.train_size)?;
    let schedule = cfg.schedule();

    let mut shapes: Vec<Vec<usize>> = vec![backbone.head_w.shape().to_vec(), backbone.head_b.shape().to_vec()];
    if let Some(a) = adapter.as_deref() {
        shapes.extend(a.params().iter().map(|p| p.shape().to_vec()));
    }
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new(cfg.adamw, &shape_refs);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut records = Vec::with_capacity(cfg.total_steps);

    for step in 1..=cfg.total_steps {
        let mut batch: Vec<&Example> = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let tokens: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();

        let mut tape = Tape::new();
        let bound = backbone.bind(&mut tape, true);
        let bound_adapter = adapter.as_deref().map(|a| a.bind(&mut tape, true));
        let logits = bound.forward(&mut tape, bound_adapter.as_ref(), &tokens)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss_value} at step {step}")));
        }
        let accuracy = batch_accuracy(tape.value(logits), &labels);
        tape.backward(loss)?;

        let mut vars: Vec<Var> = vec![bound.head_w, bound.head_b];
        if let Some(b) = &bound_adapter {
            vars.extend(b.param_vars());
        }
        let grads: Vec<DenseTensor> = vars
            .iter()
            .zip(&shapes)
            .map(|(v, s)| tape.grad(*v).cloned().unwrap_or_else(|| DenseTensor::zeros(s)))
            .collect();
        let lr = schedule.lr(step);
        let mut params: Vec<&mut DenseTensor> = vec![&mut backbone.head_w, &mut backbone.head_b];
        if let Some(a) = adapter.as_deref_mut() {
            params.extend(a.params_mut());
        }
        opt.step(lr, &mut params, &grads);
        records.push(TrainRecord {
            step,
            loss: loss_value,
            lr,
            accuracy,
        });
    }
    let train_accuracy = evaluate(backbone, adapter.as_deref(), &data)?;
    Ok(TrainLog {
        config: cfg.clone(),
        records,
        train_accuracy,
    })
}
