//! Loss, optimiser and the retraining / fine-tuning loop.
//!
//! The loss is `w_E · mean((ΔE / n_atoms)²) + w_F · mean(ΔF²)` over the
//! structures and force components of a batch. Optimisation is AdamW with
//! global-norm gradient clipping, an exponential moving average of the weights
//! and a plateau learning-rate schedule driven by the epoch training loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{forward, positions_mat, predict_batch, Architecture, AtomicSystem, Batch, ModelParams, Weights};
use crate::tape::{Mat, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub energy_weight: f64,
    pub force_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Epochs without improvement of the training loss before the learning
    /// rate is multiplied by `lr_factor`.
    pub patience: usize,
    pub lr_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            energy_weight: 1.0,
            force_weight: 10.0,
            lr: 0.005,
            weight_decay: 1e-8,
            ema_decay: 0.995,
            clip_norm: 100.0,
            batch_size: 10,
            patience: 5,
            lr_factor: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.energy_weight >= 0.0 && self.force_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("EMA decay must lie in (0, 1)");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return bad("learning rate and weight decay must be non-negative, clip norm positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("plateau factor must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Recover accuracy of a freshly pruned model on pre-training data.
    Retrain,
    /// Adapt a model to a downstream corpus.
    Finetune,
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Retrain => "retrain",
            TrainMode::Finetune => "finetune",
        })
    }
}

/// Running statistics of one epoch, taken from the training batches
/// (current weights, before each update).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub mae_e: f64,
    pub mae_f: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: Vec<EpochRecord>,
    pub seconds: f64,
    pub params: ModelParams,
    /// Shadow weights; the ones to evaluate.
    pub ema_params: ModelParams,
}

impl TrainReport {
    /// `epoch,loss,mae_e,mae_f` rows.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,loss,mae_e,mae_f\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{:?},{:?},{:?}", r.epoch, r.loss, r.mae_e, r.mae_f);
        }
        s
    }
}

/// Energy MAE per atom and force MAE per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mae_e: f64,
    pub mae_f: f64,
}

fn labels(s: &AtomicSystem) -> Result<(f64, &[[f64; 3]])> {
    match (s.energy, &s.forces) {
        (Some(e), Some(f)) if f.len() == s.n_atoms() => Ok((e, f)),
        _ => Err(Error::Invalid("training and evaluation need energy and force labels".into())),
    }
}

/// Loss of finished predictions; same formula as the taped training loss.
pub fn loss(preds: &[crate::Prediction], refs: &[AtomicSystem], energy_weight: f64, force_weight: f64) -> Result<f64> {
    if preds.len() != refs.len() || preds.is_empty() {
        return Err(Error::Invalid("need one prediction per labelled system".into()));
    }
    let (mut se, mut sf, mut nf) = (0.0, 0.0, 0usize);
    for (p, r) in preds.iter().zip(refs) {
        let (e, f) = labels(r)?;
        se += ((p.energy - e) / r.n_atoms() as f64).powi(2);
        for (a, b) in p.forces.iter().flatten().zip(f.iter().flatten()) {
            sf += (a - b).powi(2);
        }
        nf += 3 * r.n_atoms();
    }
    Ok(energy_weight * se / preds.len() as f64 + force_weight * sf / nf as f64)
}

/// MAE of `params` on labelled `data`, evaluated in chunks at the configured
/// precision.
pub fn evaluate(params: &ModelParams, data: &[AtomicSystem]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("no evaluation systems".into()));
    }
    let arch = Architecture::new(&params.config)?;
    let (mut ae, mut af, mut nf) = (0.0, 0.0, 0usize);
    for chunk in data.chunks(16) {
        let preds = predict_batch(&arch, params, chunk, None)?;
        for (p, r) in preds.iter().zip(chunk) {
            let (e, f) = labels(r)?;
            ae += (p.energy - e).abs() / r.n_atoms() as f64;
            for (a, b) in p.forces.iter().flatten().zip(f.iter().flatten()) {
                af += (a - b).abs();
            }
            nf += 3 * r.n_atoms();
        }
    }
    Ok(Metrics { mae_e: ae / data.len() as f64, mae_f: af / nf as f64 })
}

/// Loss value, gradients (name order) and batch error sums.
struct StepResult {
    loss: f64,
    grads: Vec<Mat<f64>>,
    abs_e: f64,
    abs_f: f64,
    n_f: usize,
}

fn loss_and_grad(arch: &Architecture, params: &ModelParams, batch_sys: &[&AtomicSystem], cfg: &TrainConfig) -> Result<StepResult> {
    let batch = Batch::new(&arch.config, batch_sys.iter().copied())?;
    let mut tape = Tape::<f64>::new();
    let w = Weights::load(&mut tape, params, true);
    let pos = tape.leaf(positions_mat(&batch.positions));
    let out = forward(arch, &mut tape, &w, &batch, pos, None)?;
    let need_forces = cfg.force_weight > 0.0;
    let grad_pos = tape.grad(out.total_energy, &[pos], need_forces)?[0];

    let n_s = batch.n_structures;
    let mut e_ref = Vec::with_capacity(n_s);
    let mut inv_n = Vec::with_capacity(n_s);
    let mut f_ref = Vec::with_capacity(3 * batch.n_atoms());
    for s in batch_sys {
        let (e, f) = labels(s)?;
        e_ref.push(e);
        inv_n.push(1.0 / s.n_atoms() as f64);
        // the tape holds dE/dx = -F, so the residual is dE/dx + F_ref
        f_ref.extend(f.iter().flatten());
    }
    let e_ref_v = tape.constant(Mat::from_vec(n_s, 1, e_ref));
    let inv_n_v = tape.constant(Mat::from_vec(n_s, 1, inv_n));
    let de = tape.sub(out.structure_energy, e_ref_v);
    let de = tape.mul(de, inv_n_v);
    let de2 = tape.mul(de, de);
    let le = tape.sum(de2);
    let mut total = tape.scale(le, cfg.energy_weight / n_s as f64);
    let n_f = f_ref.len();
    let f_ref_v = tape.constant(Mat::from_vec(batch.n_atoms(), 3, f_ref));
    let df = tape.add(grad_pos, f_ref_v);
    if need_forces {
        let df2 = tape.mul(df, df);
        let lf = tape.sum(df2);
        let lf = tape.scale(lf, cfg.force_weight / n_f as f64);
        total = tape.add(total, lf);
    }
    let abs_e = tape.value(de).data.iter().map(|d| d.abs()).sum();
    let abs_f = tape.value(df).data.iter().map(|d| d.abs()).sum();
    let loss = tape.scalar(total);
    let vars: Vec<Var> = w.iter().map(|(_, v)| v).collect();
    let grads = tape.grad(total, &vars, false)?.into_iter().map(|g| tape.value(g).clone()).collect();
    Ok(StepResult { loss, grads, abs_e, abs_f, n_f })
}

/// Loss and gradient of `params` on `systems`, gradients keyed by tensor name.
pub fn loss_gradient(params: &ModelParams, systems: &[AtomicSystem], cfg: &TrainConfig) -> Result<(f64, BTreeMap<String, Mat<f64>>)> {
    let arch = Architecture::new(&params.config)?;
    let refs: Vec<&AtomicSystem> = systems.iter().collect();
    let r = loss_and_grad(&arch, params, &refs, cfg)?;
    Ok((r.loss, params.tensors.keys().cloned().zip(r.grads).collect()))
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sqr()).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat<f64>>,
    v: Vec<Mat<f64>>,
}

impl AdamW {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, weight_decay: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.into_iter().map(|(r, c)| (Mat::zeros(r, c), Mat::zeros(r, c))).unzip();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn step(&mut self, params: &mut [&mut Mat<f64>], grads: &[Mat<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.data.len() {
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * g.data[j];
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * g.data[j] * g.data[j];
                let update = (m.data[j] / bc1) / ((v.data[j] / bc2).sqrt() + self.eps);
                p.data[j] -= lr * (update + self.weight_decay * p.data[j]);
            }
        }
    }
}

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub shadow: ModelParams,
}

impl Ema {
    pub fn new(params: &ModelParams, decay: f64) -> Self {
        Self { decay, shadow: params.clone() }
    }

    pub fn update(&mut self, params: &ModelParams) {
        let d = self.decay;
        for (name, s) in self.shadow.tensors.iter_mut() {
            let p = &params.tensors[name];
            for (a, b) in s.data.iter_mut().zip(&p.data) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// a new best loss.
#[derive(Debug, Clone)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self { patience, factor, best: f64::INFINITY, bad: 0 }
    }

    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            return lr * self.factor;
        }
        lr
    }
}

/// Trains `params` on labelled `data`. Deterministic given `cfg.seed`.
pub fn train_loop(params: &ModelParams, data: &[AtomicSystem], cfg: &TrainConfig, mode: TrainMode) -> Result<TrainReport> {
    cfg.validate()?;
    params.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("no training systems".into()));
    }
    for s in data {
        labels(s)?;
    }
    let mut cur = params.clone();
    cur.config.precision = crate::Precision::Fp64;
    let arch = Architecture::new(&cur.config)?;
    let mut opt = AdamW::new(cur.tensors.values().map(Mat::shape), cfg.weight_decay);
    let mut ema = Ema::new(&cur, cfg.ema_decay);
    let mut sched = Plateau::new(cfg.patience, cfg.lr_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut lr = cfg.lr;
    let mut records = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut ae, mut af, mut nf, mut n_structs) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let sys: Vec<&AtomicSystem> = idx.iter().map(|&i| &data[i]).collect();
            let mut r = loss_and_grad(&arch, &cur, &sys, cfg)?;
            if !r.loss.is_finite() || r.grads.iter().any(|g| g.data.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += r.loss * sys.len() as f64;
            ae += r.abs_e;
            af += r.abs_f;
            nf += r.n_f;
            n_structs += sys.len();
            clip_global_norm(&mut r.grads, cfg.clip_norm);
            let mut ps: Vec<&mut Mat<f64>> = cur.tensors.values_mut().collect();
            opt.step(&mut ps, &r.grads, lr);
            ema.update(&cur);
        }
        let n = data.len() as f64;
        let loss = loss_sum / n;
        records.push(EpochRecord { epoch, loss, mae_e: ae / n_structs as f64, mae_f: af / nf.max(1) as f64, lr });
        lr = sched.observe(loss, lr);
    }
    cur.config.precision = params.config.precision;
    let mut shadow = ema.shadow;
    shadow.config.precision = params.config.precision;
    Ok(TrainReport { mode, epochs: records, seconds: start.elapsed().as_secs_f64(), params: cur, ema_params: shadow })
}

#[cfg(test)]
mod tests;
