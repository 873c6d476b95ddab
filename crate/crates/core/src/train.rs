//! Training: segmentation losses, cosine schedule, AdamW with decoupled
//! weight decay, and the deterministic fit loop.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::Mode;
use crate::data::{augment, sub_seed, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{Model, Overlay, ParamRegistry};
use crate::tensor::{Graph, Tensor};

const BATCH_SALT: u64 = 0xba7c_4e11;
const AUG_SALT: u64 = 0xa0a0_55ed;

/// Soft Dice loss on logits: `1 - (2*I + s) / (P + G + s)` where I, P, G are
/// sums of sigmoid*target, sigmoid, and target. Targets must be hard 0/1.
pub fn dice_loss(g: &mut Graph, logits: &Tensor, target: &Tensor, smooth: f64) -> Result<Tensor> {
    if logits.shape() != target.shape() {
        return Err(Error::Dim(format!(
            "dice_loss shapes differ: {:?} vs {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    if target.to_vec().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data(
            "dice_loss targets must be exactly 0 or 1; soft masks indicate an upstream bug".into(),
        ));
    }
    let probs = g.sigmoid(logits)?;
    let overlap = g.mul(&probs, target)?;
    let inter = g.sum(&overlap)?;
    let p_sum = g.sum(&probs)?;
    let g_sum = g.sum(target)?;
    let twice = g.scale(&inter, 2.0)?;
    let num = g.add_const(&twice, smooth)?;
    let total = g.add(&p_sum, &g_sum)?;
    let den = g.add_const(&total, smooth)?;
    let ratio = g.div(&num, &den)?;
    let neg = g.scale(&ratio, -1.0)?;
    g.add_const(&neg, 1.0)
}

/// Mean binary cross-entropy on logits.
pub fn bce_loss(g: &mut Graph, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    g.bce_with_logits_mean(logits, target)
}

/// Weighted sum of BCE and soft Dice.
pub fn combined_loss(
    g: &mut Graph,
    logits: &Tensor,
    target: &Tensor,
    bce_weight: f64,
    dice_weight: f64,
    smooth: f64,
) -> Result<Tensor> {
    let b = bce_loss(g, logits, target)?;
    let d = dice_loss(g, logits, target, smooth)?;
    let wb = g.scale(&b, bce_weight)?;
    let wd = g.scale(&d, dice_weight)?;
    g.add(&wb, &wd)
}

/// Cosine decay from `lr0` at t=0 to exactly 0 at t=total.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr0 * 0.5 * (1.0 + phase.cos())
}

/// AdamW with decoupled decay applied before the update. Moments are kept
/// in f64 keyed by parameter name; prompt embeddings (names starting with
/// `adapter.p_`) are exempt from decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> AdamW {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: HashMap::new(), v: HashMap::new() }
    }

    /// Total number of stored moment scalars, for state accounting.
    pub fn state_floats(&self) -> usize {
        self.m.values().map(Vec::len).sum::<usize>() + self.v.values().map(Vec::len).sum::<usize>()
    }

    /// One update over every trainable parameter in the registry.
    pub fn step(&mut self, reg: &ParamRegistry, lr: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in reg.trainable_params() {
            let grad = param.grad().ok_or_else(|| Error::TrainAbort {
                step: self.t as usize,
                lr,
                msg: format!("trainable parameter '{name}' received no gradient"),
                recent: Vec::new(),
            })?;
            let wd = if name.starts_with("adapter.p_") { 0.0 } else { weight_decay };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
            param.update_data(|data| {
                for i in 0..data.len() {
                    let gi = grad[i] as f64;
                    let mut p = data[i] as f64;
                    p *= 1.0 - lr * wd;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    p -= lr * m_hat / (v_hat.sqrt() + eps);
                    data[i] = p as f32;
                }
            });
        }
        Ok(())
    }
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new()
    }
}

/// Fit-loop settings. `lr: None` resolves to the per-mode default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub dice_smooth: f64,
    pub augment: bool,
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 1000,
            steps_per_epoch: 20,
            batch_size: 2,
            lr: None,
            weight_decay: 0.01,
            bce_weight: 0.2,
            dice_weight: 0.8,
            dice_smooth: 1.0,
            augment: true,
            eval_every: None,
        }
    }
}

/// Default peak learning rate for a tuning mode. Prompt embeddings tolerate
/// far larger steps than LoRA factors or raw decoder weights.
pub fn default_lr(mode: Mode) -> f64 {
    match mode {
        Mode::PtMd => 0.05,
        Mode::PtMdIe => 0.01,
        Mode::LoraMd | Mode::LoraMdIe => 1e-3,
        Mode::FullMd | Mode::FullMdLoraIe => 1e-4,
    }
}

impl TrainConfig {
    pub fn resolved_lr(&self, mode: Mode) -> f64 {
        self.lr.unwrap_or_else(|| default_lr(mode))
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return fail("epochs, steps_per_epoch, and batch_size must be positive".into());
        }
        if let Some(lr) = self.lr {
            if !ics_finite_positive(lr) {
                return fail(format!("lr must be finite and positive, got {lr}"));
            }
        }
        if self.weight_decay < 0.0 {
            return fail("weight_decay must be non-negative".into());
        }
        if self.bce_weight < 0.0 || self.dice_weight < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if (self.bce_weight + self.dice_weight - 1.0).abs() > 1e-9 {
            return fail(format!(
                "loss weights must sum to 1, got {} + {}",
                self.bce_weight, self.dice_weight
            ));
        }
        if self.dice_smooth < 0.0 {
            return fail("dice_smooth must be non-negative".into());
        }
        if self.eval_every == Some(0) {
            return fail("eval_every must be positive when set".into());
        }
        Ok(())
    }
}

fn ics_finite_positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// One metrics line. Written at the first step of every epoch plus a final
/// line at t = total with the held-out Dice.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dice: Option<f64>,
}

/// Outcome of a run. Wall time is informational only and deliberately
/// excluded from serialization so metrics files stay byte-reproducible.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub mode: String,
    pub train_n: usize,
    pub final_dice: f64,
    pub records: Vec<EpochRecord>,
    #[serde(skip)]
    pub wall_secs: f64,
}

/// Serializes records as JSON lines.
pub fn records_to_jsonl(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Trains the adapter (or unfrozen groups) of a materialized model on the
/// split's train set. Pure compute: callers persist metrics and weights.
pub fn train(
    model: &Model,
    overlay: &Overlay,
    mode: Mode,
    split: &DatasetSplit,
    tcfg: &TrainConfig,
    run_seed: u64,
) -> Result<RunRecord> {
    tcfg.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Data("train and test sets must be non-empty".into()));
    }
    for s in split.train.iter().chain(&split.test) {
        if s.image.size != model.cfg.image_size {
            return Err(Error::Data(format!(
                "sample '{}' is {} px but the model expects {}",
                s.id, s.image.size, model.cfg.image_size
            )));
        }
    }
    let lr0 = tcfg.resolved_lr(mode);
    let total = tcfg.total_steps();
    let mut opt = AdamW::new();
    let mut records = Vec::with_capacity(tcfg.epochs + 1);
    let mut recent = std::collections::VecDeque::with_capacity(5);
    let mut last_loss = f64::NAN;
    let started = std::time::Instant::now();

    for epoch in 0..tcfg.epochs {
        for s in 0..tcfg.steps_per_epoch {
            let t = epoch * tcfg.steps_per_epoch + s;
            let lr = cosine_lr(lr0, t, total);
            let loss = match train_step(model, overlay, mode, split, tcfg, run_seed, epoch, s) {
                Ok(l) => l,
                Err(e) if e.is_numerical() => {
                    return Err(Error::TrainAbort {
                        step: t,
                        lr,
                        msg: e.to_string(),
                        recent: recent.iter().copied().collect(),
                    });
                }
                Err(e) => return Err(e),
            };
            opt.step(&model.reg, lr, tcfg.weight_decay)?;
            if recent.len() == 5 {
                recent.pop_front();
            }
            recent.push_back(loss);
            last_loss = loss;
            if s == 0 {
                let eval_dice = match tcfg.eval_every {
                    Some(k) if epoch % k == 0 => Some(mean_test_dice(model, overlay, split)?),
                    _ => None,
                };
                records.push(EpochRecord { epoch, step: t, lr, loss, eval_dice });
            }
        }
    }

    let final_dice = mean_test_dice(model, overlay, split)?;
    records.push(EpochRecord {
        epoch: tcfg.epochs,
        step: total,
        lr: cosine_lr(lr0, total, total),
        loss: last_loss,
        eval_dice: Some(final_dice),
    });
    Ok(RunRecord {
        mode: mode.as_str().to_string(),
        train_n: split.train.len(),
        final_dice,
        records,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

fn mean_test_dice(model: &Model, overlay: &Overlay, split: &DatasetSplit) -> Result<f64> {
    let scores = crate::eval::evaluate_model(model, overlay, &split.test)?;
    let (mean, _) = crate::eval::mean_std(&scores);
    Ok(mean)
}

/// One optimizer step's graph: batch sampled with replacement, per-sample
/// combined loss averaged, gradients left on the trainable parameters.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &Model,
    overlay: &Overlay,
    mode: Mode,
    split: &DatasetSplit,
    tcfg: &TrainConfig,
    run_seed: u64,
    epoch: usize,
    step: usize,
) -> Result<f64> {
    for (_, p) in model.reg.trainable_params() {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(
        run_seed ^ BATCH_SALT,
        epoch as u64,
        step as u64,
        0,
    ));
    let side = model.cfg.image_size;
    let mut batch_losses = Vec::with_capacity(tcfg.batch_size);
    let mut ious = Vec::new();
    for slot in 0..tcfg.batch_size {
        let pick = (rng.next_u64() % split.train.len() as u64) as usize;
        let sample = if tcfg.augment {
            augment(
                &split.train[pick],
                sub_seed(run_seed ^ AUG_SALT, epoch as u64, step as u64, slot as u64),
            )
        } else {
            split.train[pick].clone()
        };
        let image = sample.image.to_tensor();
        let (logits, iou) = model.forward_with_iou(&mut g, &image, overlay)?;
        let flat = g.reshape(&logits, &[side * side])?;
        let target = sample.mask.to_tensor();
        let loss = combined_loss(
            &mut g,
            &flat,
            &target,
            tcfg.bce_weight,
            tcfg.dice_weight,
            tcfg.dice_smooth,
        )?;
        batch_losses.push(loss);
        ious.push(iou);
    }
    let mut acc = batch_losses[0].clone();
    for l in &batch_losses[1..] {
        acc = g.add(&acc, l)?;
    }
    let mut loss = g.scale(&acc, 1.0 / tcfg.batch_size as f64)?;
    if mode.unfreezes_decoder() {
        // The quality head's output is not part of the objective, but when
        // its weights are trainable they still need (zero) gradients so the
        // optimizer sees every unfrozen parameter. A zero-scaled term routes
        // them through the same backward pass.
        for iou in &ious {
            let sq = g.mul(iou, iou)?;
            let m = g.mean(&sq)?;
            let z = g.scale(&m, 0.0)?;
            loss = g.add(&loss, &z)?;
        }
    }
    g.backward(&loss)?;
    Ok(loss.to_vec()[0] as f64)
}
