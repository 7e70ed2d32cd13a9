//! Stage-1 and Stage-2 training loops.
//!
//! Stage 1 fits the first adapter φ on every item with token
//! cross-entropy. Stage 2 freezes φ, attaches a fresh adapter φ′ and fits
//! it on the conflict items with `γ·CE + α·DPO`, using the φ-only model as
//! the DPO reference.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ce_loss, dpo_loss_cached, reference_logprobs, total_loss, DpoExample, LossValue};
use crate::model::forward::AdapterGrads;
use crate::model::{save_checkpoint, AdapterStack, Example, LoraConfig, Projection, Slot, Vocab};
use crate::partition::{DpoPair, StageTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

/// Defaults are the published recipe rescaled for a d=64 student: rank 16
/// at the published alpha/r of 2, and a learning rate sized for a small
/// random base. Batch size, epochs and warm-up are unchanged.
impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            lr: 3e-3,
            lora_rank: 16,
            lora_alpha: 32.0,
            ..Stage1Config::published()
        }
    }
}

impl Stage1Config {
    /// Values as published for a 7B student.
    pub fn published() -> Self {
        Stage1Config {
            lr: 2e-5,
            batch_size: 16,
            epochs: 3,
            warmup_ratio: 0.1,
            lora_rank: 128,
            lora_alpha: 256.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Weight of the cross-entropy term.
    pub gamma: f64,
    /// Weight of the DPO term.
    pub alpha: f64,
    /// DPO sensitivity.
    pub beta: f64,
}

/// Rescaled like [`Stage1Config`]; the learning rate keeps the published
/// Stage-2/Stage-1 ratio of 1/40.
impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 7.5e-5,
            lora_rank: 16,
            lora_alpha: 32.0,
            ..Stage2Config::published()
        }
    }
}

impl Stage2Config {
    pub fn published() -> Self {
        Stage2Config {
            lr: 5e-7,
            batch_size: 8,
            epochs: 1,
            warmup_ratio: 0.1,
            lora_rank: 128,
            lora_alpha: 256.0,
            gamma: 0.3,
            alpha: 0.5,
            beta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning-rate shape after warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Matrices wrapped by both adapters.
    pub lora_targets: Vec<Projection>,
    pub lora_init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::Linear,
            grad_clip: Some(1.0),
            lora_targets: vec![Projection::Query, Projection::Key, Projection::Value, Projection::Output],
            lora_init_scale: 1.0,
        }
    }
}

fn check_common(stage: &str, lr: f64, batch: usize, epochs: usize, warmup: f64, rank: usize, alpha: f64) -> Result<()> {
    let bad = |m: String| Err(Error::Config(format!("{stage}: {m}")));
    if !(lr > 0.0 && lr.is_finite()) {
        return bad(format!("lr must be positive, got {lr}"));
    }
    if batch == 0 || epochs == 0 || rank == 0 {
        return bad("batch_size, epochs and lora_rank must be positive".into());
    }
    if !(0.0..1.0).contains(&warmup) {
        return bad(format!("warmup_ratio must lie in [0, 1), got {warmup}"));
    }
    if !(alpha > 0.0) {
        return bad(format!("lora_alpha must be positive, got {alpha}"));
    }
    Ok(())
}

impl TrainConfig {
    /// The published recipe unscaled: query/value adapters of rank 128.
    pub fn published() -> TrainConfig {
        TrainConfig {
            stage1: Stage1Config::published(),
            stage2: Stage2Config::published(),
            lora_targets: vec![Projection::Query, Projection::Value],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s1 = &self.stage1;
        check_common("stage1", s1.lr, s1.batch_size, s1.epochs, s1.warmup_ratio, s1.lora_rank, s1.lora_alpha)?;
        let s2 = &self.stage2;
        check_common("stage2", s2.lr, s2.batch_size, s2.epochs, s2.warmup_ratio, s2.lora_rank, s2.lora_alpha)?;
        if s2.gamma < 0.0 || s2.alpha < 0.0 || s2.beta < 0.0 {
            return Err(Error::Config("stage2: gamma, alpha and beta must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.lora_targets.is_empty() {
            return Err(Error::Config("lora_targets is empty".into()));
        }
        Ok(())
    }

    pub fn stage1_lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.stage1.lora_rank,
            alpha: self.stage1.lora_alpha,
            targets: self.lora_targets.clone(),
            init_scale: self.lora_init_scale,
        }
    }

    pub fn stage2_lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.stage2.lora_rank,
            alpha: self.stage2.lora_alpha,
            targets: self.lora_targets.clone(),
            init_scale: self.lora_init_scale,
        }
    }
}

/// Learning rate at optimizer step `step` of `total_steps`: a linear ramp
/// from 0 over `ceil(warmup_ratio·total_steps)` steps, then a linear decay
/// reaching 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    schedule_lr(Schedule::Linear, step, total_steps, base_lr, warmup_ratio)
}

pub fn schedule_lr(schedule: Schedule, step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Argument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Argument(format!("step {step} exceeds total_steps {total_steps}")));
    }
    let warm = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warm {
        return Ok(base_lr * step as f64 / warm as f64);
    }
    Ok(match schedule {
        Schedule::Constant => base_lr,
        Schedule::Linear if total_steps == warm => base_lr,
        Schedule::Linear => base_lr * (total_steps - step) as f64 / (total_steps - warm) as f64,
    })
}

/// Optimizer steps for `n` examples.
pub fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * n.div_ceil(batch_size)
}

/// Adaptive-moment optimizer with decoupled weight decay over one flat
/// parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, n_params: usize) -> AdamW {
        AdamW {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        let c = &self.config;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dpo: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub n_examples: usize,
    pub total_steps: usize,
    pub loss_trace: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub wall_time_secs: f64,
    pub base_hash: String,
    pub skipped: bool,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.loss_trace.iter().map(|r| r.loss).collect()
    }

    /// `step,epoch,lr,loss,ce,dpo,grad_norm`, empty cells for absent terms.
    pub fn trace_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("step,epoch,lr,loss,ce,dpo,grad_norm\n");
        for r in &self.loss_trace {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step,
                r.epoch,
                r.lr,
                r.loss,
                opt(r.ce),
                opt(r.dpo),
                r.grad_norm
            ));
        }
        s
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(json_path, serde_json::to_vec_pretty(self)?)?;
        std::fs::write(csv_path, self.trace_csv())?;
        Ok(())
    }
}

/// Tokenized supervised example for a stage target.
pub fn encode_target(vocab: &Vocab, t: &StageTarget) -> Example {
    vocab.encode_example(&t.image_tokens, &t.prompt_text, &t.target_text)
}

pub fn encode_pair(vocab: &Vocab, p: &DpoPair) -> DpoExample {
    DpoExample {
        item_id: p.item_id.clone(),
        chosen: vocab.encode_example(&p.image_tokens, &p.prompt_text, &p.preferred),
        rejected: vocab.encode_example(&p.image_tokens, &p.prompt_text, &p.rejected),
    }
}

fn clip(grads: &mut AdapterGrads, bound: Option<f64>) -> f64 {
    let norm = grads.norm();
    if let Some(c) = bound {
        if norm > c {
            grads.scale(c / norm);
        }
    }
    norm
}

fn apply(stack: &mut AdapterStack, slot: Slot, opt: &mut AdamW, grads: &AdapterGrads, lr: f64) -> Result<()> {
    let adapter = stack
        .adapter_mut(slot)
        .ok_or_else(|| Error::Argument(format!("no {slot} adapter attached")))?;
    let mut params = adapter.flatten();
    opt.step(&mut params, &grads.flatten(), lr);
    adapter.assign(&params);
    Ok(())
}

fn epoch_order(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stage << 32) ^ epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn epoch_means(trace: &[StepRecord], epochs: usize) -> Vec<f64> {
    (0..epochs)
        .map(|e| {
            let xs: Vec<f64> = trace.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            xs.iter().sum::<f64>() / xs.len().max(1) as f64
        })
        .collect()
}

fn note_monotonicity(stage: &str, means: &[f64]) {
    if means.windows(2).any(|w| w[1] > w[0]) {
        log::warn!("{stage}: mean epoch loss rose between epochs: {means:?}");
    }
}

fn finish(
    stack: &AdapterStack,
    checkpoint: Option<&Path>,
) -> Result<Option<PathBuf>> {
    match checkpoint {
        Some(p) => {
            save_checkpoint(stack, p)?;
            Ok(Some(p.to_path_buf()))
        }
        None => Ok(None),
    }
}

/// Attaches a fresh φ and fits it to `targets`. Any Stage-2 adapter is
/// detached first. Only φ is updated.
pub fn train_stage1(
    stack: &mut AdapterStack,
    vocab: &Vocab,
    targets: &[StageTarget],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    if targets.is_empty() {
        return Err(Error::Argument("stage 1 needs at least one target".into()));
    }
    let start = Instant::now();
    let c = &config.stage1;
    stack.stage2 = None;
    stack.stage2_active = false;
    stack.attach_fresh(Slot::Stage1, &config.stage1_lora(), config.seed)?;

    let examples: Vec<Example> = targets.iter().map(|t| encode_target(vocab, t)).collect();
    let total = total_steps(examples.len(), c.batch_size, c.epochs);
    let mut opt = AdamW::new(config.optimizer.clone(), stack.adapter(Slot::Stage1).map_or(0, |a| a.n_params()));
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..c.epochs {
        let order = epoch_order(examples.len(), config.seed, 1, epoch);
        for chunk in order.chunks(c.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let LossValue { value, mut grads } = ce_loss(&batch, stack, Slot::Stage1)?;
            let grad_norm = clip(&mut grads, config.grad_clip);
            let lr = schedule_lr(config.schedule, step, total, c.lr, c.warmup_ratio)?;
            apply(stack, Slot::Stage1, &mut opt, &grads, lr)?;
            log::debug!("stage1 step {step}/{total} loss {value:.6}");
            trace.push(StepRecord {
                step,
                epoch,
                lr,
                loss: value,
                ce: Some(value),
                dpo: None,
                grad_norm,
            });
            step += 1;
        }
    }
    let epoch_mean_loss = epoch_means(&trace, c.epochs);
    note_monotonicity("stage1", &epoch_mean_loss);
    Ok(TrainReport {
        stage: "stage1".into(),
        seed: config.seed,
        config: config.clone(),
        n_examples: examples.len(),
        total_steps: total,
        loss_trace: trace,
        epoch_mean_loss,
        checkpoint: finish(stack, checkpoint)?,
        wall_time_secs: start.elapsed().as_secs_f64(),
        base_hash: stack.base_hash(),
        skipped: false,
    })
}

/// Freezes φ, attaches a fresh φ′ and fits it on the conflict items with
/// `γ·CE + α·DPO`. Each mini-batch holds the CE target and the preference
/// pair of the same items. With no conflict items the stage is skipped.
pub fn train_stage2(
    stack: &mut AdapterStack,
    vocab: &Vocab,
    pairs: &[DpoPair],
    targets_conflict: &[StageTarget],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    let start = Instant::now();
    let c = &config.stage2;
    if stack.adapter(Slot::Stage1).is_none() {
        return Err(Error::Argument("stage 2 needs a trained stage-1 adapter".into()));
    }
    if pairs.len() != targets_conflict.len()
        || pairs.iter().zip(targets_conflict).any(|(p, t)| p.item_id != t.item_id)
    {
        return Err(Error::Argument("stage-2 pairs and targets must cover the same items in order".into()));
    }
    stack.set_active(Slot::Stage1, true);
    stack.attach_fresh(Slot::Stage2, &config.stage2_lora(), config.seed.wrapping_add(1))?;

    let mut report = TrainReport {
        stage: "stage2".into(),
        seed: config.seed,
        config: config.clone(),
        n_examples: pairs.len(),
        total_steps: 0,
        loss_trace: Vec::new(),
        epoch_mean_loss: Vec::new(),
        checkpoint: None,
        wall_time_secs: 0.0,
        base_hash: stack.base_hash(),
        skipped: false,
    };
    if pairs.is_empty() {
        log::info!("stage 2 skipped: the conflict set is empty");
        report.skipped = true;
        report.checkpoint = finish(stack, checkpoint)?;
        return Ok(report);
    }

    let ce_examples: Vec<Example> = targets_conflict.iter().map(|t| encode_target(vocab, t)).collect();
    let dpo_examples: Vec<DpoExample> = pairs.iter().map(|p| encode_pair(vocab, p)).collect();
    // π_ref never changes during Stage 2, so its log-probabilities are
    // computed once.
    let refs = reference_logprobs(&stack.reference(), &dpo_examples)?;

    let total = total_steps(pairs.len(), c.batch_size, c.epochs);
    let mut opt = AdamW::new(config.optimizer.clone(), stack.adapter(Slot::Stage2).map_or(0, |a| a.n_params()));
    let mut step = 0;
    for epoch in 0..c.epochs {
        let order = epoch_order(pairs.len(), config.seed, 2, epoch);
        for chunk in order.chunks(c.batch_size) {
            let ce_batch: Vec<Example> = chunk.iter().map(|&i| ce_examples[i].clone()).collect();
            let dpo_batch: Vec<DpoExample> = chunk.iter().map(|&i| dpo_examples[i].clone()).collect();
            let ref_batch: Vec<(f64, f64)> = chunk.iter().map(|&i| refs[i]).collect();

            let ce = (c.gamma != 0.0).then(|| ce_loss(&ce_batch, stack, Slot::Stage2)).transpose()?;
            let dpo = (c.alpha != 0.0)
                .then(|| dpo_loss_cached(&dpo_batch, stack, &ref_batch, c.beta))
                .transpose()?;
            let zero = || -> Result<LossValue> {
                Ok(LossValue {
                    value: 0.0,
                    grads: AdapterGrads::zeros_like(stack, Slot::Stage2)?,
                })
            };
            let combined = total_loss(
                &ce.clone().map_or_else(zero, Ok)?,
                &dpo.clone().map_or_else(zero, Ok)?,
                c.gamma,
                c.alpha,
            )?;
            let mut grads = combined.grads;
            let grad_norm = clip(&mut grads, config.grad_clip);
            let lr = schedule_lr(config.schedule, step, total, c.lr, c.warmup_ratio)?;
            apply(stack, Slot::Stage2, &mut opt, &grads, lr)?;
            log::debug!("stage2 step {step}/{total} loss {:.6}", combined.value);
            report.loss_trace.push(StepRecord {
                step,
                epoch,
                lr,
                loss: combined.value,
                ce: ce.map(|l| l.value),
                dpo: dpo.map(|l| l.value),
                grad_norm,
            });
            step += 1;
        }
    }
    report.total_steps = total;
    report.epoch_mean_loss = epoch_means(&report.loss_trace, c.epochs);
    note_monotonicity("stage2", &report.epoch_mean_loss);
    report.checkpoint = finish(stack, checkpoint)?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}
