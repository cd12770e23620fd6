//! AdamW training with linear warmup, cosine decay, global-norm clipping,
//! pretraining on packed byte corpora and masked-span passkey fine-tuning.
//!
//! Every batch is a pure function of (config, seed, step), so a resumed run
//! consumes exactly the data the uninterrupted run would have.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::{self, CorpusSpec, PackedCorpus};
use crate::error::{Error, Result};
use crate::model::{self, DecoderWeights, ModelConfig};
use crate::seeds;
use crate::telemetry::{AlphaWriter, BalanceSnapshot, StepLog, TelemetryWriter};
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= self.floor_lr && self.floor_lr >= 0.0) {
            return Err(Error::Config(format!(
                "need base_lr ({}) >= floor_lr ({}) >= 0",
                self.base_lr, self.floor_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup ({}) exceeds total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Learning rate for 1-based optimizer step `step`: linear 0 -> base over
    /// the warmup, then cosine decay to the floor. Boundary values are exact,
    /// not limits of the interpolants.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            if step == self.warmup_steps {
                return self.base_lr;
            }
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.floor_lr;
        }
        let progress =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.floor_lr
            + (self.base_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scale gradients so the global L2 norm is at most `max_norm`; returns the
/// norm before clipping (that is what belongs in telemetry).
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g.data() {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = S::from_f64(v.to_f64() * scale);
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, clip_norm: 1.0 }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm > 0.0;
        if !ok {
            return Err(Error::Config(format!("bad optimizer hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

/// First/second moment buffers mirroring [`DecoderWeights::named`] order,
/// plus the number of optimizer steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn zeros(weights: &DecoderWeights<S>) -> Self {
        let zeros: Vec<Tensor<S>> =
            weights.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Bias-corrected Adam plus decoupled weight decay:
    /// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    /// Elementwise arithmetic runs in f64 regardless of storage precision.
    pub fn adamw_step(
        &mut self,
        weights: &mut DecoderWeights<S>,
        grads: &[Tensor<S>],
        lr: f64,
        hp: &AdamWParams,
    ) -> Result<()> {
        let mut named = weights.named_mut();
        if grads.len() != named.len() {
            return Err(Error::InvalidArgument {
                op: "adamw_step",
                msg: format!("{} grads for {} parameters", grads.len(), named.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (i, (name, theta)) in named.iter_mut().enumerate() {
            if grads[i].shape() != theta.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: theta.shape().to_vec(),
                    rhs: grads[i].shape().to_vec(),
                });
            }
            let _ = name;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let th = theta.data_mut();
            let g = grads[i].data();
            for j in 0..g.len() {
                let gj = g[j].to_f64();
                let mj = hp.beta1 * m[j].to_f64() + (1.0 - hp.beta1) * gj;
                let vj = hp.beta2 * v[j].to_f64() + (1.0 - hp.beta2) * gj * gj;
                m[j] = S::from_f64(mj);
                v[j] = S::from_f64(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
                let tj = th[j].to_f64();
                th[j] = S::from_f64(tj - lr * (update + hp.weight_decay * tj));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Pretrain,
    Finetune,
}

impl TaskKind {
    /// The serialized form; also what checkpoint metadata stores.
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Pretrain => "pretrain",
            TaskKind::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    pub task: TaskKind,
    pub steps: u64,
    pub batch_size: usize,
    pub sequence_length: usize,
    /// Passkey fine-tuning draws context lengths uniformly from this list.
    pub finetune_contexts: Vec<usize>,
    pub key_digits: usize,
    pub telemetry_every: u64,
    pub alpha_every: u64,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub base_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
}

impl ScheduleParams {
    pub fn with_total(&self, total_steps: u64) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            floor_lr: self.floor_lr,
            warmup_steps: self.warmup_steps,
            total_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub optimizer: AdamWParams,
    pub schedule: ScheduleParams,
    pub data: CorpusSpec,
}

/// The no-memory comparator attends over its whole input: one segment
/// covering the longest sequence we ever evaluate. A segmented model without
/// memory has no mechanism at all for moving information between segments,
/// so it would fail retrieval by construction rather than by weakness.
pub const BASELINE_ATTENTION_SPAN: usize = 4096;

impl RunConfig {
    /// 2,000 steps of seq 256 x batch 8 next-byte training on the synthetic
    /// corpus, memory-augmented attention enabled.
    pub fn desk_pretrain() -> Self {
        RunConfig {
            run: RunSection {
                seed: 42,
                task: TaskKind::Pretrain,
                steps: 2000,
                batch_size: 8,
                sequence_length: 256,
                finetune_contexts: vec![64, 128, 256],
                key_digits: data::DEFAULT_KEY_DIGITS,
                telemetry_every: 1,
                alpha_every: 100,
                checkpoint_every: 500,
            },
            model: ModelConfig::desk(),
            optimizer: AdamWParams::default(),
            schedule: ScheduleParams { base_lr: 6e-5, floor_lr: 6e-6, warmup_steps: 500 },
            data: CorpusSpec::desk(),
        }
    }

    /// Same run with memory disabled. The baseline reaches the same loss
    /// basin faster at a higher rate, and needs a full-width attention span
    /// to be a meaningful retrieval comparator.
    pub fn desk_baseline_pretrain() -> Self {
        let mut cfg = Self::desk_pretrain();
        cfg.model.attention.memory_enabled = false;
        cfg.model.attention.segment_length = BASELINE_ATTENTION_SPAN;
        cfg.schedule.base_lr = 1.2e-4;
        cfg
    }

    /// 500 steps of masked-answer passkey training at contexts up to the
    /// pretraining sequence length.
    pub fn desk_finetune() -> Self {
        let mut cfg = Self::desk_pretrain();
        cfg.run.task = TaskKind::Finetune;
        cfg.run.steps = 500;
        cfg.run.alpha_every = 100;
        cfg.run.checkpoint_every = 500;
        cfg.schedule = ScheduleParams { base_lr: 7.5e-5, floor_lr: 3e-6, warmup_steps: 50 };
        cfg
    }

    pub fn desk_baseline_finetune() -> Self {
        let mut cfg = Self::desk_finetune();
        cfg.model.attention.memory_enabled = false;
        cfg.model.attention.segment_length = BASELINE_ATTENTION_SPAN;
        cfg
    }

    /// The reference recipe: 30k steps of seq 8192 x batch 4 (~983M tokens).
    /// Expressible for parameter counts and budget math, not for running here.
    pub fn reference_pretrain() -> Self {
        let mut cfg = Self::desk_pretrain();
        cfg.model = ModelConfig::reference_300m();
        cfg.run.steps = 30_000;
        cfg.run.sequence_length = 8192;
        cfg.run.batch_size = 4;
        cfg
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.run.sequence_length * self.run.batch_size) as u64
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens_per_step() * self.run.steps
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule.with_total(self.run.steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule().validate()?;
        self.data.validate()?;
        if self.run.batch_size == 0 || self.run.sequence_length == 0 {
            return Err(Error::Config(format!(
                "batch_size ({}) and sequence_length ({}) must be positive",
                self.run.batch_size, self.run.sequence_length
            )));
        }
        if self.run.telemetry_every == 0 || self.run.alpha_every == 0 || self.run.checkpoint_every == 0
        {
            return Err(Error::Config("logging cadences must be at least 1".into()));
        }
        if self.run.task == TaskKind::Finetune {
            if self.run.finetune_contexts.is_empty() {
                return Err(Error::Config("finetune_contexts must not be empty".into()));
            }
            if self.run.key_digits == 0 {
                return Err(Error::Config("key_digits must be at least 1".into()));
            }
        }
        Ok(())
    }
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut std::collections::BTreeMap<String, String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, val) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, val, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Dotted paths of every leaf field where the two configs disagree, sorted.
/// Guards experiment pairings: a comparison is only as honest as the list of
/// knobs that differ.
pub fn config_diff_audit(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let mut fa = std::collections::BTreeMap::new();
    let mut fb = std::collections::BTreeMap::new();
    flatten_json("", &serde_json::to_value(a).expect("config serializes"), &mut fa);
    flatten_json("", &serde_json::to_value(b).expect("config serializes"), &mut fb);
    let keys: std::collections::BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    keys.into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Mean batch loss per step executed in this call, in order.
    pub losses: Vec<f64>,
    pub final_step: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// Weights, both moment buffers and the step counter in one file.
pub fn save_train_state<S: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    weights: &DecoderWeights<S>,
    opt: &OptimizerState<S>,
    task: TaskKind,
) -> Result<()> {
    let mut tensors = weights.named();
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        tensors.push((format!("opt.m.{name}"), &opt.m[i]));
        tensors.push((format!("opt.v.{name}"), &opt.v[i]));
    }
    let meta = json!({
        "step": opt.step,
        "task": task.name(),
    });
    checkpoint::save_tensors(path, cfg, &meta, &tensors)
}

pub fn load_train_state<S: Scalar>(
    path: &Path,
) -> Result<(ModelConfig, DecoderWeights<S>, OptimizerState<S>)> {
    let (cfg, meta, tensors) = checkpoint::load_tensors::<S>(path)?;
    let mut map: std::collections::BTreeMap<String, Tensor<S>> = tensors.into_iter().collect();
    let weights = checkpoint::weights_from_named(&cfg, &mut map)?;
    let step = meta
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Checkpoint("meta is missing the step counter".into()))?;
    let mut opt = OptimizerState::zeros(&weights);
    opt.step = step;
    for (i, (name, slot)) in weights.named().iter().enumerate() {
        for (prefix, buf) in [("opt.m", &mut opt.m), ("opt.v", &mut opt.v)] {
            let key = format!("{prefix}.{name}");
            let t = map
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "optimizer tensor {key} has shape {:?}, parameter is {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            buf[i] = t;
        }
    }
    if !map.is_empty() {
        let extra: Vec<&String> = map.keys().collect();
        return Err(Error::Checkpoint(format!("unexpected tensors in checkpoint: {extra:?}")));
    }
    Ok((cfg, weights, opt))
}

/// One training sample: token inputs, next-token targets, optional loss mask.
type Example = (Vec<usize>, Vec<usize>, Option<Vec<bool>>);

enum DataSource {
    Packed(PackedCorpus),
    Passkey,
}

impl DataSource {
    fn example(&self, cfg: &RunConfig, index: u64) -> Result<Example> {
        match self {
            DataSource::Packed(p) => {
                let (x, y) = p.window(index, cfg.run.sequence_length)?;
                Ok((x, y, None))
            }
            DataSource::Passkey => {
                let mut pick = seeds::rng(cfg.run.seed, seeds::stream::BATCH, index);
                let ctx = cfg.run.finetune_contexts[pick.gen_range(0..cfg.run.finetune_contexts.len())];
                let depth: f64 = pick.gen_range(0.0..=1.0);
                let sample_seed = seeds::mix(cfg.run.seed, seeds::stream::FINETUNE, index);
                let sample = data::make_passkey_sample(ctx, depth, cfg.run.key_digits, sample_seed)?;
                let (x, y, mask) = sample.training_triple();
                Ok((x, y, Some(mask)))
            }
        }
    }
}

/// How a run obtains its starting state.
#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    /// Seed-initialized weights, zero optimizer state, step 0.
    Fresh,
    /// Weights from a checkpoint, fresh optimizer and step counter; how
    /// fine-tuning begins from a pretrained model.
    FromWeights(&'a Path),
    /// Full train state from a checkpoint; continues an interrupted run.
    Resume(&'a Path),
}

/// Run (or continue) training until the configured step count. Writes
/// telemetry.csv and alpha.csv rows plus periodic checkpoints in `run_dir`.
pub fn train_loop(cfg: &RunConfig, run_dir: &Path, start: Start) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ckpt_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::create_dir_all(run_dir.join("results"))?;
    let mut telemetry = TelemetryWriter::open(&run_dir.join("telemetry.csv"))?;
    let mut alpha_log = AlphaWriter::open(&run_dir.join("alpha.csv"))?;

    let check_model = |ckpt_cfg: &ModelConfig| {
        if *ckpt_cfg != cfg.model {
            return Err(Error::Checkpoint(
                "checkpoint model config does not match the run config".into(),
            ));
        }
        Ok(())
    };
    let (mut weights, mut opt) = match start {
        Start::Resume(path) => {
            let (ckpt_cfg, w, o) = load_train_state::<f32>(path)?;
            check_model(&ckpt_cfg)?;
            (w, o)
        }
        Start::FromWeights(path) => {
            let (ckpt_cfg, w, _) = load_train_state::<f32>(path)?;
            check_model(&ckpt_cfg)?;
            let o = OptimizerState::zeros(&w);
            (w, o)
        }
        Start::Fresh => {
            let w = DecoderWeights::<f32>::init(&cfg.model, cfg.run.seed)?;
            let o = OptimizerState::zeros(&w);
            (w, o)
        }
    };

    let source = match cfg.run.task {
        TaskKind::Pretrain => {
            let docs = data::generate_corpus(&cfg.data, cfg.run.seed)?;
            DataSource::Packed(PackedCorpus::pack(&docs)?)
        }
        TaskKind::Finetune => DataSource::Passkey,
    };

    let schedule = cfg.schedule();
    let hp = cfg.optimizer;
    let mut outcome = TrainOutcome { losses: Vec::new(), final_step: opt.step, last_checkpoint: None };

    while opt.step < cfg.run.steps {
        let step_index = opt.step; // 0-based; becomes optimizer step step_index + 1
        let mut grads: Vec<Tensor<f32>> =
            weights.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut batch_loss = 0.0f64;
        for slot in 0..cfg.run.batch_size {
            let index = step_index * cfg.run.batch_size as u64 + slot as u64;
            let (inputs, targets, mask) = source.example(cfg, index)?;
            // Divergence is detected at the loss, so per-node finite checks
            // stay off in every build profile.
            let mut tape = Tape::with_finite_checks(false);
            let vars = model::DecoderVars::bind_params(&mut tape, &weights);
            let logits = model::forward_graph(&mut tape, &inputs, &vars, &cfg.model)?;
            let loss = tape.cross_entropy(logits, &targets, mask.as_deref())?;
            batch_loss += tape.value(loss).data()[0].to_f64();
            tape.backward(loss)?;
            for (g, sg) in grads.iter_mut().zip(model::collect_grads(&tape, &vars, &weights)) {
                let gd = g.data_mut();
                for (j, v) in sg.data().iter().enumerate() {
                    gd[j] += v;
                }
            }
        }
        let inv_b = 1.0 / cfg.run.batch_size as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= inv_b;
            }
        }
        let loss = batch_loss / cfg.run.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step_index + 1,
                msg: format!("non-finite loss {loss}"),
            });
        }

        let grad_norm = clip_global_norm(&mut grads, hp.clip_norm);
        let lr = schedule.lr_at(step_index + 1);
        opt.adamw_step(&mut weights, &grads, lr, &hp)?;
        outcome.losses.push(loss);
        outcome.final_step = opt.step;

        let step = opt.step;
        if step % cfg.run.telemetry_every == 0 || step == cfg.run.steps {
            telemetry.log_step(&StepLog { step, loss, grad_norm, lr })?;
        }
        if step % cfg.run.alpha_every == 0 || step == cfg.run.steps {
            alpha_log.log_snapshot(&BalanceSnapshot::from_gate_raws(step, &weights.gate_raws()))?;
        }
        if step % cfg.run.checkpoint_every == 0 || step == cfg.run.steps {
            let path = ckpt_dir.join(format!("step_{step}.ckpt"));
            save_train_state(&path, &cfg.model, &weights, &opt, cfg.run.task)?;
            let latest = ckpt_dir.join("latest.ckpt");
            std::fs::copy(&path, &latest)?;
            outcome.last_checkpoint = Some(path);
        }
    }
    if outcome.last_checkpoint.is_none() {
        // Zero remaining steps: still leave a loadable state behind.
        let path = ckpt_dir.join(format!("step_{}.ckpt", opt.step));
        save_train_state(&path, &cfg.model, &weights, &opt, cfg.run.task)?;
        std::fs::copy(&path, ckpt_dir.join("latest.ckpt"))?;
        outcome.last_checkpoint = Some(path);
    }
    Ok(outcome)
}
