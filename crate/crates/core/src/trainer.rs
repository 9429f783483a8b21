//! Training loop: shuffled contrastive batches, AdamW with warmup plus
//! cosine decay, validation on the filtered set, early stopping, and run
//! directory output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use numcore::{AdamW, AdamWConfig, Binding, LrSchedule, Tape, TensorError, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::Vocabulary;
use crate::encoders::{Mode, Model, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::objectives::{self, ContrastiveConfig, JointConfig};
use crate::pairing::{jitter, sample_frame, EpisodePair, FeatureStore, FrameId};
use crate::seed::{self, streams};
use crate::simfilter::ValPair;

pub const IMPROVEMENT_EPS: f64 = 1e-6;
pub const DEFAULT_PATIENCE: usize = 10;
pub const DEFAULT_VAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub batch_size: usize,
    pub val_batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub vision_dropout: f64,
    pub language_dropout: f64,
    pub temperature: f64,
    pub lambda_c: f64,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    /// Gaussian noise added to training frame features; 0 disables it.
    pub frame_jitter: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Per-variant defaults: the embedding model trains with lr 1e-4 and
    /// batch 16, the transformer models with lr 1e-5 and batch 64.
    pub fn for_variant(variant: Variant) -> Self {
        let (batch_size, peak_lr) = match variant {
            Variant::Cvcl => (16, 1e-4),
            Variant::CvclT | Variant::CvclTLm => (64, 1e-5),
        };
        Self {
            variant,
            batch_size,
            val_batch_size: DEFAULT_VAL_BATCH,
            peak_lr,
            warmup_steps: 5000,
            max_epochs: 100,
            patience: DEFAULT_PATIENCE,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            vision_dropout: 0.1,
            language_dropout: 0.1,
            temperature: objectives::DEFAULT_TEMPERATURE,
            lambda_c: objectives::DEFAULT_LAMBDA_C,
            embed_dim: 512,
            n_heads: 8,
            n_layers: 2,
            ffn_dim: 2048,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            frame_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.val_batch_size < 2 {
            return bad(format!("val_batch_size {} must be at least 2", self.val_batch_size));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.frame_jitter >= 0.0 && self.frame_jitter.is_finite()) {
            return bad(format!("frame_jitter {} must be non-negative", self.frame_jitter));
        }
        self.contrastive().validate()?;
        self.joint().validate()?;
        Ok(())
    }

    pub fn model_config(&self, feature_dim: usize, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            feature_dim,
            embed_dim: self.embed_dim,
            vocab_size,
            max_len: self.max_len,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            ffn_dim: self.ffn_dim,
            vision_dropout: self.vision_dropout,
            language_dropout: self.language_dropout,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            normalize_embeddings: true,
        }
    }

    pub fn joint(&self) -> JointConfig {
        JointConfig {
            lambda_c: self.lambda_c,
        }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub variant: Variant,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss before the first update.
    pub initial_val_loss: f64,
    pub steps_per_epoch: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub stopped_early: bool,
    /// `lr_at(step)` for every optimizer step taken, in order.
    #[serde(skip)]
    pub lr_trace: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Training inputs. Frame features are borrowed read-only.
pub struct TrainData<'a> {
    pub store: &'a FeatureStore,
    pub train: &'a [EpisodePair],
    pub val: &'a [ValPair],
    pub vocab: &'a Vocabulary,
}

/// True when the last `patience` entries of `history` brought no
/// improvement larger than [`IMPROVEMENT_EPS`] over the best value before
/// them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut since = 0;
    for &v in history {
        if v < best - IMPROVEMENT_EPS {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    since >= patience
}

/// Index of the first minimum.
pub fn best_index(history: &[f64]) -> Option<usize> {
    history
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, b)) if v >= b => acc,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    cfg: &TrainConfig,
    frames: &[&[f64]],
    seqs: &[Vec<u32>],
    mode: &mut Mode,
) -> Result<(Var, Binding)> {
    let b = model.bind(tape, mode.is_train())?;
    let loss = model_loss(tape, model, &b, cfg, frames, seqs, mode)?;
    Ok((loss, b))
}

/// Training objective of one batch with parameters bound as `b`: the
/// contrastive loss, plus the LM term for the joint variant.
pub fn model_loss(
    tape: &mut Tape,
    model: &Model,
    b: &Binding,
    cfg: &TrainConfig,
    frames: &[&[f64]],
    seqs: &[Vec<u32>],
    mode: &mut Mode,
) -> Result<Var> {
    let out = model.forward(tape, b, frames, seqs, mode)?;
    let c = objectives::contrastive_loss(tape, out.frames, out.utterances, &cfg.contrastive())?;
    let loss = match out.lm {
        Some((logits, targets)) => {
            let lm = objectives::lm_loss(tape, logits, &targets)?;
            objectives::joint_loss(tape, lm, c.loss, &cfg.joint())?
        }
        None => c.loss,
    };
    Ok(loss)
}

/// Finite-difference check of [`model_loss`] with respect to every model
/// parameter. Dropout uses the same mask on every evaluation.
pub fn loss_grad_check(
    model: &Model,
    cfg: &TrainConfig,
    frames: &[&[f64]],
    seqs: &[Vec<u32>],
    dropout_seed: Option<u64>,
    epsilon: f64,
) -> Result<f64> {
    let points: Vec<numcore::Tensor> = model.params().tensors().cloned().collect();
    let err = std::cell::RefCell::new(None);
    let r = numcore::grad_check_many(
        |tape, vars| {
            let b = Binding::from_vars(vars.to_vec());
            let mut rng = dropout_seed.map(|s| seed::rng(s, streams::DROPOUT));
            let mut mode = match rng.as_mut() {
                Some(r) => Mode::Train(r),
                None => Mode::Eval,
            };
            model_loss(tape, model, &b, cfg, frames, seqs, &mut mode).map_err(|e| {
                let msg = e.to_string();
                *err.borrow_mut() = Some(e);
                TensorError::Invalid {
                    op: "model_loss",
                    msg,
                }
            })
        },
        &points,
        epsilon,
    );
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    Ok(r?)
}

fn val_batches(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    // A trailing single pair carries no contrastive signal; fold it into the
    // previous batch.
    if out.len() > 1 && out.last().unwrap().len() == 1 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Eval-mode loss on the validation pairs, each scored on its fixed frame.
/// The result is the mean of per-batch losses.
pub fn validate(model: &Model, store: &FeatureStore, val: &[ValPair], cfg: &TrainConfig) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Data(
            "filtered validation set is empty; lower the similarity threshold".into(),
        ));
    }
    let mut tape = Tape::new();
    let mut total = 0.0;
    let batches = val_batches(val.len(), cfg.val_batch_size);
    for r in &batches {
        let pairs = &val[r.clone()];
        let frames: Vec<&[f64]> = pairs.iter().map(|p| store.get(p.frame).features.as_slice()).collect();
        let seqs: Vec<Vec<u32>> = pairs.iter().map(|p| p.pair.tokens.clone()).collect();
        tape.reset();
        let (loss, _) = batch_loss(&mut tape, model, cfg, &frames, &seqs, &mut Mode::Eval)?;
        total += tape.value(loss).item();
    }
    Ok(total / batches.len() as f64)
}

fn dump_batch(store: &FeatureStore, pairs: &[&EpisodePair], frames: &[FrameId]) -> String {
    let mut s = String::new();
    for (p, f) in pairs.iter().zip(frames) {
        let _ = writeln!(
            s,
            "{}",
            serde_json::json!({
                "video_id": p.video_id,
                "start_s": p.start_s,
                "text": p.text,
                "tokens": p.tokens,
                "frame": store.get(*f).key(),
            })
        );
    }
    s
}

/// Trains a fresh model and returns it with the best-validation parameters
/// restored.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    if data.train.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} training pairs cannot fill one batch of {}",
            data.train.len(),
            cfg.batch_size
        )));
    }
    let vocab_size = data.vocab.len();
    for p in data.train.iter().chain(data.val.iter().map(|v| &v.pair)) {
        if let Some(t) = p.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Data(format!(
                "token id {t} in utterance {:?} exceeds vocabulary of {vocab_size}",
                p.text
            )));
        }
    }
    let mcfg = cfg.model_config(data.store.dim(), vocab_size);
    let mut model = Model::init(mcfg, cfg.seed)?;

    let steps_per_epoch = data.train.len() / cfg.batch_size;
    let total_steps = (cfg.max_epochs * steps_per_epoch) as u64;
    let warmup = if cfg.warmup_steps > total_steps {
        log::warn!(
            "warmup_steps {} exceeds the {} total steps; warming up over the whole run",
            cfg.warmup_steps,
            total_steps
        );
        total_steps
    } else {
        cfg.warmup_steps
    };
    let schedule = LrSchedule::new(cfg.peak_lr, warmup, total_steps)?;
    let mut opt = AdamW::new(cfg.optimizer(), model.params());

    let mut shuffle_rng = seed::rng(cfg.seed, streams::SHUFFLE);
    let mut frame_rng = seed::rng(cfg.seed, streams::FRAMES);
    let mut dropout_rng = seed::rng(cfg.seed, streams::DROPOUT);
    let mut jitter_rng = seed::rng(cfg.seed, streams::JITTER);

    let initial_val_loss = validate(&model, data.store, data.val, cfg)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut tape = Tape::new();
    let mut step: u64 = 0;
    let mut epochs = Vec::new();
    let mut val_history = Vec::new();
    let mut lr_trace = Vec::with_capacity(total_steps as usize);
    let mut best = model.params().clone();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            let pairs: Vec<&EpisodePair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let ids: Vec<FrameId> = pairs.iter().map(|p| sample_frame(p, &mut frame_rng)).collect();
            let jittered: Vec<Vec<f64>> = if cfg.frame_jitter > 0.0 {
                ids.iter()
                    .map(|&f| jitter(&data.store.get(f).features, cfg.frame_jitter, &mut jitter_rng))
                    .collect()
            } else {
                Vec::new()
            };
            let frames: Vec<&[f64]> = if jittered.is_empty() {
                ids.iter().map(|&f| data.store.get(f).features.as_slice()).collect()
            } else {
                jittered.iter().map(Vec::as_slice).collect()
            };
            let seqs: Vec<Vec<u32>> = pairs.iter().map(|p| p.tokens.clone()).collect();

            tape.reset();
            let non_finite = |e: Error| match e {
                Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
                    epoch,
                    step,
                    dump: dump_batch(data.store, &pairs, &ids),
                },
                other => other,
            };
            let (loss, binding) = batch_loss(&mut tape, &model, cfg, &frames, &seqs, &mut Mode::Train(&mut dropout_rng))
                .map_err(non_finite)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss).map_err(|e| non_finite(e.into()))?;
            let binding_grads = binding.grads(&grads);
            if binding_grads.iter().any(|g| !g.is_finite()) {
                return Err(non_finite(Error::Tensor(TensorError::NonFinite { op: "backward" })));
            }
            lr = schedule.lr_at(step);
            opt.step(model.params_mut(), &binding_grads, lr)?;
            lr_trace.push(lr);
            loss_sum += value;
            step += 1;
        }
        let train_loss = loss_sum / steps_per_epoch as f64;
        let val_loss = validate(&model, data.store, data.val, cfg)?;
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:.3e}");
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        val_history.push(val_loss);
        if best_index(&val_history) == Some(val_history.len() - 1) {
            best = model.params().clone();
        }
        if epoch < cfg.max_epochs && early_stop(&val_history, cfg.patience) {
            stopped_early = true;
            break;
        }
    }

    let bi = best_index(&val_history).expect("at least one epoch");
    *model.params_mut() = best;
    let record = RunRecord {
        seed: cfg.seed,
        variant: cfg.variant,
        best_epoch: epochs[bi].epoch,
        best_val_loss: val_history[bi],
        initial_val_loss,
        epochs,
        steps_per_epoch,
        total_steps,
        warmup_steps: warmup,
        stopped_early,
        lr_trace,
        checkpoint: None,
    };
    Ok((model, record))
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.glck";
pub const REPORT_FILE: &str = "report.json";

/// Per-epoch metrics as CSV. Floats use Rust's shortest round-trip
/// formatting, so identical runs give identical bytes.
pub fn metrics_csv(record: &RunRecord) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for m in &record.epochs {
        let _ = writeln!(s, "{},{},{},{}", m.epoch, m.train_loss, m.val_loss, m.lr);
    }
    s
}

/// Writes config snapshot, metrics, best checkpoint and report into `dir`,
/// which must already exist.
pub fn write_run_dir(dir: &Path, cfg: &TrainConfig, model: &Model, record: &mut RunRecord) -> Result<()> {
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(CONFIG_FILE, &serde_json::to_string_pretty(cfg).map_err(|e| Error::Format(e.to_string()))?)?;
    write(METRICS_FILE, &metrics_csv(record))?;
    let ck = dir.join(CHECKPOINT_FILE);
    checkpoint::save(model, &ck)?;
    record.checkpoint = Some(PathBuf::from(CHECKPOINT_FILE));
    write(REPORT_FILE, &serde_json::to_string_pretty(record).map_err(|e| Error::Format(e.to_string()))?)?;
    Ok(())
}
