//! Symmetric InfoNCE, next-word cross-entropy, and their weighted sum.

use numcore::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_LAMBDA_C: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub normalize_embeddings: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            normalize_embeddings: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    pub lambda_c: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lambda_c: DEFAULT_LAMBDA_C,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::Config(format!("lambda_c {} must be non-negative", self.lambda_c)));
        }
        Ok(())
    }
}

/// Loss node plus its two directional terms.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLoss {
    pub loss: Var,
    /// Each frame against all utterances in the batch.
    pub frame_term: Var,
    /// Each utterance against all frames in the batch.
    pub utterance_term: Var,
}

/// `½ L_frame + ½ L_utterance` for `N` matched rows.
pub fn contrastive_loss(tape: &mut Tape, frames: Var, utterances: Var, cfg: &ContrastiveConfig) -> Result<ContrastiveLoss> {
    cfg.validate()?;
    let (fs, us) = (tape.value(frames).shape().to_vec(), tape.value(utterances).shape().to_vec());
    if fs.len() != 2 || fs != us || fs[0] == 0 {
        return Err(Error::Data(format!(
            "contrastive loss needs two matching non-empty N x D matrices, got {fs:?} and {us:?}"
        )));
    }
    let (v, u) = if cfg.normalize_embeddings {
        (tape.l2_normalize(frames)?, tape.l2_normalize(utterances)?)
    } else {
        (frames, utterances)
    };
    let sim = tape.matmul_nt(v, u)?;
    let logits = tape.scale(sim, 1.0 / cfg.temperature)?;
    let diag: Vec<Option<usize>> = (0..fs[0]).map(Some).collect();
    let frame_term = tape.cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits)?;
    let utterance_term = tape.cross_entropy(logits_t, &diag)?;
    let sum = tape.add(frame_term, utterance_term)?;
    let loss = tape.scale(sum, 0.5)?;
    Ok(ContrastiveLoss {
        loss,
        frame_term,
        utterance_term,
    })
}

/// Mean next-token cross-entropy in nats over positions with a target.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    if targets.iter().all(Option::is_none) {
        return Err(Error::Data("language-model loss has no prediction positions".into()));
    }
    Ok(tape.cross_entropy(logits, targets)?)
}

/// `lm + λc · contrastive`.
pub fn joint_loss(tape: &mut Tape, lm: Var, contrastive: Var, cfg: &JointConfig) -> Result<Var> {
    cfg.validate()?;
    let c = tape.scale(contrastive, cfg.lambda_c)?;
    Ok(tape.add(lm, c)?)
}

/// Scalar form of [`joint_loss`].
pub fn joint_value(lm: f64, contrastive: f64, cfg: &JointConfig) -> f64 {
    lm + cfg.lambda_c * contrastive
}
