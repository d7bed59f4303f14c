use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MfccNorm, PredictorConfig, PredictorModel};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::numerics::params::accumulate;
use crate::numerics::train::epoch_batches;
use crate::numerics::params::Bound;
use crate::numerics::{derive_seed, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::pose::{GestureSequence, StyleClip};
use crate::quantizer::VqVaeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-4,
        }
    }
}

impl PredictorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("predictor batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("predictor learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One training example: target motion, its audio, a reference clip of the
/// target style and the speaker tag.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub audio: AudioClip,
    pub gesture: GestureSequence,
    pub style: StyleClip,
    pub identity: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorEpochLog {
    pub epoch: usize,
    /// Mean over samples of the summed hand and body cross-entropy.
    pub loss: f64,
    pub perplexity_hand: f64,
    pub perplexity_body: f64,
    /// Teacher-forced argmax accuracy.
    pub accuracy_hand: f64,
    pub accuracy_body: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainLog {
    pub epochs: Vec<PredictorEpochLog>,
}

/// A training pair reduced to the model's inputs and targets.
#[derive(Debug, Clone)]
pub struct TeacherForcedInput {
    pub hand: Vec<usize>,
    pub body: Vec<usize>,
    prev_h: Vec<usize>,
    prev_b: Vec<usize>,
    /// Normalized per-step MFCC.
    pub mfcc: Tensor,
    pub audio: AudioClip,
    pub style: StyleClip,
    pub identity: usize,
}

/// Tape handles of one teacher-forced evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TeacherForcedVars {
    /// `ce_hand + ce_body`
    pub loss: Var,
    pub ce_hand: Var,
    pub ce_body: Var,
    pub logits_hand: Var,
    pub logits_body: Var,
}

impl PredictorModel {
    pub fn teacher_forced_input(&self, vq: &VqVaeModel, pair: &TrainingPair) -> Result<TeacherForcedInput> {
        if pair.gesture.fps() != self.fps {
            return Err(Error::invalid(format!("pair at {} fps, model at {}", pair.gesture.fps(), self.fps)));
        }
        let (h, b) = vq.tokenize(&pair.gesture)?;
        let raw = super::mfcc_steps(&pair.audio, self.fps, h.len(), self.downsample)?;
        Ok(TeacherForcedInput {
            prev_h: self.shifted(&h.indices, self.start_hand(), self.codebook_hand)?,
            prev_b: self.shifted(&b.indices, self.start_body(), self.codebook_body)?,
            hand: h.indices,
            body: b.indices,
            mfcc: self.mfcc_norm.apply(&raw),
            audio: pair.audio.clone(),
            style: pair.style.clone(),
            identity: self.identity_index(&pair.identity)?,
        })
    }

    /// Summed hand and body cross-entropy with ground-truth history, through
    /// the style encoder, fusion, speech encoder and trunk.
    pub fn teacher_forced_loss(&self, t: &mut Tape, p: &Bound, x: &TeacherForcedInput) -> Result<TeacherForcedVars> {
        let code = self.style.forward_clip(t, p, &x.style)?.code;
        let m = t.constant(x.mfcc.clone());
        let fused = self.fuse_vars(t, p, m, code)?;
        let audio = self.audio_vars(t, p, &x.audio, &x.mfcc, x.hand.len())?;
        let (lh, lb) = self.trunk_vars(t, p, &x.prev_h, &x.prev_b, audio, fused, x.identity)?;
        let eh = t.cross_entropy(lh, &x.hand)?;
        let eb = t.cross_entropy(lb, &x.body)?;
        Ok(TeacherForcedVars {
            loss: t.add(eh, eb)?,
            ce_hand: eh,
            ce_body: eb,
            logits_hand: lh,
            logits_body: lb,
        })
    }
}

fn argmax_hits(logits: &Tensor, targets: &[usize]) -> usize {
    (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == targets[r]
        })
        .count()
}

/// Teacher-forced training of the predictor together with its style and
/// speech encoders. Deterministic per seed.
pub fn train_predictor(
    pairs: &[TrainingPair],
    vq: &VqVaeModel,
    config: &PredictorConfig,
    train: &PredictorTrainConfig,
    seed: u64,
) -> Result<(PredictorModel, PredictorTrainLog)> {
    train.validate()?;
    let first = pairs.first().ok_or_else(|| Error::invalid("predictor training needs at least one pair"))?;
    let fps = first.gesture.fps();
    let mut identities: Vec<String> = pairs.iter().map(|p| p.identity.clone()).collect();
    identities.sort();
    identities.dedup();
    let mut model = PredictorModel::new(config.clone(), vq, identities, fps, derive_seed(seed, 31))?;

    let mut raw = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.gesture.fps() != fps {
            return Err(Error::invalid("training pairs mix frame rates"));
        }
        let steps = vq.tokenize(&p.gesture)?.0.len();
        raw.push(super::mfcc_steps(&p.audio, fps, steps, model.downsample)?);
    }
    model.mfcc_norm = MfccNorm::fit(&raw);
    let data: Vec<TeacherForcedInput> = pairs
        .iter()
        .map(|p| model.teacher_forced_input(vq, p))
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: train.learning_rate,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 32));
    let mut log = PredictorTrainLog::default();
    for epoch in 1..=train.epochs {
        let (mut loss, mut ce_h, mut ce_b) = (0.0, 0.0, 0.0);
        let (mut hit_h, mut hit_b, mut total) = (0, 0, 0);
        for batch in epoch_batches(data.len(), train.batch_size, &mut rng) {
            let mut grads = Vec::new();
            for &i in &batch {
                let d = &data[i];
                let mut t = Tape::new();
                let p = model.store.bind(&mut t, true);
                let v = model.teacher_forced_loss(&mut t, &p, d)?;
                let (lh, lb, l) = (v.logits_hand, v.logits_body, v.loss);
                let (eh, eb) = (v.ce_hand, v.ce_body);
                let (vh, vb) = (t.value(eh).item(), t.value(eb).item());
                if !(vh.is_finite() && vb.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        details: format!("hand cross-entropy {vh}, body cross-entropy {vb}"),
                    });
                }
                ce_h += vh;
                ce_b += vb;
                loss += vh + vb;
                hit_h += argmax_hits(t.value(lh), &d.hand);
                hit_b += argmax_hits(t.value(lb), &d.body);
                total += d.hand.len();
                let g = t.backward(l)?;
                accumulate(&mut grads, model.store.collect_grads(&g, &p));
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    details: "non-finite gradient".into(),
                });
            }
            adam.step(&mut model.store, &grads);
        }
        let n = data.len() as f64;
        let entry = PredictorEpochLog {
            epoch,
            loss: loss / n,
            perplexity_hand: (ce_h / n).exp(),
            perplexity_body: (ce_b / n).exp(),
            accuracy_hand: hit_h as f64 / total as f64,
            accuracy_body: hit_b as f64 / total as f64,
        };
        log::debug!(
            "predictor epoch {epoch}: loss {:.5} ppl {:.3}/{:.3} acc {:.3}/{:.3}",
            entry.loss,
            entry.perplexity_hand,
            entry.perplexity_body,
            entry.accuracy_hand,
            entry.accuracy_body
        );
        log.epochs.push(entry);
    }
    Ok((model, log))
}
