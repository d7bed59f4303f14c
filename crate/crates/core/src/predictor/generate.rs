use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PredictorModel, StepInputs};
use crate::audio::{compute_mfcc, AudioClip};
use crate::error::{Error, Result};
use crate::pose::{GestureSequence, StyleClip};
use crate::quantizer::{IndexSequence, VqVaeModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SamplingMode {
    Greedy,
    Temperature { temperature: f64 },
    TopK { k: usize, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    #[serde(flatten)]
    pub mode: SamplingMode,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        let temp = match self.mode {
            SamplingMode::Greedy => return Ok(()),
            SamplingMode::Temperature { temperature } => temperature,
            SamplingMode::TopK { k, temperature } => {
                if k == 0 {
                    return Err(Error::invalid("top-k sampling needs k >= 1"));
                }
                temperature
            }
        };
        if !(temp > 0.0 && temp.is_finite()) {
            return Err(Error::invalid(format!("temperature must be > 0, got {temp}")));
        }
        Ok(())
    }
}

/// Picks an index from `logits`; ties in greedy mode go to the lowest index.
pub(crate) fn sample_index<R: Rng + ?Sized>(logits: &[f64], mode: SamplingMode, rng: &mut R) -> usize {
    let argmax = |xs: &[f64]| (0..xs.len()).fold(0, |b, j| if xs[j] > xs[b] { j } else { b });
    let (k, temp) = match mode {
        SamplingMode::Greedy => return argmax(logits),
        SamplingMode::Temperature { temperature } => (logits.len(), temperature),
        SamplingMode::TopK { k, temperature } => (k.min(logits.len()), temperature),
    };
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    let top = logits[order[0]];
    let weights: Vec<f64> = order.iter().map(|&j| ((logits[j] - top) / temp).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (w, &j) in weights.iter().zip(&order) {
        if u < *w {
            return j;
        }
        u -= w;
    }
    *order.last().expect("non-empty logits")
}

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub audio: AudioClip,
    pub style: StyleClip,
    pub identity: String,
    pub sampling: SamplingConfig,
    /// Frames whose codebook indices fix the first steps.
    pub initial_pose: Option<GestureSequence>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub sequence: GestureSequence,
    pub hand: IndexSequence,
    pub body: IndexSequence,
}

/// Autoregressive synthesis of `N′·d` frames for the audio's `N′` steps.
pub fn generate(vq: &VqVaeModel, model: &PredictorModel, req: &GenerationRequest) -> Result<Generation> {
    let mut out = generate_many(vq, model, req, &[req.sampling.seed])?;
    Ok(out.pop().expect("one seed"))
}

/// One generation per seed, sharing the style and audio conditioning.
pub fn generate_many(vq: &VqVaeModel, model: &PredictorModel, req: &GenerationRequest, seeds: &[u64]) -> Result<Vec<Generation>> {
    model.check_lineage(vq)?;
    req.sampling.validate()?;
    let identity = model.identity_index(&req.identity)?;
    let frames = compute_mfcc(&req.audio, model.fps)?.frames();
    let steps = frames / model.downsample;
    if steps == 0 {
        return Err(Error::invalid(format!(
            "audio of {frames} frames is shorter than one step of {} frames",
            model.downsample
        )));
    }
    if steps > model.config.max_steps {
        return Err(Error::invalid(format!("{steps} steps exceed the maximum of {}", model.config.max_steps)));
    }
    let inputs = model.conditioning(&req.audio, &req.style, steps)?;
    let (seed_h, seed_b) = match &req.initial_pose {
        Some(seq) => {
            if seq.fps() != model.fps {
                return Err(Error::invalid(format!("initial pose at {} fps, model at {}", seq.fps(), model.fps)));
            }
            let (h, b) = vq.tokenize(seq)?;
            let k = h.len().min(steps);
            (h.indices[..k].to_vec(), b.indices[..k].to_vec())
        }
        None => (Vec::new(), Vec::new()),
    };
    seeds
        .iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut hand, mut body) = (seed_h.clone(), seed_b.clone());
            while hand.len() < steps {
                let (lh, lb) = model.predict_logits(&hand, &body, &inputs, identity)?;
                hand.push(sample_index(&lh, req.sampling.mode, &mut rng));
                body.push(sample_index(&lb, req.sampling.mode, &mut rng));
            }
            let hand = IndexSequence::new(hand, model.codebook_hand)?;
            let body = IndexSequence::new(body, model.codebook_body)?;
            let mut sequence = vq.detokenize(&hand, &body, steps * model.downsample, model.fps)?;
            sequence.meta.style = Some(req.style.style_id.clone());
            sequence.meta.speaker = Some(req.identity.clone());
            Ok(Generation { sequence, hand, body })
        })
        .collect()
}

impl PredictorModel {
    /// Generation from precomputed conditioning, mainly for tests.
    pub fn rollout(&self, inputs: &StepInputs, identity: usize, sampling: &SamplingConfig) -> Result<(Vec<usize>, Vec<usize>)> {
        sampling.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
        let (mut h, mut b) = (Vec::new(), Vec::new());
        while h.len() < inputs.steps() {
            let (lh, lb) = self.predict_logits(&h, &b, inputs, identity)?;
            h.push(sample_index(&lh, sampling.mode, &mut rng));
            b.push(sample_index(&lb, sampling.mode, &mut rng));
        }
        Ok((h, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_prefers_lowest_index_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_index(&[1.0, 3.0, 3.0], SamplingMode::Greedy, &mut rng), 1);
    }

    #[test]
    fn top1_is_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = [0.3, -1.0, 2.5, 2.4];
        for _ in 0..50 {
            let m = SamplingMode::TopK { k: 1, temperature: 3.0 };
            assert_eq!(sample_index(&l, m, &mut rng), 2);
        }
    }

    #[test]
    fn temperature_frequencies_follow_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = [0.0, (3.0f64).ln()];
        let n = 20_000;
        let ones = (0..n)
            .filter(|_| sample_index(&l, SamplingMode::Temperature { temperature: 1.0 }, &mut rng) == 1)
            .count();
        let f = ones as f64 / n as f64;
        assert!((f - 0.75).abs() < 0.015, "{f}");
    }

    #[test]
    fn rejects_bad_sampling() {
        let bad = SamplingConfig {
            mode: SamplingMode::Temperature { temperature: 0.0 },
            seed: 0,
        };
        assert!(bad.validate().is_err());
        let bad = SamplingConfig {
            mode: SamplingMode::TopK { k: 0, temperature: 1.0 },
            seed: 0,
        };
        assert!(bad.validate().is_err());
    }
}
