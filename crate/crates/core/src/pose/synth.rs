//! Synthetic multi-style pose data.
//!
//! Each style owns a rest posture, an oscillation frequency and amplitude and
//! a per-dimension weight/sign pattern. A sequence of that style adds a random
//! global phase, a small amplitude jitter and AR(1) low-pass noise. Signs are
//! shared within a style so the mean joint speed dips at every turning point,
//! giving regular kinematic beats at twice the style frequency.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GestureSequence, SequenceMeta, StyleClip, DEFAULT_FPS, JAW_DIM, POSE_DIM};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_sequences: usize,
    pub frames: usize,
    pub style_count: usize,
    /// Speaker tags cycle independently of style.
    pub speaker_count: usize,
    pub fps: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_sequences: 64,
            frames: 88,
            style_count: 4,
            speaker_count: 2,
            fps: DEFAULT_FPS,
            noise_std: 0.004,
        }
    }
}

struct StyleParams {
    offset: Vec<f64>,
    weight: Vec<f64>,
    phase: Vec<f64>,
    freq: f64,
    amplitude: f64,
}

fn style_params(seed: u64, s: usize) -> StyleParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1000 + s as u64));
    let offset = (0..POSE_DIM).map(|_| rng.random_range(-0.5..0.5)).collect();
    let weight = (0..POSE_DIM)
        .map(|j| {
            let w = rng.random_range(0.2..1.0);
            if j < JAW_DIM {
                0.2 * w
            } else {
                w
            }
        })
        .collect();
    let phase = (0..POSE_DIM)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 0.0 } else { PI };
            sign + rng.random_range(-0.1..0.1)
        })
        .collect();
    StyleParams {
        offset,
        weight,
        phase,
        freq: 0.8 + 0.45 * s as f64 + rng.random_range(-0.05..0.05),
        amplitude: 0.25 + 0.12 * (s % 3) as f64,
    }
}

pub fn generate(config: &SynthConfig) -> Result<Vec<StyleClip>> {
    if config.frames < 8 {
        return Err(Error::invalid(format!("synthetic sequences need N >= 8, got {}", config.frames)));
    }
    if config.style_count == 0 || config.speaker_count == 0 {
        return Err(Error::invalid("style_count and speaker_count must be >= 1"));
    }
    if !(config.fps > 0.0) || !(config.noise_std >= 0.0) {
        return Err(Error::invalid("fps must be > 0 and noise_std >= 0"));
    }
    let styles: Vec<StyleParams> = (0..config.style_count).map(|s| style_params(config.seed, s)).collect();
    let noise = Normal::new(0.0, config.noise_std.max(0.0)).expect("finite std");
    let mut clips = Vec::with_capacity(config.num_sequences);
    for k in 0..config.num_sequences {
        let s = k % config.style_count;
        let p = &styles[s];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, k as u64));
        let psi = rng.random_range(0.0..TAU);
        let amp = p.amplitude * rng.random_range(0.9..1.1);
        let mut ar = vec![0.0; POSE_DIM];
        let mut data = Vec::with_capacity(config.frames * POSE_DIM);
        for t in 0..config.frames {
            let arg = TAU * p.freq * t as f64 / config.fps + psi;
            for j in 0..POSE_DIM {
                ar[j] = 0.9 * ar[j] + noise.sample(&mut rng);
                data.push(p.offset[j] + amp * p.weight[j] * (arg + p.phase[j]).sin() + ar[j]);
            }
        }
        let meta = SequenceMeta {
            style: Some(format!("style{s}")),
            speaker: Some(format!("spk{}", (k / config.style_count) % config.speaker_count)),
        };
        let seq = GestureSequence::new(data, config.fps)?.with_meta(meta);
        clips.push(StyleClip::new(format!("style{s}"), seq)?);
    }
    Ok(clips)
}

/// `num_sequences` clips of `n` frames cycling through `style_count` styles.
pub fn make_synthetic_dataset(seed: u64, num_sequences: usize, n: usize, style_count: usize) -> Result<Vec<StyleClip>> {
    generate(&SynthConfig {
        seed,
        num_sequences,
        frames: n,
        style_count,
        ..SynthConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &GestureSequence, b: &GestureSequence) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_synthetic_dataset(0, 6, 20, 3).unwrap();
        let b = make_synthetic_dataset(0, 6, 20, 3).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(1, 6, 20, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn one_style_shares_id() {
        let d = make_synthetic_dataset(3, 5, 8, 1).unwrap();
        assert!(d.iter().all(|c| c.style_id == "style0"));
    }

    #[test]
    fn rejects_short_sequences() {
        assert!(make_synthetic_dataset(0, 2, 7, 1).is_err());
        assert!(make_synthetic_dataset(0, 2, 8, 0).is_err());
    }

    #[test]
    fn intra_style_closer_than_inter_style() {
        let d = make_synthetic_dataset(0, 32, 88, 4).unwrap();
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..d.len() {
            for j in i + 1..d.len() {
                let v = dist(&d[i].sequence, &d[j].sequence);
                if d[i].style_id == d[j].style_id {
                    intra += v;
                    ni += 1;
                } else {
                    inter += v;
                    nx += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / nx as f64);
        assert!(intra < inter, "intra {intra} inter {inter}");
    }
}
