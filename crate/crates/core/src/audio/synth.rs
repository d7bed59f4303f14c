//! Speech-like audio paired with a pose sequence: a harmonic carrier whose
//! loudness follows the mean joint speed, plus a noise burst at every
//! kinematic beat.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AudioClip;
use crate::error::Result;
use crate::eval::beats::{extract_motion_beats, frame_speeds};
use crate::pose::GestureSequence;

pub fn synthesize_speech_for(seq: &GestureSequence, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    let fps = seq.fps();
    let n = (seq.len() as f64 * sample_rate as f64 / fps).round() as usize;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.random_range(100.0..160.0);

    let speed = frame_speeds(seq);
    let max_speed = speed.iter().cloned().fold(0.0, f64::max);
    let level = |t: f64| -> f64 {
        if max_speed <= 0.0 {
            return 0.0;
        }
        let x = (t * fps).clamp(0.0, (speed.len() - 1) as f64);
        let i = (x.floor() as usize).min(speed.len().saturating_sub(2));
        let frac = x - i as f64;
        let v = if speed.len() == 1 { speed[0] } else { speed[i] * (1.0 - frac) + speed[i + 1] * frac };
        v / max_speed
    };
    let beats = extract_motion_beats(seq);

    let mut out = Vec::with_capacity(n);
    let mut next_beat = 0;
    let mut active: Option<f64> = None;
    for i in 0..n {
        let t = i as f64 / sr;
        while next_beat < beats.len() && beats.times()[next_beat] <= t {
            active = Some(beats.times()[next_beat]);
            next_beat += 1;
        }
        let amp = 0.04 + 0.2 * level(t);
        let carrier: f64 = (1..=4).map(|h| (TAU * f0 * h as f64 * t).sin() / h as f64).sum::<f64>() * 0.5;
        let mut s = amp * carrier;
        if let Some(b) = active {
            let env = 0.6 * (-(t - b) / 0.025).exp();
            s += env * rng.random_range(-1.0..1.0);
        }
        // f32-representable so a float WAV round-trips exactly
        out.push(s.clamp(-0.99, 0.99) as f32 as f64);
    }
    AudioClip::new(out, sample_rate)
}
