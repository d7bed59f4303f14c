//! Onset detection by spectral flux.

use serde::{Deserialize, Serialize};

use super::mfcc::{MelFilterbank, Stft};
use super::AudioClip;
use crate::error::{Error, Result};

/// Strictly increasing event times in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatSet {
    times: Vec<f64>,
}

impl BeatSet {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::invalid("beat times must be finite and nonnegative"));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("beat times must be strictly increasing"));
        }
        Ok(Self { times })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeatConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub bands: usize,
    /// Half-width of the adaptive-threshold window, in frames.
    pub window: usize,
    /// Multiplier on the local standard deviation.
    pub k: f64,
    /// Peaks below this fraction of the global novelty maximum are dropped.
    pub delta: f64,
    /// Minimum gap between beats, seconds.
    pub min_interval: f64,
    /// Dynamic range kept below the loudest mel magnitude.
    pub floor_db: f64,
}

impl Default for BeatConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            hop: 256,
            bands: 40,
            window: 8,
            k: 0.5,
            delta: 0.1,
            min_interval: 0.05,
            floor_db: 40.0,
        }
    }
}

/// Half-wave-rectified log-mel flux, smoothed with a [1/4, 1/2, 1/4] kernel.
///
/// Mel magnitudes are floored at `floor_db` below the clip maximum before
/// the log, so leakage bins of a steady tone (whose magnitude beats against
/// the negative-frequency image) do not register as onsets.
pub fn novelty(clip: &AudioClip, config: &BeatConfig) -> Vec<f64> {
    let stft = Stft::new(config.n_fft);
    let bank = MelFilterbank::new(config.bands, config.n_fft, clip.sample_rate());
    // frames whose window would run past the end are dropped: the
    // truncation edge is broadband and reads as an onset
    let half = config.n_fft / 2;
    let len = clip.samples().len();
    let frames = if len > half { (len - half) / config.hop + 1 } else { 1 };
    let mel: Vec<Vec<f64>> = (0..frames)
        .map(|t| bank.apply(&stft.magnitude(&stft.frame(clip.samples(), (t * config.hop) as isize))))
        .collect();
    let peak = mel.iter().flatten().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return vec![0.0; frames];
    }
    let floor = peak * 10f64.powf(-config.floor_db / 20.0);
    let spectra: Vec<Vec<f64>> = mel
        .into_iter()
        .map(|row| row.into_iter().map(|v| v.max(floor).ln()).collect())
        .collect();
    let mut flux = vec![0.0; frames];
    for t in 1..frames {
        flux[t] = spectra[t]
            .iter()
            .zip(&spectra[t - 1])
            .map(|(a, b)| (a - b).max(0.0))
            .sum();
    }
    (0..frames)
        .map(|t| {
            let prev = if t > 0 { flux[t - 1] } else { 0.0 };
            let next = if t + 1 < frames { flux[t + 1] } else { 0.0 };
            0.25 * prev + 0.5 * flux[t] + 0.25 * next
        })
        .collect()
}

/// Peaks of the novelty curve that exceed mean + k·std of their
/// neighbourhood and `delta` times the global maximum. Beat time is the
/// analysis frame centre.
pub fn pick_peaks(nov: &[f64], frame_seconds: f64, config: &BeatConfig) -> Vec<usize> {
    let max = nov.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-9 {
        return Vec::new();
    }
    let mut peaks: Vec<usize> = Vec::new();
    for t in 0..nov.len() {
        let prev = if t > 0 { nov[t - 1] } else { f64::NEG_INFINITY };
        let next = if t + 1 < nov.len() { nov[t + 1] } else { f64::NEG_INFINITY };
        if !(nov[t] >= prev && nov[t] > next) || nov[t] < config.delta * max {
            continue;
        }
        let lo = t.saturating_sub(config.window);
        let hi = (t + config.window + 1).min(nov.len());
        let w = &nov[lo..hi];
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        if nov[t] <= mean + config.k * var.sqrt() {
            continue;
        }
        match peaks.last() {
            Some(&p) if (t - p) as f64 * frame_seconds < config.min_interval => {
                if nov[t] > nov[p] {
                    *peaks.last_mut().expect("non-empty") = t;
                }
            }
            _ => peaks.push(t),
        }
    }
    peaks
}

pub fn extract_audio_beats(clip: &AudioClip) -> BeatSet {
    extract_audio_beats_with(clip, &BeatConfig::default())
}

pub fn extract_audio_beats_with(clip: &AudioClip, config: &BeatConfig) -> BeatSet {
    let nov = novelty(clip, config);
    let dt = config.hop as f64 / clip.sample_rate() as f64;
    let duration = clip.duration();
    let times = pick_peaks(&nov, dt, config)
        .into_iter()
        .map(|t| t as f64 * dt)
        .filter(|t| *t <= duration)
        .collect();
    BeatSet::new(times).expect("peaks are increasing")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn silence_has_no_beats() {
        assert!(extract_audio_beats(&AudioClip::silence(2.0, 22_000).unwrap()).is_empty());
    }

    #[test]
    fn click_train_at_2hz() {
        let sr = 22_000u32;
        let mut s = vec![0.0; 3 * sr as usize];
        let clicks = [0.5, 1.0, 1.5, 2.0, 2.5];
        for c in clicks {
            let at = (c * sr as f64) as usize;
            for j in 0..200 {
                s[at + j] = 0.8 * (-(j as f64) / 40.0).exp() * if j % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let clip = AudioClip::new(s, sr).unwrap();
        let beats = extract_audio_beats(&clip);
        let hop = 256.0 / sr as f64;
        assert_eq!(beats.len(), clicks.len(), "{:?}", beats.times());
        for (b, c) in beats.times().iter().zip(clicks) {
            assert!((b - c).abs() <= hop, "beat {b} vs click {c}");
        }
    }

    #[test]
    fn steady_tone_has_at_most_onset() {
        let sr = 22_000u32;
        let s = (0..2 * sr as usize)
            .map(|i| 0.5 * (2.0 * PI * 330.0 * i as f64 / sr as f64).sin())
            .collect();
        let beats = extract_audio_beats(&AudioClip::new(s, sr).unwrap());
        assert!(beats.len() <= 1, "{:?}", beats.times());
    }

    #[test]
    fn beats_sit_on_novelty_maxima() {
        let sr = 16_000u32;
        let s: Vec<f64> = (0..sr as usize)
            .map(|i| {
                let t = i as f64 / sr as f64;
                let env = if (t * 3.0).fract() < 0.1 { 0.7 } else { 0.05 };
                env * (2.0 * PI * 500.0 * t).sin()
            })
            .collect();
        let clip = AudioClip::new(s, sr).unwrap();
        let cfg = BeatConfig::default();
        let nov = novelty(&clip, &cfg);
        let peaks = pick_peaks(&nov, cfg.hop as f64 / sr as f64, &cfg);
        assert!(!peaks.is_empty());
        for p in peaks {
            assert!(p == 0 || nov[p] >= nov[p - 1]);
            assert!(p + 1 == nov.len() || nov[p] > nov[p + 1]);
        }
    }

    #[test]
    fn beat_set_validates() {
        assert!(BeatSet::new(vec![0.1, 0.1]).is_err());
        assert!(BeatSet::new(vec![-0.1]).is_err());
        assert!(BeatSet::new(vec![0.1, 0.2]).is_ok());
    }
}
