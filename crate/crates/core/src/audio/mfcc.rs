//! MFCC matrices aligned one column per motion frame.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{hop_for, AudioClip};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MFCC_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub n_fft: usize,
    pub bands: usize,
    pub pre_emphasis: f64,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            bands: MFCC_DIM,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

/// `64×N` cepstral coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFeatures {
    pub coefficients: Tensor,
}

impl MfccFeatures {
    pub fn frames(&self) -> usize {
        self.coefficients.cols()
    }

    /// `N×64`, one row per frame.
    pub fn frame_major(&self) -> Tensor {
        self.coefficients.transpose()
    }

    /// Truncates or edge-pads to exactly `n` frames.
    pub fn aligned(&self, n: usize) -> Result<Tensor> {
        align_rows(&self.frame_major(), n)
    }
}

/// Truncates, or repeats the last row, so the matrix has `n` rows.
pub fn align_rows(m: &Tensor, n: usize) -> Result<Tensor> {
    if m.rows() == 0 || n == 0 {
        return Err(Error::invalid("cannot align an empty feature matrix"));
    }
    let w = m.cols();
    let mut data = Vec::with_capacity(n * w);
    for i in 0..n {
        data.extend_from_slice(m.row(i.min(m.rows() - 1)));
    }
    Tensor::matrix(n, w, data)
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular peak-1 filters on the HTK mel scale between 0 Hz and Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `bands × (n_fft/2 + 1)`
    pub weights: Vec<Vec<f64>>,
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, n_fft: usize, sample_rate: u32) -> Self {
        let bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64))
            .collect();
        let weights = (0..bands)
            .map(|b| {
                let (lo, mid, hi) = (edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * sample_rate as f64 / n_fft as f64;
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self { weights, edges_hz }
    }

    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(spectrum).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Orthonormal DCT-II matrix, `n×n`, rows are basis vectors.
pub fn dct_matrix(n: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * n);
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            data.push(scale * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos());
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

pub fn pre_emphasize(samples: &[f64], coef: f64) -> Vec<f64> {
    let mut prev = 0.0;
    samples
        .iter()
        .map(|&s| {
            let y = s - coef * prev;
            prev = s;
            y
        })
        .collect()
}

/// Short-time magnitude spectra of frames centred on `j·hop + hop/2`,
/// zero-padded outside the signal.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
}

impl Stft {
    pub fn new(n_fft: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            window: hann(n_fft),
            n_fft,
        }
    }

    /// Windowed frame whose centre sample is `center`.
    pub fn frame(&self, signal: &[f64], center: isize) -> Vec<f64> {
        let start = center - (self.n_fft / 2) as isize;
        (0..self.n_fft)
            .map(|i| {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < signal.len() { signal[idx as usize] } else { 0.0 };
                s * self.window[i]
            })
            .collect()
    }

    pub fn magnitude(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm()).collect()
    }
}

/// Mel filterbank energies before the log, `N × bands`.
pub fn mel_spectrogram(clip: &AudioClip, fps: f64, config: &MfccConfig) -> Result<Tensor> {
    let hop = hop_for(clip.sample_rate(), fps)?;
    let frames = clip.samples().len() / hop;
    if frames == 0 {
        return Err(Error::invalid(format!(
            "clip of {} samples is shorter than one hop ({hop})",
            clip.samples().len()
        )));
    }
    let signal = pre_emphasize(clip.samples(), config.pre_emphasis);
    let stft = Stft::new(config.n_fft);
    let bank = MelFilterbank::new(config.bands, config.n_fft, clip.sample_rate());
    let mut data = Vec::with_capacity(frames * config.bands);
    for j in 0..frames {
        let center = (j * hop + hop / 2) as isize;
        data.extend(bank.apply(&stft.magnitude(&stft.frame(&signal, center))));
    }
    Tensor::matrix(frames, config.bands, data)
}

/// Pre-emphasis, Hann-windowed FFT magnitude, mel filterbank, log and
/// orthonormal DCT-II. The hop is `round(sample_rate / fps)`, so there are
/// `floor(len / hop)` frames.
pub fn compute_mfcc(clip: &AudioClip, fps: f64) -> Result<MfccFeatures> {
    compute_mfcc_with(clip, fps, &MfccConfig::default())
}

pub fn compute_mfcc_with(clip: &AudioClip, fps: f64, config: &MfccConfig) -> Result<MfccFeatures> {
    if config.bands != MFCC_DIM {
        return Err(Error::Config(format!("MFCC needs {MFCC_DIM} mel bands, got {}", config.bands)));
    }
    let mel = mel_spectrogram(clip, fps, config)?;
    let logmel = Tensor::matrix(
        mel.rows(),
        mel.cols(),
        mel.data().iter().map(|v| v.max(config.log_floor).ln()).collect(),
    )?;
    // coefficients = D · logmelᵀ, 64×N
    let coefficients = dct_matrix(config.bands).matmul(&logmel.transpose())?;
    Ok(MfccFeatures { coefficients })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64, sr: u32) -> AudioClip {
        let n = (seconds * sr as f64) as usize;
        AudioClip::new(
            (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin()).collect(),
            sr,
        )
        .unwrap()
    }

    #[test]
    fn silence_gives_constant_rows() {
        let m = compute_mfcc(&AudioClip::silence(1.0, 22_000).unwrap(), 30.0).unwrap();
        assert_eq!(m.coefficients.shape(), &[64, 30]);
        for r in 0..64 {
            let row = m.coefficients.row(r);
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-9));
        }
        // all energy of the constant log-floor vector sits in c0
        let expected = (64f64).sqrt() * 1e-10f64.ln();
        assert!((m.coefficients.get2(0, 0) - expected).abs() < 1e-9);
    }

    #[test]
    fn always_64_rows() {
        for secs in [0.05, 0.3, 1.7] {
            let m = compute_mfcc(&sine(300.0, secs, 16_000), 25.0).unwrap();
            assert_eq!(m.coefficients.rows(), 64);
            assert!(m.coefficients.is_finite());
        }
    }

    #[test]
    fn shorter_than_hop_is_error() {
        let c = AudioClip::new(vec![0.0; 100], 22_000).unwrap();
        assert!(compute_mfcc(&c, 30.0).is_err());
    }

    #[test]
    fn filterbank_rows_nonnegative_and_partition_bounded() {
        let fb = MelFilterbank::new(64, 1024, 22_000);
        for k in 0..513 {
            let total: f64 = fb.weights.iter().map(|w| w[k]).sum();
            assert!(total <= 1.0 + 1e-9, "bin {k}: {total}");
        }
        assert!(fb.weights.iter().flatten().all(|w| *w >= 0.0));
        assert!(fb.weights.iter().all(|w| w.iter().any(|v| *v > 0.0)));
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix(64);
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 3.5).collect();
        let xt = Tensor::matrix(64, 1, x.clone()).unwrap();
        let back = d.transpose().matmul(&d.matmul(&xt).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sine_energy_lands_in_440_band_direct_dft_oracle() {
        let sr = 22_000;
        let clip = sine(440.0, 0.5, sr);
        let cfg = MfccConfig::default();
        let mel = mel_spectrogram(&clip, 30.0, &cfg).unwrap();
        let bank = MelFilterbank::new(64, 1024, sr);
        let stft = Stft::new(1024);
        let signal = pre_emphasize(clip.samples(), 0.97);
        for j in [3usize, 7] {
            let frame = stft.frame(&signal, (j * 733 + 366) as isize);
            // O(n²) DFT magnitude
            let direct: Vec<f64> = (0..513)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, x) in frame.iter().enumerate() {
                        let a = -2.0 * PI * (k * n) as f64 / 1024.0;
                        re += x * a.cos();
                        im += x * a.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect();
            let oracle = bank.apply(&direct);
            for (a, b) in mel.row(j).iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            let peak = oracle
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert!(
                bank.edges_hz[peak] <= 440.0 && 440.0 <= bank.edges_hz[peak + 2],
                "peak band {peak} [{}, {}]",
                bank.edges_hz[peak],
                bank.edges_hz[peak + 2]
            );
        }
    }

    #[test]
    fn delay_by_one_hop_shifts_columns() {
        let clip = sine(220.0, 0.6, 22_000);
        let a = compute_mfcc(&clip, 30.0).unwrap().frame_major();
        let b = compute_mfcc(&clip.delayed(733), 30.0).unwrap().frame_major();
        assert_eq!(b.rows(), a.rows() + 1);
        for j in 0..a.rows() {
            for (x, y) in a.row(j).iter().zip(b.row(j + 1)) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn align_rows_pads_and_truncates() {
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(align_rows(&m, 3).unwrap().data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        assert_eq!(align_rows(&m, 1).unwrap().data(), &[1.0, 2.0]);
    }
}
