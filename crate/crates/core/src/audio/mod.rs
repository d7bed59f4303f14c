//! Audio input: clips, WAV I/O, MFCC features, a small trainable speech
//! encoder and onset-based audio beats.

pub mod beats;
pub mod encoder;
pub mod mfcc;
pub mod synth;

use std::path::Path;

use crate::error::{Error, Result};

pub use beats::{extract_audio_beats, BeatConfig, BeatSet};
pub use encoder::{SpeechEmbedding, SpeechEncoder, SpeechEncoderConfig, SPEECH_DIM};
pub use mfcc::{compute_mfcc, MelFilterbank, MfccConfig, MfccFeatures, MFCC_DIM};
pub use synth::synthesize_speech_for;

pub const DEFAULT_SAMPLE_RATE: u32 = 22_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("empty audio clip"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn silence(seconds: f64, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; (seconds * sample_rate as f64).round() as usize], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples per motion frame, rounded to the nearest sample
    /// (22 kHz at 30 fps gives 733).
    pub fn hop_for_fps(&self, fps: f64) -> Result<usize> {
        hop_for(self.sample_rate, fps)
    }

    /// Copy delayed by `n` samples of leading silence.
    pub fn delayed(&self, n: usize) -> Self {
        let mut s = vec![0.0; n];
        s.extend_from_slice(&self.samples);
        Self {
            samples: s,
            sample_rate: self.sample_rate,
        }
    }

    /// Reads PCM integer or float WAV; multi-channel input is averaged to mono.
    pub fn load_wav(path: &Path) -> Result<Self> {
        let wav = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut reader = hound::WavReader::open(path).map_err(|e| match e {
            hound::Error::IoError(io) => Error::io(path, io),
            other => wav(other),
        })?;
        let spec = reader.spec();
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav)?,
            hound::SampleFormat::Int => {
                let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav)?
            }
        };
        let ch = spec.channels.max(1) as usize;
        let mono = interleaved
            .chunks(ch)
            .map(|frame| frame.iter().sum::<f64>() / ch as f64)
            .collect();
        Self::new(mono, spec.sample_rate).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Writes 32-bit float mono WAV.
    pub fn save_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let wav = |source| Error::Wav {
            path: path.to_path_buf(),
            source,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav)?;
        for s in &self.samples {
            w.write_sample(*s as f32).map_err(wav)?;
        }
        w.finalize().map_err(wav)
    }
}

pub fn hop_for(sample_rate: u32, fps: f64) -> Result<usize> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::invalid(format!("fps must be positive, got {fps}")));
    }
    let hop = (sample_rate as f64 / fps).round() as usize;
    if hop == 0 {
        return Err(Error::invalid(format!("fps {fps} exceeds sample rate {sample_rate}")));
    }
    Ok(hop)
}
