//! Trainable stand-in for a pretrained speech encoder.
//!
//! Samples are cut into non-overlapping frames of one motion-frame hop
//! (a convolution with kernel = stride = hop), projected, passed through a
//! causal kernel-3 convolution to the latent width and linearly reduced to
//! 256 features. Output frame `i` sees samples `[(i-2)·hop, (i+1)·hop)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{hop_for, AudioClip};
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv1d, Linear};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};

pub const SPEECH_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechEncoderConfig {
    pub hidden: usize,
    /// Width of the convolutional latents before projection (768 upstream).
    pub latent: usize,
    pub sample_rate: u32,
    pub fps: f64,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 768,
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            fps: crate::pose::DEFAULT_FPS,
        }
    }
}

/// `N×256` frame-aligned speech features.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEmbedding {
    pub features: Tensor,
}

impl SpeechEmbedding {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.cols() != SPEECH_DIM {
            return Err(Error::shape("speech embedding", features.shape(), &[SPEECH_DIM]));
        }
        Ok(Self { features })
    }
}

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub config: SpeechEncoderConfig,
    pub hop: usize,
    frame_proj: Linear,
    conv: Conv1d,
    out: Linear,
}

impl SpeechEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: SpeechEncoderConfig, rng: &mut R) -> Result<Self> {
        let hop = hop_for(config.sample_rate, config.fps)?;
        if config.hidden == 0 || config.latent == 0 {
            return Err(Error::Config("speech encoder widths must be positive".into()));
        }
        let frame_proj = Linear::new(store, &format!("{name}.frame"), hop, config.hidden, true, rng);
        let conv = Conv1d::new(store, &format!("{name}.conv"), config.hidden, config.latent, 3, 1, 0, rng);
        let out = Linear::new(store, &format!("{name}.proj"), config.latent, SPEECH_DIM, true, rng);
        Ok(Self {
            config,
            hop,
            frame_proj,
            conv,
            out,
        })
    }

    /// Number of output frames for a clip.
    pub fn frames(&self, clip: &AudioClip) -> usize {
        clip.samples().len() / self.hop
    }

    fn check(&self, clip: &AudioClip) -> Result<usize> {
        if clip.sample_rate() != self.config.sample_rate {
            return Err(Error::invalid(format!(
                "clip sample rate {} != encoder rate {}",
                clip.sample_rate(),
                self.config.sample_rate
            )));
        }
        let n = self.frames(clip);
        if n == 0 {
            return Err(Error::invalid("clip shorter than one frame hop"));
        }
        Ok(n)
    }

    /// Records the encoder on `tape`; returns an `N×256` variable.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, clip: &AudioClip) -> Result<Var> {
        let n = self.check(clip)?;
        let frames = Tensor::matrix(n, self.hop, clip.samples()[..n * self.hop].to_vec())?;
        let x = tape.constant(frames);
        let h = self.frame_proj.forward(tape, p, x)?;
        let h = tape.gelu(h);
        let pad = tape.constant(Tensor::zeros(&[2, self.config.hidden]));
        let h = tape.concat_rows(&[pad, h])?;
        let h = self.conv.forward(tape, p, h)?;
        let h = tape.gelu(h);
        self.out.forward(tape, p, h)
    }

    pub fn embed(&self, store: &ParamStore, clip: &AudioClip) -> Result<SpeechEmbedding> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let y = self.forward(&mut tape, &p, clip)?;
        SpeechEmbedding::new(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamStore, SpeechEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = SpeechEncoderConfig {
            hidden: 8,
            latent: 24,
            sample_rate: 8000,
            fps: 25.0,
        };
        let enc = SpeechEncoder::new(&mut store, "speech", cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn zero_signal_gives_identical_rows() {
        let (store, enc) = small();
        let e = enc.embed(&store, &AudioClip::silence(0.4, 8000).unwrap()).unwrap();
        assert_eq!(e.features.shape(), &[10, 256]);
        for i in 1..10 {
            assert_eq!(e.features.row(i), e.features.row(0));
        }
    }

    #[test]
    fn width_is_256_with_default_latent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = SpeechEncoder::new(&mut store, "s", SpeechEncoderConfig::default(), &mut rng).unwrap();
        let clip = AudioClip::new((0..1500).map(|i| (i as f64 * 0.01).sin() * 0.3).collect(), 22_000).unwrap();
        let e = enc.embed(&store, &clip).unwrap();
        assert_eq!(e.features.shape(), &[2, 256]);
    }

    #[test]
    fn receptive_field_is_causal() {
        let (store, enc) = small();
        let hop = enc.hop; // 320
        let base: Vec<f64> = (0..hop * 12).map(|i| ((i * 7919) % 200) as f64 / 200.0 - 0.5).collect();
        let t = 7 * hop + 11;
        let mut other = base.clone();
        for v in &mut other[t..] {
            *v = -*v * 0.5;
        }
        let a = enc.embed(&store, &AudioClip::new(base, 8000).unwrap()).unwrap();
        let b = enc.embed(&store, &AudioClip::new(other, 8000).unwrap()).unwrap();
        // frame i ends at (i+1)·hop
        for i in 0..12 {
            let same = a.features.row(i) == b.features.row(i);
            assert_eq!(same, (i + 1) * hop <= t, "frame {i}");
        }
    }
}
