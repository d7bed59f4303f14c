//! Style-conditioned autoregressive prediction of hand and body codebook
//! indices.
//!
//! MFCC steps attend over key/value tokens projected from the style code
//! (or, in the direct-injection variant, are concatenated with it). A
//! causal transformer trunk reads, at step `i`, the previous hand and body
//! indices, the audio features of step `i`, the fused features of step `i`
//! and a speaker embedding, and emits logits for both streams.

mod generate;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use generate::{generate, generate_many, Generation, GenerationRequest, SamplingConfig, SamplingMode};
pub use train::{
    train_predictor, PredictorEpochLog, PredictorTrainConfig, PredictorTrainLog, TeacherForcedInput, TeacherForcedVars, TrainingPair,
};

use crate::audio::{compute_mfcc, AudioClip, SpeechEncoder, SpeechEncoderConfig, MFCC_DIM, SPEECH_DIM};
use crate::checkpoint::{canonical_digest, Checkpoint};
use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_row;
use crate::numerics::nn::{causal_mask, sinusoidal_positions, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::numerics::{derive_seed, Bound, ParamStore, Tape, Tensor, Var};
use crate::pose::StyleClip;
use crate::quantizer::VqVaeModel;
use crate::style::{StyleCode, StyleEncoderConfig, StyleEncoderModel};

pub const CHECKPOINT_KIND: &str = "predictor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    CrossAttention,
    /// The style code is concatenated to every MFCC step and projected.
    DirectInjection,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross-attention" => Ok(Fusion::CrossAttention),
            "direct-injection" => Ok(Fusion::DirectInjection),
            other => Err(Error::invalid(format!("unknown fusion `{other}` (cross-attention|direct-injection)"))),
        }
    }
}

/// Which audio features condition the trunk directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AudioConditioning {
    /// Strided output of the trainable speech encoder.
    Embedding,
    /// The normalized MFCC steps.
    Mfcc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Key/value tokens the style code is expanded into; 1 gives the
    /// single-token form.
    pub kv_tokens: usize,
    /// Query/key/value width `d_k` of the fusion attention.
    pub attn_dim: usize,
    pub fusion: Fusion,
    pub audio: AudioConditioning,
    pub max_steps: usize,
    pub style: StyleEncoderConfig,
    pub speech: SpeechEncoderConfig,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            kv_tokens: 8,
            attn_dim: 64,
            fusion: Fusion::CrossAttention,
            audio: AudioConditioning::Embedding,
            max_steps: 512,
            style: StyleEncoderConfig::default(),
            speech: SpeechEncoderConfig::default(),
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "predictor model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.kv_tokens == 0 || self.attn_dim == 0 || self.ff_mult == 0 || self.max_steps == 0 {
            return Err(Error::Config("predictor kv_tokens, attn_dim, ff_mult and max_steps must be positive".into()));
        }
        self.style.validate()
    }

    fn audio_width(&self) -> usize {
        match self.audio {
            AudioConditioning::Embedding => SPEECH_DIM,
            AudioConditioning::Mfcc => MFCC_DIM,
        }
    }
}

/// Per-coefficient affine normalization of MFCC steps, fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MfccNorm {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; MFCC_DIM],
            std: vec![1.0; MFCC_DIM],
        }
    }

    pub fn fit(steps: &[Tensor]) -> Self {
        let rows: usize = steps.iter().map(Tensor::rows).sum();
        if rows == 0 {
            return Self::identity();
        }
        let mut mean = vec![0.0; MFCC_DIM];
        for s in steps {
            for r in 0..s.rows() {
                for (m, v) in mean.iter_mut().zip(s.row(r)) {
                    *m += v / rows as f64;
                }
            }
        }
        let mut var = vec![0.0; MFCC_DIM];
        for s in steps {
            for r in 0..s.rows() {
                for ((acc, v), m) in var.iter_mut().zip(s.row(r)).zip(&mean) {
                    *acc += (v - m) * (v - m) / rows as f64;
                }
            }
        }
        Self {
            mean,
            std: var.into_iter().map(|v| v.sqrt().max(1e-6)).collect(),
        }
    }

    pub fn apply(&self, steps: &Tensor) -> Tensor {
        let mut out = steps.clone();
        let c = out.cols();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let j = k % c;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }
}

/// `steps × n_src` matrix averaging motion frames `[r·d, (r+1)·d)` of step
/// `r`, frame `f` read from source row `min(f, n_src-1)`.
pub fn step_pooling(steps: usize, d: usize, n_src: usize) -> Tensor {
    let mut m = vec![0.0; steps * n_src];
    for r in 0..steps {
        let w = 1.0 / d as f64;
        for f in r * d..(r + 1) * d {
            m[r * n_src + f.min(n_src - 1)] += w;
        }
    }
    Tensor::matrix(steps, n_src, m).expect("pooling shape")
}

/// Raw (unnormalized) MFCC averaged per step of `d` frames.
pub fn mfcc_steps(clip: &AudioClip, fps: f64, steps: usize, d: usize) -> Result<Tensor> {
    let m = compute_mfcc(clip, fps)?.frame_major();
    step_pooling(steps, d, m.rows()).matmul(&m)
}

/// `softmax(QKᵀ/√d_k) V` for `q: n×d_k`, `k: T×d_k`, `v: T×d_v`.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::shape("cross_attention", q.shape(), k.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul(&k.transpose())?;
    let t = k.rows();
    for row in scores.data_mut().chunks_mut(t) {
        for s in row.iter_mut() {
            *s *= scale;
        }
        softmax_row(row, None);
    }
    scores.matmul(v)
}

/// `N′×attn_dim` fused audio/style features.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures {
    pub features: Tensor,
}

/// Per-step conditioning of the trunk for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInputs {
    /// `N′×A` audio features (A = 256 or 64).
    pub audio: Tensor,
    /// `N′×attn_dim`
    pub fused: Tensor,
}

impl StepInputs {
    pub fn steps(&self) -> usize {
        self.audio.rows()
    }
}

#[derive(Debug, Clone)]
struct Net {
    w_q: Linear,
    w_k: Linear,
    w_v: Linear,
    direct: Option<Linear>,
    fuse_proj: Linear,
    audio_proj: Linear,
    emb_h: Embedding,
    emb_b: Embedding,
    identity: Embedding,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
    head_h: Linear,
    head_b: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Hyper {
    config: PredictorConfig,
    identities: Vec<String>,
    mfcc_norm: MfccNorm,
    codebook_hand: usize,
    codebook_body: usize,
    downsample: usize,
    fps: f64,
    vq_config_digest: String,
    vq_training_digest: String,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub store: ParamStore,
    /// Known speaker tags, in embedding order.
    pub identities: Vec<String>,
    pub mfcc_norm: MfccNorm,
    pub codebook_hand: usize,
    pub codebook_body: usize,
    pub downsample: usize,
    pub fps: f64,
    pub vq_config_digest: String,
    pub vq_training_digest: String,
    pub seed: u64,
    pub style: StyleEncoderModel,
    pub speech: SpeechEncoder,
    net: Net,
}

impl PredictorModel {
    /// A freshly initialized predictor bound to `vq`'s codebooks.
    pub fn new(config: PredictorConfig, vq: &VqVaeModel, identities: Vec<String>, fps: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if identities.is_empty() {
            return Err(Error::Config("predictor needs at least one identity".into()));
        }
        let mut ids = identities.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != identities.len() {
            return Err(Error::Config("duplicate identity tags".into()));
        }
        let hyper = Hyper {
            config,
            identities,
            mfcc_norm: MfccNorm::identity(),
            codebook_hand: vq.codebook_size(),
            codebook_body: vq.codebook_size(),
            downsample: vq.config.downsample,
            fps,
            vq_config_digest: vq.config_digest(),
            vq_training_digest: vq.training_digest.clone(),
            seed,
        };
        Self::from_hyper(hyper)
    }

    fn from_hyper(h: Hyper) -> Result<Self> {
        h.config.validate()?;
        let c = &h.config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(h.seed, 21));
        let style = StyleEncoderModel::new(&mut store, "style", c.style.clone(), &mut rng)?;
        let speech_cfg = SpeechEncoderConfig {
            fps: h.fps,
            ..c.speech.clone()
        };
        let speech = SpeechEncoder::new(&mut store, "speech", speech_cfg, &mut rng)?;
        let (d, a, ds) = (c.model_dim, c.attn_dim, c.style.dim);
        let net = Net {
            w_q: Linear::new(&mut store, "fuse.q", MFCC_DIM, a, false, &mut rng),
            w_k: Linear::new(&mut store, "fuse.k", ds, c.kv_tokens * a, false, &mut rng),
            w_v: Linear::new(&mut store, "fuse.v", ds, c.kv_tokens * a, false, &mut rng),
            direct: (c.fusion == Fusion::DirectInjection)
                .then(|| Linear::new(&mut store, "fuse.direct", MFCC_DIM + ds, a, true, &mut rng)),
            fuse_proj: Linear::new(&mut store, "trunk.fused", a, d, true, &mut rng),
            audio_proj: Linear::new(&mut store, "trunk.audio", c.audio_width(), d, true, &mut rng),
            emb_h: Embedding::new(&mut store, "trunk.emb_hand", h.codebook_hand + 1, d, &mut rng),
            emb_b: Embedding::new(&mut store, "trunk.emb_body", h.codebook_body + 1, d, &mut rng),
            identity: Embedding::new(&mut store, "trunk.identity", h.identities.len(), d, &mut rng),
            blocks: (0..c.layers)
                .map(|l| TransformerBlock::new(&mut store, &format!("trunk.block{l}"), d, c.heads, d * c.ff_mult, &mut rng))
                .collect(),
            ln: LayerNorm::new(&mut store, "trunk.ln", d, &mut rng),
            head_h: Linear::new(&mut store, "head.hand", d, h.codebook_hand, true, &mut rng),
            head_b: Linear::new(&mut store, "head.body", d, h.codebook_body, true, &mut rng),
        };
        Ok(Self {
            config: h.config,
            store,
            identities: h.identities,
            mfcc_norm: h.mfcc_norm,
            codebook_hand: h.codebook_hand,
            codebook_body: h.codebook_body,
            downsample: h.downsample,
            fps: h.fps,
            vq_config_digest: h.vq_config_digest,
            vq_training_digest: h.vq_training_digest,
            seed: h.seed,
            style,
            speech,
            net,
        })
    }

    fn hyper(&self) -> Hyper {
        Hyper {
            config: self.config.clone(),
            identities: self.identities.clone(),
            mfcc_norm: self.mfcc_norm.clone(),
            codebook_hand: self.codebook_hand,
            codebook_body: self.codebook_body,
            downsample: self.downsample,
            fps: self.fps,
            vq_config_digest: self.vq_config_digest.clone(),
            vq_training_digest: self.vq_training_digest.clone(),
            seed: self.seed,
        }
    }

    /// Digest of every hyperparameter (not the weights).
    pub fn config_digest(&self) -> String {
        canonical_digest(&self.hyper())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(CHECKPOINT_KIND, &self.hyper(), self.store.clone())
            .with_digest("config", self.config_digest())
            .with_digest("vq_config", self.vq_config_digest.clone())
            .with_digest("vq_training", self.vq_training_digest.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut m = Self::from_hyper(ck.hyper_as()?)?;
        m.store.load_from(&ck.params)?;
        Ok(m)
    }

    /// Errors unless `vq` is the model this predictor was trained against.
    pub fn check_lineage(&self, vq: &VqVaeModel) -> Result<()> {
        if vq.config_digest() != self.vq_config_digest || vq.training_digest != self.vq_training_digest {
            return Err(Error::Lineage(format!(
                "predictor was trained against vq config {} / run {}, got {} / {}",
                short(&self.vq_config_digest),
                short(&self.vq_training_digest),
                short(&vq.config_digest()),
                short(&vq.training_digest)
            )));
        }
        if vq.codebook_size() != self.codebook_hand || vq.config.downsample != self.downsample {
            return Err(Error::Lineage("codebook size or downsampling differs from training".into()));
        }
        Ok(())
    }

    pub fn identity_index(&self, tag: &str) -> Result<usize> {
        self.identities
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::invalid(format!("unknown identity `{tag}`; known: {}", self.identities.join(", "))))
    }

    pub fn start_hand(&self) -> usize {
        self.codebook_hand
    }

    pub fn start_body(&self) -> usize {
        self.codebook_body
    }

    /// Normalized MFCC steps of a clip.
    pub fn mfcc_steps(&self, clip: &AudioClip, steps: usize) -> Result<Tensor> {
        Ok(self.mfcc_norm.apply(&mfcc_steps(clip, self.fps, steps, self.downsample)?))
    }

    /// Records fusion on the tape: `mfcc` is `L×64`, `code` is `1×d_s`.
    fn fuse_vars(&self, t: &mut Tape, p: &Bound, mfcc: Var, code: Var) -> Result<Var> {
        let a = self.config.attn_dim;
        match self.config.fusion {
            Fusion::CrossAttention => {
                let q = self.net.w_q.forward(t, p, mfcc)?;
                let k = self.net.w_k.forward(t, p, code)?;
                let k = t.reshape(k, vec![self.config.kv_tokens, a])?;
                let v = self.net.w_v.forward(t, p, code)?;
                let v = t.reshape(v, vec![self.config.kv_tokens, a])?;
                let kt = t.transpose(k)?;
                let s = t.matmul(q, kt)?;
                let s = t.scale(s, 1.0 / (a as f64).sqrt());
                let w = t.softmax(s, 1)?;
                t.matmul(w, v)
            }
            Fusion::DirectInjection => {
                let rows = t.shape(mfcc)[0];
                let ones = t.constant(Tensor::full(&[rows, 1], 1.0));
                let rep = t.matmul(ones, code)?;
                let cat = t.concat_cols(&[mfcc, rep])?;
                self.net.direct.as_ref().expect("direct-injection layer").forward(t, p, cat)
            }
        }
    }

    /// Fused features for normalized MFCC steps and a style code.
    pub fn cross_attend(&self, mfcc: &Tensor, code: &StyleCode) -> Result<FusedFeatures> {
        if mfcc.cols() != MFCC_DIM || code.dim() != self.config.style.dim {
            return Err(Error::shape("cross_attend", mfcc.shape(), &[code.dim()]));
        }
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let m = t.constant(mfcc.clone());
        let c = t.constant(Tensor::matrix(1, code.dim(), code.vector.clone())?);
        let f = self.fuse_vars(&mut t, &p, m, c)?;
        Ok(FusedFeatures {
            features: t.value(f).clone(),
        })
    }

    /// Key and value tokens (`T×d_k`) derived from a style code.
    pub fn style_tokens(&self, code: &StyleCode) -> Result<(Tensor, Tensor)> {
        let c = Tensor::matrix(1, code.dim(), code.vector.clone())?;
        let shape = vec![self.config.kv_tokens, self.config.attn_dim];
        let k = c.matmul(self.store.get(self.net.w_k.weight()))?.reshape(shape.clone())?;
        let v = c.matmul(self.store.get(self.net.w_v.weight()))?.reshape(shape)?;
        Ok((k, v))
    }

    /// Records the causal trunk over `L` positions. Position `i` reads
    /// `prev_h[i]`, `prev_b[i]` (the indices of step `i-1`, or the start
    /// token), `audio[i]` and `fused[i]`; returns `L×M_H` and `L×M_B` logits.
    fn trunk_vars(
        &self,
        t: &mut Tape,
        p: &Bound,
        prev_h: &[usize],
        prev_b: &[usize],
        audio: Var,
        fused: Var,
        identity: usize,
    ) -> Result<(Var, Var)> {
        let l = prev_h.len();
        if prev_b.len() != l || t.shape(audio)[0] != l || t.shape(fused)[0] != l {
            return Err(Error::invalid(format!(
                "trunk inputs disagree in length: {l} hand, {} body, {} audio, {} fused",
                prev_b.len(),
                t.shape(audio)[0],
                t.shape(fused)[0]
            )));
        }
        if l > self.config.max_steps {
            return Err(Error::invalid(format!("{l} steps exceed the maximum of {}", self.config.max_steps)));
        }
        if identity >= self.identities.len() {
            return Err(Error::invalid(format!("identity index {identity} out of range")));
        }
        let eh = self.net.emb_h.forward(t, p, prev_h)?;
        let eb = self.net.emb_b.forward(t, p, prev_b)?;
        let mut x = t.add(eh, eb)?;
        let a = self.net.audio_proj.forward(t, p, audio)?;
        x = t.add(x, a)?;
        let f = self.net.fuse_proj.forward(t, p, fused)?;
        x = t.add(x, f)?;
        let id = self.net.identity.forward(t, p, &[identity])?;
        x = t.add_row(x, id)?;
        let pe = t.constant(sinusoidal_positions(l, self.config.model_dim));
        x = t.add(x, pe)?;
        let mask = causal_mask(l);
        for b in &self.net.blocks {
            x = b.forward(t, p, x, Some(&mask))?;
        }
        let h = self.net.ln.forward(t, p, x)?;
        Ok((self.net.head_h.forward(t, p, h)?, self.net.head_b.forward(t, p, h)?))
    }

    fn shifted(&self, tokens: &[usize], start: usize, limit: usize) -> Result<Vec<usize>> {
        if let Some(bad) = tokens.iter().find(|&&i| i >= limit) {
            return Err(Error::invalid(format!("index {bad} >= codebook size {limit}")));
        }
        let mut prev = Vec::with_capacity(tokens.len());
        prev.push(start);
        prev.extend_from_slice(&tokens[..tokens.len().saturating_sub(1)]);
        Ok(prev)
    }

    /// Teacher-forced logits at every step for index streams `x_h`, `x_b`
    /// (each of length `inputs.steps()`): row `i` conditions on `x[<i]`.
    pub fn step_logits(&self, inputs: &StepInputs, x_h: &[usize], x_b: &[usize], identity: usize) -> Result<(Tensor, Tensor)> {
        let prev_h = self.shifted(x_h, self.start_hand(), self.codebook_hand)?;
        let prev_b = self.shifted(x_b, self.start_body(), self.codebook_body)?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let a = t.constant(inputs.audio.clone());
        let f = t.constant(inputs.fused.clone());
        let (lh, lb) = self.trunk_vars(&mut t, &p, &prev_h, &prev_b, a, f, identity)?;
        Ok((t.value(lh).clone(), t.value(lb).clone()))
    }

    /// Logits for step `i = past_h.len()` given both streams' pasts.
    pub fn predict_logits(&self, past_h: &[usize], past_b: &[usize], inputs: &StepInputs, identity: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let i = past_h.len();
        if past_b.len() != i {
            return Err(Error::invalid(format!("past lengths differ: hand {i}, body {}", past_b.len())));
        }
        if i >= inputs.steps() {
            return Err(Error::invalid(format!("step {i} beyond the {} conditioned steps", inputs.steps())));
        }
        // a placeholder for step i itself; it only feeds position i+1
        let mut h = past_h.to_vec();
        h.push(0);
        let mut b = past_b.to_vec();
        b.push(0);
        let sliced = StepInputs {
            audio: inputs.audio.rows_prefix(i + 1),
            fused: inputs.fused.rows_prefix(i + 1),
        };
        let (lh, lb) = self.step_logits(&sliced, &h, &b, identity)?;
        Ok((lh.row(i).to_vec(), lb.row(i).to_vec()))
    }

    /// Audio features per step recorded on the tape (`steps×A`).
    fn audio_vars(&self, t: &mut Tape, p: &Bound, clip: &AudioClip, mfcc: &Tensor, steps: usize) -> Result<Var> {
        match self.config.audio {
            AudioConditioning::Mfcc => Ok(t.constant(mfcc.clone())),
            AudioConditioning::Embedding => {
                let e = self.speech.forward(t, p, clip)?;
                let rows = t.shape(e)[0];
                let pool = t.constant(step_pooling(steps, self.downsample, rows));
                t.matmul(pool, e)
            }
        }
    }

    /// Per-step conditioning for `steps` steps of audio and a style clip.
    pub fn conditioning(&self, clip: &AudioClip, style: &StyleClip, steps: usize) -> Result<StepInputs> {
        let mfcc = self.mfcc_steps(clip, steps)?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let code = self.style.forward_clip(&mut t, &p, style)?.code;
        let m = t.constant(mfcc.clone());
        let fused = self.fuse_vars(&mut t, &p, m, code)?;
        let audio = self.audio_vars(&mut t, &p, clip, &mfcc, steps)?;
        Ok(StepInputs {
            audio: t.value(audio).clone(),
            fused: t.value(fused).clone(),
        })
    }

    pub fn style_code(&self, style: &StyleClip) -> Result<StyleCode> {
        crate::style::encode_style(&self.style, &self.store, style)
    }
}

fn short(d: &str) -> &str {
    &d[..d.len().min(12)]
}

trait RowsPrefix {
    fn rows_prefix(&self, n: usize) -> Tensor;
}

impl RowsPrefix for Tensor {
    fn rows_prefix(&self, n: usize) -> Tensor {
        let c = self.cols();
        Tensor::matrix(n, c, self.data()[..n * c].to_vec()).expect("row prefix")
    }
}
