//! Dual-stream VQ-VAE over hand and body motion.
//!
//! Each stream has its own temporal convolutional encoder (total stride
//! `d`), codebook and transposed-convolution decoder. Latent rows snap to
//! their nearest codebook entry; gradients reach the encoder through a
//! straight-through copy.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{train_vqvae, VqEpochLog, VqTrainConfig, VqTrainLog};

use crate::checkpoint::{canonical_digest, Checkpoint};
use crate::error::{Error, Result};
use crate::numerics::nn::{Conv1d, ConvTranspose1d};
use crate::numerics::{Bound, Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::pose::{concat_channels, split_channels, ChannelSplit, GestureSequence, BODY_DIM, HAND_DIM, JAW_DIM};

pub const CHECKPOINT_KIND: &str = "vqvae";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Hand,
    Body,
}

impl Stream {
    pub const BOTH: [Stream; 2] = [Stream::Hand, Stream::Body];

    pub fn width(self) -> usize {
        match self {
            Stream::Hand => HAND_DIM,
            Stream::Body => BODY_DIM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stream::Hand => "hand",
            Stream::Body => "body",
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hand" => Ok(Stream::Hand),
            "body" => Ok(Stream::Body),
            other => Err(Error::invalid(format!("unknown stream `{other}` (hand|body)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqVaeConfig {
    /// Temporal downsampling factor `d`, a power of two.
    pub downsample: usize,
    /// Latent and codebook width `C`.
    pub channels: usize,
    /// Codebook size `M`, per stream.
    pub codebook_size: usize,
    /// Commitment weight.
    pub beta: f64,
    /// `true`: codebook and commitment terms use the squared norm;
    /// `false`: the plain norm.
    pub squared_norm: bool,
}

impl Default for VqVaeConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            channels: 128,
            codebook_size: 256,
            beta: 0.25,
            squared_norm: true,
        }
    }
}

impl VqVaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!("vq downsample must be a power of two, got {}", self.downsample)));
        }
        if self.channels == 0 {
            return Err(Error::Config("vq channels must be positive".into()));
        }
        if self.codebook_size < 1 {
            return Err(Error::Config("vq codebook_size must be >= 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("vq beta must be finite and >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// Codebook indices of one stream, every entry `< codebook_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSequence {
    pub indices: Vec<usize>,
    pub codebook_size: usize,
}

impl IndexSequence {
    pub fn new(indices: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::invalid(format!("index {bad} >= codebook size {codebook_size}")));
        }
        Ok(Self { indices, codebook_size })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Nearest entry of `codebook` (`M×C`) for every row of `latents`
/// (`N′×C`) by squared Euclidean distance, ties to the lowest index.
pub fn nearest_codes(codebook: &Tensor, latents: &Tensor) -> Result<Vec<usize>> {
    let (m, c) = (codebook.rows(), codebook.cols());
    if m == 0 {
        return Err(Error::invalid("empty codebook"));
    }
    if latents.cols() != c {
        return Err(Error::shape("quantize", codebook.shape(), latents.shape()));
    }
    Ok((0..latents.rows())
        .map(|r| {
            let row = latents.row(r);
            let mut best = (0, f64::INFINITY);
            for k in 0..m {
                let d: f64 = codebook.row(k).iter().zip(row).map(|(e, x)| (x - e) * (x - e)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect())
}

/// Quantizes latents against a codebook: indices plus the selected entries.
pub fn quantize(codebook: &Tensor, latents: &Tensor) -> Result<(IndexSequence, Tensor)> {
    let idx = nearest_codes(codebook, latents)?;
    let mut data = Vec::with_capacity(idx.len() * codebook.cols());
    for &i in &idx {
        data.extend_from_slice(codebook.row(i));
    }
    let q = Tensor::new(vec![idx.len(), codebook.cols()], data)?;
    Ok((IndexSequence::new(idx, codebook.rows())?, q))
}

#[derive(Debug, Clone)]
struct StreamNet {
    stream: Stream,
    enc_in: Conv1d,
    enc_down: Vec<Conv1d>,
    enc_out: Conv1d,
    codebook: ParamId,
    dec_in: Conv1d,
    dec_up: Vec<ConvTranspose1d>,
    dec_out: Conv1d,
}

impl StreamNet {
    fn new(store: &mut ParamStore, stream: Stream, cfg: &VqVaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, c) = (stream.width(), cfg.channels);
        let name = stream.name();
        let enc_in = Conv1d::new(store, &format!("{name}.enc.in"), w, c, 3, 1, 1, rng);
        let enc_down = (0..cfg.levels())
            .map(|i| Conv1d::new(store, &format!("{name}.enc.down{i}"), c, c, 3, 2, 1, rng))
            .collect();
        let enc_out = Conv1d::new(store, &format!("{name}.enc.out"), c, c, 3, 1, 1, rng);
        let codebook = store.add_init(format!("{name}.codebook"), &[cfg.codebook_size, c], Init::Uniform(0.1), rng);
        let dec_in = Conv1d::new(store, &format!("{name}.dec.in"), c, c, 3, 1, 1, rng);
        let dec_up = (0..cfg.levels())
            .map(|i| ConvTranspose1d::new(store, &format!("{name}.dec.up{i}"), c, c, 4, 2, 1, rng))
            .collect();
        let dec_out = Conv1d::new(store, &format!("{name}.dec.out"), c, w, 3, 1, 1, rng);
        Self {
            stream,
            enc_in,
            enc_down,
            enc_out,
            codebook,
            dec_in,
            dec_up,
            dec_out,
        }
    }

    fn encode(&self, t: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.enc_in.forward(t, p, x)?;
        let mut h = t.gelu(h);
        for conv in &self.enc_down {
            let y = conv.forward(t, p, h)?;
            h = t.gelu(y);
        }
        self.enc_out.forward(t, p, h)
    }

    fn decode(&self, t: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let h = self.dec_in.forward(t, p, z)?;
        let mut h = t.gelu(h);
        for up in &self.dec_up {
            let y = up.forward(t, p, h)?;
            h = t.gelu(y);
        }
        self.dec_out.forward(t, p, h)
    }
}

/// Loss terms of one stream as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct StreamLossVars {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct VqLossVars {
    pub hand: StreamLossVars,
    pub body: StreamLossVars,
    pub total: Var,
}

/// Loss component values, summed over both streams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLossParts {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    /// `reconstruction + codebook + β·commitment`
    pub total: f64,
}

impl VqLossParts {
    pub fn from_vars(tape: &Tape, v: &VqLossVars) -> Self {
        let get = |x: Var| tape.value(x).item();
        Self {
            reconstruction: get(v.hand.reconstruction) + get(v.body.reconstruction),
            codebook: get(v.hand.codebook) + get(v.body.codebook),
            commitment: get(v.hand.commitment) + get(v.body.commitment),
            total: get(v.total),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.codebook.is_finite() && self.commitment.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Hyper {
    config: VqVaeConfig,
    seed: u64,
}

#[derive(Debug, Clone)]
pub struct VqVaeModel {
    pub config: VqVaeConfig,
    pub seed: u64,
    pub store: ParamStore,
    /// Digest of the training run (configs, seed, data) that produced the weights.
    pub training_digest: String,
    hand: StreamNet,
    body: StreamNet,
}

impl VqVaeModel {
    pub fn new(config: VqVaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hand = StreamNet::new(&mut store, Stream::Hand, &config, &mut rng);
        let body = StreamNet::new(&mut store, Stream::Body, &config, &mut rng);
        Ok(Self {
            config,
            seed,
            store,
            training_digest: String::new(),
            hand,
            body,
        })
    }

    fn net(&self, stream: Stream) -> &StreamNet {
        match stream {
            Stream::Hand => &self.hand,
            Stream::Body => &self.body,
        }
    }

    pub fn codebook_param(&self, stream: Stream) -> ParamId {
        self.net(stream).codebook
    }

    /// `M×C` codebook of a stream.
    pub fn codebook(&self, stream: Stream) -> &Tensor {
        self.store.get(self.net(stream).codebook)
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    /// Encoder parameter ids (inputs to the codebook-term stop-gradient test).
    pub fn encoder_params(&self, stream: Stream) -> Vec<ParamId> {
        let n = self.net(stream);
        let prefix = format!("{}.enc.", n.stream.name());
        self.store.ids().filter(|&id| self.store.name(id).starts_with(&prefix)).collect()
    }

    /// Latent rows `ceil(N/d) × C` of an `N×W` stream matrix.
    pub fn encode(&self, stream: Stream, x: &Tensor) -> Result<Tensor> {
        self.check_input(stream, x)?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let z = self.net(stream).encode(&mut t, &p, xv)?;
        Ok(t.value(z).clone())
    }

    pub fn quantize(&self, stream: Stream, latents: &Tensor) -> Result<(IndexSequence, Tensor)> {
        quantize(self.codebook(stream), latents)
    }

    /// Decodes `N′×C` quantized latents to `N′·d × W`.
    pub fn decode(&self, stream: Stream, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.cols() != self.config.channels || z.rows() == 0 {
            return Err(Error::shape("vq decode", z.shape(), &[0, self.config.channels]));
        }
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let zv = t.constant(z.clone());
        let y = self.net(stream).decode(&mut t, &p, zv)?;
        Ok(t.value(y).clone())
    }

    /// Codebook entries for `indices`, `len × C`.
    pub fn lookup(&self, stream: Stream, indices: &IndexSequence) -> Result<Tensor> {
        let cb = self.codebook(stream);
        if indices.codebook_size != cb.rows() {
            return Err(Error::Lineage(format!(
                "index sequence for a {}-entry codebook used with {} entries",
                indices.codebook_size,
                cb.rows()
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * cb.cols());
        for &i in &indices.indices {
            data.extend_from_slice(cb.row(i));
        }
        Tensor::new(vec![indices.len(), cb.cols()], data)
    }

    fn check_input(&self, stream: Stream, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != stream.width() {
            return Err(Error::shape("vq encode", x.shape(), &[0, stream.width()]));
        }
        if x.rows() < self.config.downsample {
            return Err(Error::invalid(format!(
                "{} frames is shorter than the downsampling factor {}",
                x.rows(),
                self.config.downsample
            )));
        }
        Ok(())
    }

    /// Hand and body index sequences of a pose sequence.
    pub fn tokenize(&self, seq: &GestureSequence) -> Result<(IndexSequence, IndexSequence)> {
        let split = split_channels(seq);
        let (h, _) = self.quantize(Stream::Hand, &self.encode(Stream::Hand, &split.hand)?)?;
        let (b, _) = self.quantize(Stream::Body, &self.encode(Stream::Body, &split.body)?)?;
        Ok((h, b))
    }

    /// Decodes index streams into an `n`-frame pose sequence (jaw zero).
    pub fn detokenize(&self, hand: &IndexSequence, body: &IndexSequence, n: usize, fps: f64) -> Result<GestureSequence> {
        if hand.len() != body.len() {
            return Err(Error::invalid(format!("stream lengths differ: hand {} body {}", hand.len(), body.len())));
        }
        let full = hand.len() * self.config.downsample;
        if n == 0 || n > full {
            return Err(Error::invalid(format!("cannot decode {n} frames from {} steps", hand.len())));
        }
        let h = self.decode(Stream::Hand, &self.lookup(Stream::Hand, hand)?)?;
        let b = self.decode(Stream::Body, &self.lookup(Stream::Body, body)?)?;
        let split = ChannelSplit {
            hand: truncate_rows(&h, n),
            body: truncate_rows(&b, n),
            jaw: Tensor::zeros(&[n, JAW_DIM]),
        };
        concat_channels(&split, fps)
    }

    /// `decode(quantize(encode(x)))` for both streams, jaw zero-filled.
    pub fn reconstruct(&self, seq: &GestureSequence) -> Result<GestureSequence> {
        let (h, b) = self.tokenize(seq)?;
        self.detokenize(&h, &b, seq.len(), seq.fps())
    }

    fn stream_loss(&self, t: &mut Tape, p: &Bound, stream: Stream, x: &Tensor) -> Result<StreamLossVars> {
        self.check_input(stream, x)?;
        let net = self.net(stream);
        let n = x.rows();
        let xv = t.constant(x.clone());
        let z_e = net.encode(t, p, xv)?;
        let idx = nearest_codes(t.value(p[net.codebook]), t.value(z_e))?;
        let z_q = t.gather_rows(p[net.codebook], &idx)?;

        let sg_e = t.stop_gradient(z_e);
        let codebook = self.distance(t, sg_e, z_q)?;
        let sg_q = t.stop_gradient(z_q);
        let commitment = self.distance(t, z_e, sg_q)?;

        // straight-through: forward value z_q, gradient of identity into z_e
        let delta = t.sub(z_q, z_e)?;
        let delta = t.stop_gradient(delta);
        let z_st = t.add(z_e, delta)?;
        let y = net.decode(t, p, z_st)?;
        let y = t.slice_rows(y, 0, n)?;
        let reconstruction = t.mse(y, xv)?;
        Ok(StreamLossVars {
            reconstruction,
            codebook,
            commitment,
        })
    }

    /// Mean over rows of `‖a_r − b_r‖²` (or `‖a_r − b_r‖` without
    /// `squared_norm`; a 1e-12 offset keeps its gradient finite at 0).
    fn distance(&self, t: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let d = t.sub(a, b)?;
        let sq = t.square(d);
        let rows = t.row_sum(sq)?;
        let rows = if self.config.squared_norm {
            rows
        } else {
            let r = t.add_scalar(rows, 1e-12);
            t.sqrt(r)
        };
        Ok(t.mean(rows))
    }

    /// Builds the full training objective on `t`: per stream
    /// `L_rec + ‖sg[z_e] − z_q‖² + β‖z_e − sg[z_q]‖²`, summed over streams.
    pub fn loss_vars(&self, t: &mut Tape, p: &Bound, hand: &Tensor, body: &Tensor) -> Result<VqLossVars> {
        if hand.rows() != body.rows() {
            return Err(Error::invalid(format!(
                "hand and body streams differ in length: {} vs {}",
                hand.rows(),
                body.rows()
            )));
        }
        let h = self.stream_loss(t, p, Stream::Hand, hand)?;
        let b = self.stream_loss(t, p, Stream::Body, body)?;
        let mut terms = Vec::with_capacity(6);
        for s in [h, b] {
            terms.push(s.reconstruction);
            terms.push(s.codebook);
            terms.push(t.scale(s.commitment, self.config.beta));
        }
        let mut total = terms[0];
        for &v in &terms[1..] {
            total = t.add(total, v)?;
        }
        Ok(VqLossVars { hand: h, body: b, total })
    }

    /// Loss values for a pose sequence (no gradients).
    pub fn vq_loss(&self, seq: &GestureSequence) -> Result<VqLossParts> {
        let split = split_channels(seq);
        self.vq_loss_streams(&split.hand, &split.body)
    }

    pub fn vq_loss_streams(&self, hand: &Tensor, body: &Tensor) -> Result<VqLossParts> {
        let mut t = Tape::new();
        let p = self.store.bind(&mut t, false);
        let v = self.loss_vars(&mut t, &p, hand, body)?;
        Ok(VqLossParts::from_vars(&t, &v))
    }

    /// Digest of the architecture hyperparameters; downstream models record
    /// it to check lineage.
    pub fn config_digest(&self) -> String {
        canonical_digest(&self.config)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let hyper = Hyper {
            config: self.config.clone(),
            seed: self.seed,
        };
        Checkpoint::new(CHECKPOINT_KIND, &hyper, self.store.clone())
            .with_digest("config", self.config_digest())
            .with_digest("training", self.training_digest.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let hyper: Hyper = ck.hyper_as()?;
        let mut model = Self::new(hyper.config, hyper.seed)?;
        model.store.load_from(&ck.params)?;
        model.training_digest = ck.digests.get("training").cloned().unwrap_or_default();
        Ok(model)
    }

    /// Reconstruction RMSE over all hand and body values of `seq`.
    pub fn reconstruction_rmse(&self, seq: &GestureSequence) -> Result<f64> {
        let rec = self.reconstruct(seq)?;
        let (mut sq, mut count) = (0.0, 0usize);
        for i in 0..seq.len() {
            for (a, b) in seq.frame(i)[JAW_DIM..].iter().zip(&rec.frame(i)[JAW_DIM..]) {
                sq += (a - b) * (a - b);
                count += 1;
            }
        }
        Ok((sq / count as f64).sqrt())
    }

    /// Pairwise-distinct codebook check: smallest distance between entries.
    pub fn min_code_distance(&self, stream: Stream) -> f64 {
        let cb = self.codebook(stream);
        let mut best = f64::INFINITY;
        for i in 0..cb.rows() {
            for j in i + 1..cb.rows() {
                let d: f64 = cb.row(i).iter().zip(cb.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }
}

fn truncate_rows(x: &Tensor, n: usize) -> Tensor {
    let c = x.cols();
    Tensor::new(vec![n, c], x.data()[..n * c].to_vec()).expect("row prefix")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::make_synthetic_dataset;

    fn tiny() -> VqVaeConfig {
        VqVaeConfig {
            downsample: 4,
            channels: 8,
            codebook_size: 16,
            ..VqVaeConfig::default()
        }
    }

    #[test]
    fn encode_shape_88_frames() {
        let m = VqVaeModel::new(tiny(), 0).unwrap();
        let z = m.encode(Stream::Hand, &Tensor::zeros(&[88, HAND_DIM])).unwrap();
        assert_eq!(z.shape(), &[22, 8]);
        let y = m.decode(Stream::Hand, &z).unwrap();
        assert_eq!(y.shape(), &[88, HAND_DIM]);
    }

    #[test]
    fn constant_input_gives_constant_interior_latents() {
        let m = VqVaeModel::new(tiny(), 1).unwrap();
        let x = Tensor::full(&[64, BODY_DIM], 0.3);
        let z = m.encode(Stream::Body, &x).unwrap();
        // rows within the receptive field of the zero padding differ
        for r in 3..z.rows() - 3 {
            for c in 0..z.cols() {
                assert!((z.get2(r, c) - z.get2(3, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = VqVaeModel::new(tiny(), 0).unwrap();
        assert!(m.encode(Stream::Hand, &Tensor::zeros(&[8, BODY_DIM])).is_err());
        assert!(m.encode(Stream::Hand, &Tensor::zeros(&[3, HAND_DIM])).is_err());
        assert!(m.decode(Stream::Hand, &Tensor::zeros(&[2, 7])).is_err());
        assert!(VqVaeModel::new(VqVaeConfig { downsample: 3, ..tiny() }, 0).is_err());
        assert!(quantize(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn quantize_hand_cases() {
        let cb = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let (i, _) = quantize(&cb, &Tensor::from_rows(&[vec![0.1, 0.2]]).unwrap()).unwrap();
        assert_eq!(i.indices, vec![0]);
        let (i, q) = quantize(&cb, &Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(i.indices, vec![1]);
        assert_eq!(q.data(), &[1.0, 1.0]);
        let one = Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap();
        let (i, _) = quantize(&one, &Tensor::uniform(&[6, 2], -3.0, 3.0, &mut ChaCha8Rng::seed_from_u64(0))).unwrap();
        assert!(i.indices.iter().all(|&k| k == 0));
        // equidistant: lowest index wins
        let (i, _) = quantize(&cb, &Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(i.indices, vec![0]);
    }

    #[test]
    fn commitment_hand_case() {
        // g = [1, 0], nearest code [0, 0], perfect reconstruction by construction
        let mut t = Tape::new();
        let g = t.variable(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let z = t.variable(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let m = VqVaeModel::new(VqVaeConfig { channels: 2, ..tiny() }, 0).unwrap();
        let sg = t.stop_gradient(g);
        let cb = m.distance(&mut t, sg, z).unwrap();
        let sz = t.stop_gradient(z);
        let cm = m.distance(&mut t, g, sz).unwrap();
        assert_eq!(t.value(cb).item(), 1.0);
        assert_eq!(0.25 * t.value(cm).item(), 0.25);
    }

    #[test]
    fn tokenize_detokenize_lengths() {
        let d = make_synthetic_dataset(0, 1, 30, 1).unwrap();
        let m = VqVaeModel::new(tiny(), 2).unwrap();
        let (h, b) = m.tokenize(&d[0].sequence).unwrap();
        assert_eq!(h.len(), 8);
        assert_eq!(b.len(), 8);
        let out = m.detokenize(&h, &b, 30, 30.0).unwrap();
        assert_eq!(out.len(), 30);
        assert!(out.frame(5)[..JAW_DIM].iter().all(|&v| v == 0.0));
        assert_eq!(m.decode(Stream::Body, &m.lookup(Stream::Body, &b).unwrap()).unwrap().rows(), 32);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let m = VqVaeModel::new(tiny(), 5).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        let m2 = VqVaeModel::from_checkpoint(&back).unwrap();
        assert_eq!(m.store, m2.store);
        assert_eq!(m2.to_checkpoint().to_bytes(), bytes);
    }
}
