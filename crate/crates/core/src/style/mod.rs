//! Transformer style encoder with self-attention pooling, and t-SNE
//! tooling for inspecting the resulting style codes.

pub mod tsne;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use tsne::{embed_style_codes_tsne, render_scatter_svg, silhouette_score, TsneConfig};

use crate::error::{Error, Result};
use crate::numerics::kernels::softmax_row;
use crate::numerics::nn::{key_padding_mask, sinusoidal_positions, LayerNorm, Linear, TransformerBlock};
use crate::numerics::{Bound, Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::pose::{StyleClip, POSE_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// The first token's output is the code.
    None,
    Average,
    SelfAttention,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Pooling::None),
            "average" => Ok(Pooling::Average),
            "self-attention" => Ok(Pooling::SelfAttention),
            other => Err(Error::invalid(format!("unknown pooling `{other}` (none|average|self-attention)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleEncoderConfig {
    /// Token and code width `d_s`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `dim`.
    pub ff_mult: usize,
    pub pooling: Pooling,
    pub max_len: usize,
}

impl Default for StyleEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 8,
            heads: 4,
            ff_mult: 4,
            pooling: Pooling::SelfAttention,
            max_len: 1024,
        }
    }
}

impl StyleEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "style dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ff_mult == 0 || self.max_len == 0 {
            return Err(Error::Config("style ff_mult and max_len must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed-length style representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCode {
    pub vector: Vec<f64>,
}

impl StyleCode {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// `softmax(W_s S) Sᵀ` over the valid rows of `tokens` (`N×d`, one token per
/// row). Returns the code and the per-token weights (0 at masked rows).
pub fn attention_pool(w_s: &[f64], tokens: &Tensor, valid: &[bool]) -> Result<(StyleCode, Vec<f64>)> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if w_s.len() != d || valid.len() != n {
        return Err(Error::shape("attention_pool", tokens.shape(), &[w_s.len(), valid.len()]));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::invalid("attention pooling over an all-masked sequence"));
    }
    let mut weights: Vec<f64> = (0..n)
        .map(|i| tokens.row(i).iter().zip(w_s).map(|(a, b)| a * b).sum())
        .collect();
    softmax_row(&mut weights, Some(valid));
    let mut code = vec![0.0; d];
    for (i, &a) in weights.iter().enumerate() {
        if a != 0.0 {
            for (c, v) in code.iter_mut().zip(tokens.row(i)) {
                *c += a * v;
            }
        }
    }
    Ok((StyleCode { vector: code }, weights))
}

/// Tape result of a style-encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct StyleOutput {
    /// `1×d_s`
    pub code: Var,
    /// `N×d_s` token outputs.
    pub tokens: Var,
    /// `1×N` pooling weights (self-attention pooling only).
    pub weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct StyleEncoderModel {
    pub config: StyleEncoderConfig,
    input: Linear,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    pool_w: ParamId,
}

impl StyleEncoderModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: StyleEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let input = Linear::new(store, &format!("{name}.input"), POSE_DIM, d, true, rng);
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), d, config.heads, d * config.ff_mult, rng))
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.ln"), d, rng);
        let pool_w = store.add_init(format!("{name}.pool_w"), &[d, 1], Init::Normal(0.02), rng);
        Ok(Self {
            config,
            input,
            blocks,
            final_ln,
            pool_w,
        })
    }

    pub fn pool_weight(&self) -> ParamId {
        self.pool_w
    }

    /// `frames` is `N×156`; `valid[i] == false` marks padding.
    pub fn forward(&self, t: &mut Tape, p: &Bound, frames: &Tensor, valid: &[bool]) -> Result<StyleOutput> {
        let n = frames.rows();
        if frames.shape().len() != 2 || frames.cols() != POSE_DIM {
            return Err(Error::shape("style encoder", frames.shape(), &[0, POSE_DIM]));
        }
        if n == 0 || valid.len() != n {
            return Err(Error::invalid(format!("style clip of {n} frames with {} mask entries", valid.len())));
        }
        if n > self.config.max_len {
            return Err(Error::invalid(format!(
                "style clip of {n} frames exceeds the maximum of {}",
                self.config.max_len
            )));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::invalid("style clip has no valid frames"));
        }
        let x = t.constant(frames.clone());
        let h = self.input.forward(t, p, x)?;
        let pe = t.constant(sinusoidal_positions(n, self.config.dim));
        let mut h = t.add(h, pe)?;
        let mask = key_padding_mask(valid);
        for b in &self.blocks {
            h = b.forward(t, p, h, Some(&mask))?;
        }
        let tokens = self.final_ln.forward(t, p, h)?;
        let (code, weights) = match self.config.pooling {
            Pooling::SelfAttention => {
                let scores = t.matmul(tokens, p[self.pool_w])?;
                let scores = t.transpose(scores)?;
                let w = t.masked_softmax(scores, Some(valid.to_vec()))?;
                (t.matmul(w, tokens)?, Some(w))
            }
            Pooling::Average => {
                let count = valid.iter().filter(|&&v| v).count() as f64;
                let avg: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / count } else { 0.0 }).collect();
                let w = t.constant(Tensor::matrix(1, n, avg)?);
                (t.matmul(w, tokens)?, None)
            }
            Pooling::None => (t.slice_rows(tokens, 0, 1)?, None),
        };
        Ok(StyleOutput { code, tokens, weights })
    }

    pub fn forward_clip(&self, t: &mut Tape, p: &Bound, clip: &StyleClip) -> Result<StyleOutput> {
        let frames = clip.sequence.to_tensor();
        let valid = vec![true; frames.rows()];
        self.forward(t, p, &frames, &valid)
    }

    pub fn encode_masked(&self, store: &ParamStore, frames: &Tensor, valid: &[bool]) -> Result<StyleCode> {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let out = self.forward(&mut t, &p, frames, valid)?;
        Ok(StyleCode {
            vector: t.value(out.code).data().to_vec(),
        })
    }

    /// Style code plus per-frame pooling weights (uniform for average
    /// pooling, one-hot on frame 0 without pooling).
    pub fn encode_with_weights(&self, store: &ParamStore, clip: &StyleClip) -> Result<(StyleCode, Vec<f64>)> {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let out = self.forward_clip(&mut t, &p, clip)?;
        let n = clip.sequence.len();
        let weights = match (out.weights, self.config.pooling) {
            (Some(w), _) => t.value(w).data().to_vec(),
            (None, Pooling::Average) => vec![1.0 / n as f64; n],
            _ => (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
        };
        let code = StyleCode {
            vector: t.value(out.code).data().to_vec(),
        };
        Ok((code, weights))
    }
}

pub fn encode_style(model: &StyleEncoderModel, store: &ParamStore, clip: &StyleClip) -> Result<StyleCode> {
    let frames = clip.sequence.to_tensor();
    let valid = vec![true; frames.rows()];
    model.encode_masked(store, &frames, &valid)
}

/// `1 − cos(a, b)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Mean intra-label and inter-label distance over all pairs.
pub fn intra_inter_distance(codes: &[Vec<f64>], labels: &[String], dist: impl Fn(&[f64], &[f64]) -> f64) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            let d = dist(&codes[i], &codes[j]);
            if labels[i] == labels[j] {
                intra += d;
                ni += 1;
            } else {
                inter += d;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

/// Labelled style codes as exchanged with external tools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleCodeTable {
    pub dim: usize,
    pub rows: Vec<LabelledCode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledCode {
    pub label: String,
    pub code: Vec<f64>,
}

impl StyleCodeTable {
    pub fn new(rows: Vec<LabelledCode>) -> Result<Self> {
        let dim = rows.first().map(|r| r.code.len()).unwrap_or(0);
        if rows.iter().any(|r| r.code.len() != dim) {
            return Err(Error::invalid("style codes of differing widths"));
        }
        Ok(Self { dim, rows })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("style table serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        Self::new(t.rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{make_synthetic_dataset, GestureSequence};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(pooling: Pooling) -> (ParamStore, StyleEncoderModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = StyleEncoderConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            pooling,
            max_len: 64,
        };
        let m = StyleEncoderModel::new(&mut store, "style", cfg, &mut rng).unwrap();
        (store, m)
    }

    fn clip(n: usize) -> StyleClip {
        make_synthetic_dataset(2, 1, n.max(8), 1).unwrap().remove(0).sequence.truncated(n).map(|s| StyleClip::new("a", s).unwrap()).unwrap()
    }

    #[test]
    fn pool_hand_case() {
        let tokens = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let (s, w) = attention_pool(&[1.0], &tokens, &[true, true]).unwrap();
        let e1 = 1f64.exp();
        let e3 = 3f64.exp();
        assert!((w[0] - e1 / (e1 + e3)).abs() < 1e-12);
        assert!((s.vector[0] - (e1 + 3.0 * e3) / (e1 + e3)).abs() < 1e-12);
        assert!((s.vector[0] - 2.7616).abs() < 1e-4);
        let (s, w) = attention_pool(&[1.0], &tokens, &[true, false]).unwrap();
        assert_eq!(s.vector, vec![1.0]);
        assert_eq!(w, vec![1.0, 0.0]);
        assert!(attention_pool(&[1.0], &tokens, &[false, false]).is_err());
    }

    #[test]
    fn identical_columns_pool_to_that_column() {
        let tokens = Tensor::from_rows(&[vec![0.5, -2.0], vec![0.5, -2.0]]).unwrap();
        let (s, w) = attention_pool(&[0.3, 0.7], &tokens, &[true, true]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert_eq!(s.vector, vec![0.5, -2.0]);
    }

    #[test]
    fn single_frame_code_is_its_token() {
        let (store, m) = model(Pooling::SelfAttention);
        let c = clip(1);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let out = m.forward_clip(&mut t, &p, &c).unwrap();
        assert_eq!(t.value(out.code).data(), t.value(out.tokens).data());
    }

    #[test]
    fn zero_pool_weight_gives_mean_of_tokens() {
        let (mut store, m) = model(Pooling::SelfAttention);
        *store.get_mut(m.pool_weight()) = Tensor::zeros(&[16, 1]);
        let c = clip(10);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let out = m.forward_clip(&mut t, &p, &c).unwrap();
        let tok = t.value(out.tokens);
        for j in 0..16 {
            let mean = (0..10).map(|i| tok.get2(i, j)).sum::<f64>() / 10.0;
            assert!((t.value(out.code).data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_leaves_code_unchanged() {
        for pooling in [Pooling::SelfAttention, Pooling::Average, Pooling::None] {
            let (store, m) = model(pooling);
            let c = clip(12);
            let base = encode_style(&m, &store, &c).unwrap();
            let mut data = c.sequence.data().to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            data.extend((0..5 * POSE_DIM).map(|_| rng.random_range(-3.0..3.0)));
            let frames = Tensor::matrix(17, POSE_DIM, data).unwrap();
            let mut valid = vec![true; 12];
            valid.extend([false; 5]);
            let padded = m.encode_masked(&store, &frames, &valid).unwrap();
            for (a, b) in base.vector.iter().zip(&padded.vector) {
                assert!((a - b).abs() <= 1e-9, "{pooling:?}");
            }
        }
    }

    #[test]
    fn frame_order_matters() {
        let (store, m) = model(Pooling::SelfAttention);
        let c = clip(12);
        let base = encode_style(&m, &store, &c).unwrap();
        assert_eq!(base, encode_style(&m, &store, &c).unwrap());
        let mut rows = c.sequence.to_tensor().to_rows();
        rows.reverse();
        let flipped = GestureSequence::new(rows.concat(), 30.0).unwrap();
        let other = encode_style(&m, &store, &StyleClip::new("a", flipped).unwrap()).unwrap();
        assert_ne!(base, other);
    }

    #[test]
    fn over_length_clip_errors() {
        let (store, m) = model(Pooling::SelfAttention);
        let long = StyleClip::new("a", GestureSequence::zeros(65, 30.0).unwrap()).unwrap();
        assert!(encode_style(&m, &store, &long).is_err());
    }

    #[test]
    fn weights_are_a_distribution() {
        let (store, m) = model(Pooling::SelfAttention);
        let (_, w) = m.encode_with_weights(&store, &clip(20)).unwrap();
        assert!(w.iter().all(|&a| a >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
