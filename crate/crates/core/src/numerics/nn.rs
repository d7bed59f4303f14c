//! Parameterized layers built from tape primitives.

use rand::Rng;

use super::kernels::ConvGeom;
use super::params::{Bound, Init, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.add_init(format!("{name}.w"), &[in_dim, out_dim], Init::Xavier, rng);
        let b = bias.then(|| store.add_init(format!("{name}.b"), &[1, out_dim], Init::Zeros, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => tape.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

/// Strided 1-D convolution over time-major `[len × C_in]` input with
/// symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * in_ch;
        let a = (6.0 / (fan_in + out_ch) as f64).sqrt();
        let w = store.add_init(format!("{name}.w"), &[fan_in, out_ch], Init::Uniform(a), rng);
        let b = store.add_init(format!("{name}.b"), &[1, out_ch], Init::Zeros, rng);
        Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        ConvGeom::conv(len, self.in_ch, self.kernel, self.stride, self.pad).map(|g| g.short_len)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_ch {
            return Err(Error::shape("conv1d", &shape, &[self.in_ch]));
        }
        let geom = ConvGeom::conv(shape[0], self.in_ch, self.kernel, self.stride, self.pad)
            .ok_or_else(|| Error::invalid(format!("conv1d: {} frames shorter than kernel {}", shape[0], self.kernel)))?;
        let cols = tape.im2col(x, geom)?;
        let y = tape.matmul(cols, p[self.w])?;
        tape.add_row(y, p[self.b])
    }
}

/// Transposed 1-D convolution: output length `(len-1)·stride + kernel - 2·pad`.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    w: ParamId,
    b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        // each output frame receives kernel/stride taps
        let fan_in = in_ch * kernel / stride.max(1);
        let a = (6.0 / (fan_in + out_ch) as f64).sqrt();
        let w = store.add_init(format!("{name}.w"), &[in_ch, kernel * out_ch], Init::Uniform(a), rng);
        let b = store.add_init(format!("{name}.b"), &[1, out_ch], Init::Zeros, rng);
        Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.in_ch {
            return Err(Error::shape("conv_transpose1d", &shape, &[self.in_ch]));
        }
        let geom = ConvGeom::transposed(shape[0], self.out_ch, self.kernel, self.stride, self.pad)
            .ok_or_else(|| Error::invalid("conv_transpose1d: empty output"))?;
        let taps = tape.matmul(x, p[self.w])?;
        let y = tape.col2im(taps, geom)?;
        tape.add_row(y, p[self.b])
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            gamma: store.add_init(format!("{name}.gamma"), &[1, dim], Init::Ones, rng),
            beta: store.add_init(format!("{name}.beta"), &[1, dim], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], Self::EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            table: store.add_init(format!("{name}.table"), &[count, dim], Init::Normal(0.1), rng),
            count,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, idx: &[usize]) -> Result<Var> {
        tape.gather_rows(p[self.table], idx)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// `query: [n × dim]`, `context: [m × dim]`; `mask` is `n·m` row-major,
    /// `true` where query `i` may attend to key `j`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, query: Var, context: Var, mask: Option<&[bool]>) -> Result<Var> {
        let q = self.q.forward(tape, p, query)?;
        let k = self.k.forward(tape, p, context)?;
        let v = self.v.forward(tape, p, context)?;
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let att = tape.masked_softmax(scores, mask.map(<[bool]>::to_vec))?;
            outs.push(tape.matmul(att, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.o.forward(tape, p, cat)
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attn.forward(tape, p, h, h, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.ff1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.ff2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("positional table")
}

/// `mask[i·len + j] = j <= i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    m
}

/// Key-padding mask: every query may attend to valid keys only.
pub fn key_padding_mask(valid: &[bool]) -> Vec<bool> {
    let n = valid.len();
    let mut m = Vec::with_capacity(n * n);
    for _ in 0..n {
        m.extend_from_slice(valid);
    }
    m
}

/// Averages consecutive groups of `factor` rows (the last group may be
/// shorter): `[n × c] -> [ceil(n/factor) × c]`.
pub fn pool_rows(tape: &mut Tape, x: Var, factor: usize) -> Result<Var> {
    let n = tape.shape(x)[0];
    let out = n.div_ceil(factor);
    let mut pool = vec![0.0; out * n];
    for r in 0..out {
        let start = r * factor;
        let end = ((r + 1) * factor).min(n);
        let w = 1.0 / (end - start) as f64;
        for c in start..end {
            pool[r * n + c] = w;
        }
    }
    let pm = tape.constant(Tensor::new(vec![out, n], pool)?);
    tape.matmul(pm, x)
}
