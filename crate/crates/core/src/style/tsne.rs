//! Exact t-SNE with per-point bandwidth search, early exaggeration and
//! adaptive gains, plus a silhouette score and an SVG scatter plot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            learning_rate: 200.0,
            iterations: 1000,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

fn sq_dists(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row `i` of the conditional affinities with precision `beta`; returns the
/// Shannon entropy (nats).
fn conditional_row(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let n = out.len();
    // shift by the nearest neighbour distance so exp never underflows to all zeros
    let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for j in 0..n {
        out[j] = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
        sum += out[j];
    }
    let mut h = 0.0;
    for j in 0..n {
        out[j] /= sum;
        if out[j] > 0.0 {
            h -= out[j] * out[j].ln();
        }
    }
    h
}

/// Symmetrized joint affinities `P` matching `perplexity` per point.
pub fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let d = sq_dists(x);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let di = &d[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..200 {
            let h = conditional_row(di, i, beta, &mut row);
            if (h - target).abs() < 1e-10 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        conditional_row(di, i, beta, &mut row);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// 2-D embedding of `codes`. Deterministic per `config.seed`.
pub fn embed_style_codes_tsne(codes: &[Vec<f64>], config: &TsneConfig) -> Result<Vec<[f64; 2]>> {
    let n = codes.len();
    if n < 2 {
        return Err(Error::invalid("t-SNE needs at least 2 points"));
    }
    if !(config.perplexity > 0.0) || config.perplexity >= n as f64 {
        return Err(Error::invalid(format!(
            "perplexity {} must be positive and below the point count {n}",
            config.perplexity
        )));
    }
    if codes.iter().any(|c| c.len() != codes[0].len() || c.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("t-SNE inputs must share one width and be finite"));
    }
    let p = joint_affinities(codes, config.perplexity);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    for it in 0..config.iterations {
        let exag = if it < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let momentum = if it < config.exaggeration_iters { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                zsum += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exag * p[i * n + j] - q / zsum) * q;
                g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                g[1] += 4.0 * m * (y[i][1] - y[j][1]);
            }
            grad[i] = g;
        }
        for i in 0..n {
            for k in 0..2 {
                let same = (grad[i][k] > 0.0) == (vel[i][k] > 0.0);
                gains[i][k] = if same { (gains[i][k] * 0.8).max(0.01) } else { gains[i][k] + 0.2 };
                vel[i][k] = momentum * vel[i][k] - config.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += vel[i][k];
            }
        }
        let mean = [
            y.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            y.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        ];
        for p in &mut y {
            p[0] -= mean[0];
            p[1] -= mean[1];
        }
    }
    Ok(y)
}

/// Mean silhouette coefficient of 2-D points under `labels` (Euclidean).
/// Points in singleton clusters score 0.
pub fn silhouette_score(points: &[[f64; 2]], labels: &[String]) -> Result<f64> {
    if points.len() != labels.len() || points.len() < 2 {
        return Err(Error::invalid("silhouette needs >= 2 labelled points"));
    }
    let mut uniq: Vec<&String> = labels.iter().collect();
    uniq.sort();
    uniq.dedup();
    if uniq.len() < 2 {
        return Err(Error::invalid("silhouette needs at least two labels"));
    }
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums = vec![(0.0, 0usize); uniq.len()];
        for j in 0..points.len() {
            if i == j {
                continue;
            }
            let k = uniq.binary_search(&&labels[j]).expect("label present");
            sums[k].0 += dist(&points[i], &points[j]);
            sums[k].1 += 1;
        }
        let own = uniq.binary_search(&&labels[i]).expect("label present");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|(k, s)| *k != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    Ok(total / points.len() as f64)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Standalone SVG scatter plot, one colour per label, with a legend.
pub fn render_scatter_svg(points: &[[f64; 2]], labels: &[String]) -> String {
    let (w, h, m): (f64, f64, f64) = (640.0, 480.0, 40.0);
    let xs = points.iter().map(|p| p[0]);
    let ys = points.iter().map(|p| p[1]);
    let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 3.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * m);
    let mut uniq: Vec<&String> = labels.iter().collect();
    uniq.sort();
    uniq.dedup();
    let colour = |l: &String| PALETTE[uniq.binary_search(&l).unwrap_or(0) % PALETTE.len()];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (p, l) in points.iter().zip(labels) {
        s += &format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"{}\" fill-opacity=\"0.8\"><title>{}</title></circle>\n",
            sx(p[0]),
            sy(p[1]),
            colour(l),
            escape(l)
        );
    }
    for (k, l) in uniq.iter().enumerate() {
        let y = m + 18.0 * k as f64;
        s += &format!(
            "<circle cx=\"{:.0}\" cy=\"{y:.0}\" r=\"5\" fill=\"{}\"/><text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
            w - 2.0 * m + 6.0,
            PALETTE[k % PALETTE.len()],
            w - 2.0 * m + 14.0,
            y + 4.0,
            escape(l)
        );
    }
    s + "</svg>\n"
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
