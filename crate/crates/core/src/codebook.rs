//! Shared appearance codebooks.
//!
//! Cards are grouped by strand-texture similarity; every group owns a
//! codebook of `K` latent features of dimension `D`. A strand blends the
//! entries of its group with Gumbel-softmax weights of its own logits and a
//! globally shared MLP decodes the blended feature into spherical-harmonic
//! coefficients for each of the strand's `G` Gaussians.
//!
//! Fitting distills per-Gaussian target colors: the loss is the mean squared
//! error of the SH-DC color plus a smoothness penalty on adjacent opacities.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{kmeans, ClusterError};
use crate::synth::AppearanceTargets;
use crate::uvmap::StrandTexture;

#[derive(Debug, Error, PartialEq)]
pub enum CodebookError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("feature has dimension {got}, decoder expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no appearance targets")]
    EmptyTargets,
    #[error("targets have {got_strands} strands x {got_g} Gaussians, model has {strands} x {g}")]
    TargetShape { strands: usize, g: usize, got_strands: usize, got_g: usize },
    #[error("invalid routing: {0}")]
    Routing(String),
    #[error("invalid model shape: {0}")]
    Shape(&'static str),
    #[error("bad model file: {0}")]
    BadFile(&'static str),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

pub type Result<T> = std::result::Result<T, CodebookError>;

/// Real SH basis constant of band 0.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Offset added to the decoded color before clamping.
pub const COLOR_OFFSET: f64 = 0.5;
pub const MODEL_MAGIC: &[u8; 4] = b"CGHM";
pub const DEFAULT_FEATURE_GRID: usize = 32;

/// Coefficients per Gaussian: `(degree + 1)^2` basis functions times RGB.
pub fn sh_coeff_count(degree: usize) -> usize {
    3 * (degree + 1) * (degree + 1)
}

/// Box-downsampled, mean-centered, unit-norm texture descriptor.
pub fn texture_feature(t: &StrandTexture, grid: usize) -> Vec<f64> {
    assert!(grid >= 1 && grid <= t.width.min(t.height), "grid larger than texture");
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        let (y0, y1) = (gy * t.height / grid, (gy + 1) * t.height / grid);
        for gx in 0..grid {
            let (x0, x1) = (gx * t.width / grid, (gx + 1) * t.width / grid);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += t.get(x, y);
                }
            }
            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64);
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        out.iter_mut().for_each(|v| *v /= norm);
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardClusters {
    pub assignments: Vec<usize>,
    pub n_t: usize,
}

pub fn cluster_cards(features: &[Vec<f64>], n_t: usize, seed: u64) -> Result<CardClusters> {
    let res = kmeans(features, n_t, seed, 100, 1e-9)?;
    Ok(CardClusters { assignments: res.assignments, n_t })
}

/// `softmax((logits + noise) / tau)`.
pub fn gumbel_softmax(logits: &[f64], tau: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(CodebookError::NonPositiveTemperature(tau));
    }
    if noise.len() != logits.len() {
        return Err(CodebookError::LengthMismatch { expected: logits.len(), got: noise.len() });
    }
    Ok(softmax_into(logits, noise, tau))
}

fn softmax_into(logits: &[f64], noise: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = logits.iter().zip(noise).map(|(l, n)| (l + n) / tau).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Standard Gumbel(0, 1) samples.
pub fn gumbel_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceCodebook {
    pub k: usize,
    pub d: usize,
    /// Row-major `k x d`.
    pub entries: Vec<f64>,
}

impl AppearanceCodebook {
    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.d..(k + 1) * self.d]
    }
}

/// `sum_k weights[k] * entry_k`.
pub fn blend_codebook(weights: &[f64], cb: &AppearanceCodebook) -> Result<Vec<f64>> {
    if weights.len() != cb.k {
        return Err(CodebookError::LengthMismatch { expected: cb.k, got: weights.len() });
    }
    let mut f = vec![0.0; cb.d];
    for (k, w) in weights.iter().enumerate() {
        for (o, e) in f.iter_mut().zip(cb.entry(k)) {
            *o += w * e;
        }
    }
    Ok(f)
}

/// One hidden layer `D -> H -> G*C` with ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderMlp {
    pub d: usize,
    pub h: usize,
    pub g: usize,
    pub sh_degree: usize,
    /// Row-major `h x d`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `(g * c) x h`; row `g * c + basis * 3 + channel`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl DecoderMlp {
    pub fn zeros(d: usize, h: usize, g: usize, sh_degree: usize) -> Self {
        let out = g * sh_coeff_count(sh_degree);
        Self { d, h, g, sh_degree, w1: vec![0.0; h * d], b1: vec![0.0; h], w2: vec![0.0; out * h], b2: vec![0.0; out] }
    }

    pub fn coeffs(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn param_count(&self) -> usize {
        (self.d + 1) * self.h + (self.h + 1) * self.g * self.coeffs()
    }

    fn hidden(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.b1.clone();
        for (j, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[j * self.d..(j + 1) * self.d];
            *p += row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        }
        let act = pre.iter().map(|v| v.max(0.0)).collect();
        (pre, act)
    }

    fn output_row(&self, row: usize, act: &[f64]) -> f64 {
        let w = &self.w2[row * self.h..(row + 1) * self.h];
        self.b2[row] + w.iter().zip(act).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Per-Gaussian SH coefficients (`G * C` values, Gaussian-major).
pub fn decode_strand_appearance(f: &[f64], dec: &DecoderMlp) -> Result<Vec<f64>> {
    if f.len() != dec.d {
        return Err(CodebookError::DimensionMismatch { expected: dec.d, got: f.len() });
    }
    let (_, act) = dec.hidden(f);
    Ok((0..dec.g * dec.coeffs()).map(|r| dec.output_row(r, &act)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_t: usize,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub g: usize,
    pub sh_degree: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactAppearanceModel {
    pub shape: ModelShape,
    pub codebooks: Vec<AppearanceCodebook>,
    pub logits: Vec<Vec<f64>>,
    pub strand_card: Vec<usize>,
    pub card_cluster: Vec<usize>,
    pub decoder: DecoderMlp,
    pub opacities: Vec<Vec<f64>>,
    /// Temperature reached by the last fit.
    pub tau: f64,
}

impl CompactAppearanceModel {
    /// Random initialization: codebooks and logits Gaussian, decoder
    /// Glorot-uniform on the color (band 0) rows, higher bands and output
    /// biases zero, opacities one.
    pub fn init(shape: ModelShape, strand_card: Vec<usize>, card_cluster: Vec<usize>, seed: u64) -> Result<Self> {
        if shape.n_t == 0 || shape.k == 0 || shape.d == 0 || shape.h == 0 || shape.g == 0 {
            return Err(CodebookError::Shape("all counts must be positive"));
        }
        if let Some(c) = strand_card.iter().find(|&&c| c >= card_cluster.len()) {
            return Err(CodebookError::Routing(format!("strand routed to missing card {c}")));
        }
        if let Some(t) = card_cluster.iter().find(|&&t| t >= shape.n_t) {
            return Err(CodebookError::Routing(format!("card routed to missing cluster {t}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Normal::new(0.0, 0.01).expect("valid normal");
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let codebooks = (0..shape.n_t)
            .map(|_| AppearanceCodebook {
                k: shape.k,
                d: shape.d,
                entries: (0..shape.k * shape.d).map(|_| small.sample(&mut rng)).collect(),
            })
            .collect();
        let mut decoder = DecoderMlp::zeros(shape.d, shape.h, shape.g, shape.sh_degree);
        let a1 = (6.0 / (shape.d + shape.h) as f64).sqrt();
        decoder.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        let c = decoder.coeffs();
        let a2 = (6.0 / (shape.h + 3 * shape.g) as f64).sqrt();
        for g in 0..shape.g {
            for ch in 0..3 {
                let row = g * c + ch;
                decoder.w2[row * shape.h..(row + 1) * shape.h]
                    .iter_mut()
                    .for_each(|w| *w = rng.random_range(-a2..a2));
            }
        }
        let logits = strand_card.iter().map(|_| (0..shape.k).map(|_| unit.sample(&mut rng)).collect()).collect();
        let opacities = vec![vec![1.0; shape.g]; strand_card.len()];
        Ok(Self { shape, codebooks, logits, strand_card, card_cluster, decoder, opacities, tau: 1.0 })
    }

    pub fn strand_count(&self) -> usize {
        self.strand_card.len()
    }

    pub fn strand_cluster(&self, s: usize) -> usize {
        self.card_cluster[self.strand_card[s]]
    }

    pub fn weights(&self, s: usize, tau: f64, noise: Option<&[f64]>) -> Vec<f64> {
        let zero = vec![0.0; self.shape.k];
        softmax_into(&self.logits[s], noise.unwrap_or(&zero), tau)
    }

    /// Decoded SH coefficients of strand `s` at temperature `tau`, no noise.
    pub fn strand_sh(&self, s: usize, tau: f64) -> Vec<f64> {
        let w = self.weights(s, tau, None);
        let f = blend_codebook(&w, &self.codebooks[self.strand_cluster(s)]).expect("shape checked");
        decode_strand_appearance(&f, &self.decoder).expect("shape checked")
    }
}

/// Color of one Gaussian from its band-0 coefficients, as rendered.
pub fn dc_color(sh: &[f64], g: usize, c: usize) -> [f64; 3] {
    std::array::from_fn(|ch| (SH_C0 * sh[g * c + ch] + COLOR_OFFSET).max(0.0))
}

/// Mean absolute per-channel color error over all Gaussians.
pub fn color_error<F: Fn(usize) -> Vec<f64> + Sync>(strand_sh: F, c: usize, targets: &AppearanceTargets) -> f64 {
    let g = targets.gaussians_per_strand;
    let per: Vec<f64> = (0..targets.strand_count())
        .into_par_iter()
        .map(|s| {
            let sh = strand_sh(s);
            let mut e = 0.0;
            for (gi, t) in targets.colors[s].iter().enumerate() {
                let col = dc_color(&sh, gi, c);
                e += (0..3).map(|ch| (col[ch] - t[ch]).abs()).sum::<f64>();
            }
            e
        })
        .collect();
    per.iter().sum::<f64>() / (targets.strand_count() * g * 3).max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitHyper {
    pub iters: usize,
    /// Base step; see [`fit_appearance`] for the per-class scaling.
    pub step: f64,
    pub logit_step_scale: f64,
    pub lambda_o: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub gumbel_noise: bool,
    pub seed: u64,
}

impl Default for FitHyper {
    fn default() -> Self {
        Self {
            iters: 1000,
            step: 4.0,
            logit_step_scale: 10.0,
            lambda_o: 0.01,
            tau_start: 1.0,
            tau_end: 0.1,
            gumbel_noise: true,
            seed: 7,
        }
    }
}

impl FitHyper {
    /// Exponential decay from `tau_start` at the first iteration to
    /// `tau_end` at the last.
    pub fn tau_at(&self, it: usize) -> f64 {
        if self.iters <= 1 {
            return self.tau_start;
        }
        let t = it as f64 / (self.iters - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStep {
    pub tau: f64,
    pub before: f64,
    pub after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub steps: Vec<FitStep>,
}

impl FitTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.after)
    }
}

/// Gradient of the distillation loss, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub codebooks: Vec<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub opacities: Vec<Vec<f64>>,
}

/// Shared (non per-strand) gradient accumulated over one chunk.
struct SharedGrad {
    codebooks: Vec<Vec<f64>>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    data_loss: f64,
}

impl SharedGrad {
    fn zeros(m: &CompactAppearanceModel) -> Self {
        Self {
            codebooks: m.codebooks.iter().map(|c| vec![0.0; c.entries.len()]).collect(),
            w1: vec![0.0; m.decoder.w1.len()],
            b1: vec![0.0; m.decoder.b1.len()],
            w2: vec![0.0; m.decoder.w2.len()],
            b2: vec![0.0; m.decoder.b2.len()],
            data_loss: 0.0,
        }
    }

    fn add(&mut self, o: &SharedGrad) {
        for (a, b) in self.codebooks.iter_mut().zip(&o.codebooks) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in [(&mut self.w1, &o.w1), (&mut self.b1, &o.b1), (&mut self.w2, &o.w2), (&mut self.b2, &o.b2)] {
            a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
        }
        self.data_loss += o.data_loss;
    }
}

const CHUNK: usize = 64;

fn check_targets(m: &CompactAppearanceModel, t: &AppearanceTargets) -> Result<()> {
    if t.strand_count() == 0 || t.gaussians_per_strand == 0 {
        return Err(CodebookError::EmptyTargets);
    }
    if t.strand_count() != m.strand_count() || t.gaussians_per_strand != m.shape.g || t.colors.iter().any(|c| c.len() != m.shape.g) {
        return Err(CodebookError::TargetShape {
            strands: m.strand_count(),
            g: m.shape.g,
            got_strands: t.strand_count(),
            got_g: t.gaussians_per_strand,
        });
    }
    Ok(())
}

fn opacity_loss(m: &CompactAppearanceModel, lambda_o: f64) -> f64 {
    lambda_o * m.opacities.iter().map(|o| o.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>()).sum::<f64>()
}

fn strand_data_loss(m: &CompactAppearanceModel, s: usize, target: &[[f64; 3]], tau: f64, noise: Option<&[f64]>) -> f64 {
    let w = m.weights(s, tau, noise);
    let f = blend_codebook(&w, &m.codebooks[m.strand_cluster(s)]).expect("shape checked");
    let (_, act) = m.decoder.hidden(&f);
    let c = m.decoder.coeffs();
    let mut e = 0.0;
    for (g, t) in target.iter().enumerate() {
        for ch in 0..3 {
            let r = SH_C0 * m.decoder.output_row(g * c + ch, &act) + COLOR_OFFSET - t[ch];
            e += r * r;
        }
    }
    e
}

/// Distillation loss at temperature `tau` with optional per-strand noise.
pub fn distillation_loss(
    m: &CompactAppearanceModel,
    targets: &AppearanceTargets,
    tau: f64,
    noise: Option<&[Vec<f64>]>,
    lambda_o: f64,
) -> f64 {
    let n = m.strand_count();
    let per: Vec<f64> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&s| strand_data_loss(m, s, &targets.colors[s], tau, noise.map(|z| z[s].as_slice())))
                .sum::<f64>()
        })
        .collect();
    per.iter().sum::<f64>() / (n * m.shape.g * 3) as f64 + opacity_loss(m, lambda_o)
}

/// Loss and exact gradient. The blend weights are differentiated through the
/// softmax, without straight-through estimation.
pub fn distillation_gradient(
    m: &CompactAppearanceModel,
    targets: &AppearanceTargets,
    tau: f64,
    noise: Option<&[Vec<f64>]>,
    lambda_o: f64,
) -> (f64, Gradient) {
    let n = m.strand_count();
    let (d, h, k) = (m.shape.d, m.shape.h, m.shape.k);
    let c = m.decoder.coeffs();
    let scale = 1.0 / (n * m.shape.g * 3) as f64;
    let dec = &m.decoder;
    let idx: Vec<usize> = (0..n).collect();
    let parts: Vec<(SharedGrad, Vec<Vec<f64>>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sg = SharedGrad::zeros(m);
            let mut dlog = Vec::with_capacity(chunk.len());
            for &s in chunk {
                let cl = m.strand_cluster(s);
                let cb = &m.codebooks[cl];
                let w = m.weights(s, tau, noise.map(|z| z[s].as_slice()));
                let f = blend_codebook(&w, cb).expect("shape checked");
                let (pre, act) = dec.hidden(&f);
                let mut dact = vec![0.0; h];
                for (g, t) in targets.colors[s].iter().enumerate() {
                    for (ch, tv) in t.iter().enumerate() {
                        let row = g * c + ch;
                        let r = SH_C0 * dec.output_row(row, &act) + COLOR_OFFSET - tv;
                        sg.data_loss += r * r;
                        let dout = 2.0 * r * SH_C0 * scale;
                        sg.b2[row] += dout;
                        let wrow = &dec.w2[row * h..(row + 1) * h];
                        let grow = &mut sg.w2[row * h..(row + 1) * h];
                        for j in 0..h {
                            grow[j] += dout * act[j];
                            dact[j] += dout * wrow[j];
                        }
                    }
                }
                let mut df = vec![0.0; d];
                for j in 0..h {
                    if pre[j] <= 0.0 {
                        continue;
                    }
                    let da = dact[j];
                    sg.b1[j] += da;
                    let wrow = &dec.w1[j * d..(j + 1) * d];
                    let grow = &mut sg.w1[j * d..(j + 1) * d];
                    for i in 0..d {
                        grow[i] += da * f[i];
                        df[i] += da * wrow[i];
                    }
                }
                let gcb = &mut sg.codebooks[cl];
                let mut dpi = vec![0.0; k];
                for kk in 0..k {
                    let e = cb.entry(kk);
                    let ge = &mut gcb[kk * d..(kk + 1) * d];
                    let mut acc = 0.0;
                    for i in 0..d {
                        ge[i] += w[kk] * df[i];
                        acc += e[i] * df[i];
                    }
                    dpi[kk] = acc;
                }
                let mean: f64 = w.iter().zip(&dpi).map(|(a, b)| a * b).sum();
                dlog.push(w.iter().zip(&dpi).map(|(p, g)| p * (g - mean) / tau).collect());
            }
            (sg, dlog)
        })
        .collect();
    let mut shared = SharedGrad::zeros(m);
    let mut logits = Vec::with_capacity(n);
    for (sg, dl) in parts {
        shared.add(&sg);
        logits.extend(dl);
    }
    let opacities = m
        .opacities
        .iter()
        .map(|o| {
            let mut g = vec![0.0; o.len()];
            for i in 0..o.len().saturating_sub(1) {
                let diff = 2.0 * lambda_o * (o[i + 1] - o[i]);
                g[i + 1] += diff;
                g[i] -= diff;
            }
            g
        })
        .collect();
    let loss = shared.data_loss * scale + opacity_loss(m, lambda_o);
    (
        loss,
        Gradient {
            codebooks: shared.codebooks,
            logits,
            w1: shared.w1,
            b1: shared.b1,
            w2: shared.w2,
            b2: shared.b2,
            opacities,
        },
    )
}

/// Per-parameter step multipliers: each class is scaled by the inverse of
/// the fraction of data terms it touches (a codebook touches its cluster's
/// strands, an output row one color channel of one Gaussian, a logit one
/// strand), and logits get `logit_step_scale` on top.
struct StepScales {
    codebooks: Vec<f64>,
    logits: f64,
    output: f64,
}

fn step_scales(m: &CompactAppearanceModel, hyper: &FitHyper) -> StepScales {
    let n = m.strand_count() as f64;
    let mut counts = vec![0usize; m.shape.n_t];
    for s in 0..m.strand_count() {
        counts[m.strand_cluster(s)] += 1;
    }
    StepScales {
        codebooks: counts.iter().map(|&c| n / c.max(1) as f64).collect(),
        logits: hyper.logit_step_scale * n,
        output: (3 * m.shape.g) as f64,
    }
}

fn apply_step(m: &CompactAppearanceModel, g: &Gradient, sc: &StepScales, h: f64) -> CompactAppearanceModel {
    let mut out = m.clone();
    for ((cb, gc), s) in out.codebooks.iter_mut().zip(&g.codebooks).zip(&sc.codebooks) {
        cb.entries.iter_mut().zip(gc).for_each(|(x, d)| *x -= h * s * d);
    }
    for (l, gl) in out.logits.iter_mut().zip(&g.logits) {
        l.iter_mut().zip(gl).for_each(|(x, d)| *x -= h * sc.logits * d);
    }
    let dec = &mut out.decoder;
    for (p, gp, s) in [
        (&mut dec.w1, &g.w1, 1.0),
        (&mut dec.b1, &g.b1, 1.0),
        (&mut dec.w2, &g.w2, sc.output),
        (&mut dec.b2, &g.b2, sc.output),
    ] {
        p.iter_mut().zip(gp.iter()).for_each(|(x, d)| *x -= h * s * d);
    }
    for (o, go) in out.opacities.iter_mut().zip(&g.opacities) {
        o.iter_mut().zip(go).for_each(|(x, d)| *x = (*x - h * d).clamp(0.0, 1.0));
    }
    out
}

/// Fit codebooks, logits, decoder and opacities by gradient descent with
/// backtracking.
///
/// Every iteration draws fresh Gumbel noise (if enabled) and uses the
/// scheduled temperature; a step is accepted only if it does not increase
/// the loss under that same noise and temperature, otherwise the step is
/// halved (up to a fixed number of times). Accepted steps grow the step by
/// 1.25, capped at `hyper.step`.
pub fn fit_appearance(
    model: &CompactAppearanceModel,
    targets: &AppearanceTargets,
    hyper: &FitHyper,
) -> Result<(CompactAppearanceModel, FitTrace)> {
    check_targets(model, targets)?;
    let mut m = model.clone();
    let mut trace = FitTrace::default();
    if hyper.iters == 0 {
        return Ok((m, trace));
    }
    let scales = step_scales(&m, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut h = hyper.step;
    for it in 0..hyper.iters {
        let tau = hyper.tau_at(it);
        let noise: Option<Vec<Vec<f64>>> = hyper
            .gumbel_noise
            .then(|| (0..m.strand_count()).map(|_| gumbel_noise(&mut rng, m.shape.k)).collect());
        let noise_ref = noise.as_deref();
        let (f0, grad) = distillation_gradient(&m, targets, tau, noise_ref, hyper.lambda_o);
        let mut step = FitStep { tau, before: f0, after: f0, accepted: false };
        for _ in 0..30 {
            let cand = apply_step(&m, &grad, &scales, h);
            let f1 = distillation_loss(&cand, targets, tau, noise_ref, hyper.lambda_o);
            if f1 <= f0 {
                m = cand;
                step.after = f1;
                step.accepted = true;
                h = (h * 1.25).min(hyper.step);
                break;
            }
            h *= 0.5;
        }
        if !step.accepted {
            h = hyper.step;
        }
        log::debug!("fit iter {it}: tau {tau:.4} loss {:.6e} -> {:.6e}", step.before, step.after);
        trace.steps.push(step);
        m.tau = tau;
    }
    Ok((m, trace))
}

/// Evaluation form: each strand stores the index of its largest logit
/// (lowest index on ties) and parameters are 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedModel {
    pub shape: ModelShape,
    pub strand_card: Vec<u32>,
    pub card_cluster: Vec<u32>,
    pub codebooks: Vec<f32>,
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    pub opacities: Vec<f32>,
    pub logits: LogitStorage,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogitStorage {
    Index(Vec<u32>),
    Float(Vec<f32>),
}

impl LogitStorage {
    fn mode(&self) -> u32 {
        match self {
            LogitStorage::Index(_) => 0,
            LogitStorage::Float(_) => 1,
        }
    }
}

pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn f32s(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

fn u32s(v: &[usize]) -> Vec<u32> {
    v.iter().map(|x| *x as u32).collect()
}

fn export_with(model: &CompactAppearanceModel, logits: LogitStorage) -> ExportedModel {
    ExportedModel {
        shape: model.shape,
        strand_card: u32s(&model.strand_card),
        card_cluster: u32s(&model.card_cluster),
        codebooks: model.codebooks.iter().flat_map(|c| f32s(&c.entries)).collect(),
        w1: f32s(&model.decoder.w1),
        b1: f32s(&model.decoder.b1),
        w2: f32s(&model.decoder.w2),
        b2: f32s(&model.decoder.b2),
        opacities: model.opacities.iter().flat_map(|o| f32s(o)).collect(),
        logits,
    }
}

pub fn export_compact(model: &CompactAppearanceModel) -> ExportedModel {
    export_with(model, LogitStorage::Index(model.logits.iter().map(|l| argmax_lowest(l) as u32).collect()))
}

/// Training form with the float logits kept.
pub fn export_soft(model: &CompactAppearanceModel) -> ExportedModel {
    export_with(model, LogitStorage::Float(model.logits.iter().flat_map(|l| f32s(l)).collect()))
}

/// Byte layout of a model file; offsets are from the start of the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub magic: String,
    pub n_s: usize,
    pub g: usize,
    pub n_t: usize,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub sh_degree: usize,
    pub n_cards: usize,
    pub logit_mode: String,
    pub sh_color_offset: f64,
    pub sections: Vec<ManifestSection>,
    pub total_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSection {
    pub name: String,
    pub dtype: String,
    pub count: usize,
    pub offset: usize,
    pub bytes: usize,
}

const HEADER_WORDS: usize = 9;

impl ExportedModel {
    pub fn strand_count(&self) -> usize {
        self.strand_card.len()
    }

    fn coeffs(&self) -> usize {
        sh_coeff_count(self.shape.sh_degree)
    }

    fn sections(&self) -> Vec<(&'static str, &'static str, usize)> {
        let logits = match &self.logits {
            LogitStorage::Index(v) => ("indices", "u32", v.len()),
            LogitStorage::Float(v) => ("logits", "f32", v.len()),
        };
        vec![
            ("strand_card", "u32", self.strand_card.len()),
            ("card_cluster", "u32", self.card_cluster.len()),
            ("codebooks", "f32", self.codebooks.len()),
            ("decoder_w1", "f32", self.w1.len()),
            ("decoder_b1", "f32", self.b1.len()),
            ("decoder_w2", "f32", self.w2.len()),
            ("decoder_b2", "f32", self.b2.len()),
            ("opacities", "f32", self.opacities.len()),
            logits,
        ]
    }

    pub fn manifest(&self) -> ModelManifest {
        let mut offset = 4 + 4 * HEADER_WORDS;
        let sections = self
            .sections()
            .into_iter()
            .map(|(name, dtype, count)| {
                let s = ManifestSection { name: name.into(), dtype: dtype.into(), count, offset, bytes: 4 * count };
                offset += 4 * count;
                s
            })
            .collect();
        ModelManifest {
            magic: "CGHM".into(),
            n_s: self.strand_count(),
            g: self.shape.g,
            n_t: self.shape.n_t,
            k: self.shape.k,
            d: self.shape.d,
            h: self.shape.h,
            sh_degree: self.shape.sh_degree,
            n_cards: self.card_cluster.len(),
            logit_mode: if self.logits.mode() == 0 { "index".into() } else { "float".into() },
            sh_color_offset: COLOR_OFFSET,
            sections,
            total_bytes: offset,
        }
    }

    /// `CGHM` magic, nine u32 counts (strands, G, N_T, K, D, H, SH degree,
    /// cards, logit mode 0 = index / 1 = float), then the sections of
    /// [`ExportedModel::manifest`] in order. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.manifest().total_bytes);
        out.extend_from_slice(MODEL_MAGIC);
        let s = &self.shape;
        for v in [self.strand_count(), s.g, s.n_t, s.k, s.d, s.h, s.sh_degree, self.card_cluster.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.logits.mode().to_le_bytes());
        let put_u = |out: &mut Vec<u8>, v: &[u32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        let put_f = |out: &mut Vec<u8>, v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        put_u(&mut out, &self.strand_card);
        put_u(&mut out, &self.card_cluster);
        for v in [&self.codebooks, &self.w1, &self.b1, &self.w2, &self.b2, &self.opacities] {
            put_f(&mut out, v);
        }
        match &self.logits {
            LogitStorage::Index(v) => put_u(&mut out, v),
            LogitStorage::Float(v) => put_f(&mut out, v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 * HEADER_WORDS || &bytes[..4] != MODEL_MAGIC {
            return Err(CodebookError::BadFile("missing CGHM header"));
        }
        let mut pos = 4;
        let word = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or(CodebookError::BadFile("truncated"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
        };
        let mut hdr = [0usize; HEADER_WORDS];
        for v in hdr.iter_mut() {
            *v = word(&mut pos)? as usize;
        }
        let [n_s, g, n_t, k, d, h, sh_degree, n_cards, mode] = hdr;
        let shape = ModelShape { n_t, k, d, h, g, sh_degree };
        let c = sh_coeff_count(sh_degree);
        let read_u = |n: usize, pos: &mut usize| (0..n).map(|_| word(pos)).collect::<Result<Vec<u32>>>();
        let strand_card = read_u(n_s, &mut pos)?;
        let card_cluster = read_u(n_cards, &mut pos)?;
        let floats = |n: usize, pos: &mut usize| -> Result<Vec<f32>> {
            Ok(read_u(n, pos)?.into_iter().map(f32::from_bits).collect())
        };
        let codebooks = floats(n_t * k * d, &mut pos)?;
        let w1 = floats(h * d, &mut pos)?;
        let b1 = floats(h, &mut pos)?;
        let w2 = floats(g * c * h, &mut pos)?;
        let b2 = floats(g * c, &mut pos)?;
        let opacities = floats(n_s * g, &mut pos)?;
        let logits = match mode {
            0 => LogitStorage::Index(read_u(n_s, &mut pos)?),
            1 => LogitStorage::Float(floats(n_s * k, &mut pos)?),
            _ => return Err(CodebookError::BadFile("unknown logit mode")),
        };
        if pos != bytes.len() {
            return Err(CodebookError::BadFile("trailing bytes"));
        }
        Ok(Self { shape, strand_card, card_cluster, codebooks, w1, b1, w2, b2, opacities, logits })
    }

    pub fn write_manifest<W: Write>(&self, w: W) -> std::io::Result<()> {
        serde_json::to_writer_pretty(w, &self.manifest()).map_err(std::io::Error::other)
    }

    /// Decoded SH coefficients of strand `s`. Index storage decodes the
    /// selected entry directly; float storage uses zero-noise softmax at
    /// `tau`.
    pub fn strand_sh(&self, s: usize, tau: f64) -> Vec<f64> {
        let (k, d, h) = (self.shape.k, self.shape.d, self.shape.h);
        let cl = self.card_cluster[self.strand_card[s] as usize] as usize;
        let cb = &self.codebooks[cl * k * d..(cl + 1) * k * d];
        let f: Vec<f64> = match &self.logits {
            LogitStorage::Index(v) => {
                let e = v[s] as usize;
                cb[e * d..(e + 1) * d].iter().map(|x| *x as f64).collect()
            }
            LogitStorage::Float(v) => {
                let l: Vec<f64> = v[s * k..(s + 1) * k].iter().map(|x| *x as f64).collect();
                let w = softmax_into(&l, &vec![0.0; k], tau);
                (0..d).map(|i| (0..k).map(|j| w[j] * cb[j * d + i] as f64).sum()).collect()
            }
        };
        let act: Vec<f64> = (0..h)
            .map(|j| {
                let row = &self.w1[j * d..(j + 1) * d];
                (self.b1[j] as f64 + row.iter().zip(&f).map(|(a, b)| *a as f64 * b).sum::<f64>()).max(0.0)
            })
            .collect();
        (0..self.shape.g * self.coeffs())
            .map(|r| {
                let row = &self.w2[r * h..(r + 1) * h];
                self.b2[r] as f64 + row.iter().zip(&act).map(|(a, b)| *a as f64 * b).sum::<f64>()
            })
            .collect()
    }

    pub fn strand_opacities(&self, s: usize) -> Vec<f64> {
        let g = self.shape.g;
        self.opacities[s * g..(s + 1) * g].iter().map(|x| *x as f64).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> StrandTexture {
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                pixels.push(f(x, y));
            }
        }
        StrandTexture { width: w, height: h, pixels, strands: 1 }
    }

    #[test]
    fn feature_of_constant_texture_is_zero() {
        let t = texture(64, 64, |_, _| 0.7);
        let f = texture_feature(&t, 32);
        assert_eq!(f.len(), 1024);
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_cells_are_box_means() {
        let t = texture(8, 4, |x, y| (x * 3 + y * 7 % 5) as f64 / 40.0);
        let f = texture_feature(&t, 2);
        // independent oracle: mean of each 4x2 block, then center and scale
        let mut cells = Vec::new();
        for gy in 0..2 {
            for gx in 0..2 {
                let mut s = 0.0;
                for y in gy * 2..gy * 2 + 2 {
                    for x in gx * 4..gx * 4 + 4 {
                        s += t.get(x, y);
                    }
                }
                cells.push(s / 8.0);
            }
        }
        let m = cells.iter().sum::<f64>() / 4.0;
        let c: Vec<f64> = cells.iter().map(|v| v - m).collect();
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in f.iter().zip(&c) {
            assert!((a - b / n).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let w = gumbel_softmax(&[0.3; 5], 0.37, &[0.0; 5]).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = gumbel_softmax(&[2.0, 1.0, 0.0], 0.01, &[0.0; 3]).unwrap();
        assert!(w[0] > 1.0 - 1e-3 && w.iter().all(|v| *v > 0.0));
        assert_eq!(gumbel_softmax(&[1.0], 0.0, &[0.0]), Err(CodebookError::NonPositiveTemperature(0.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let l: Vec<f64> = (0..7).map(|_| rng.random_range(-5.0..5.0)).collect();
            let z = gumbel_noise(&mut rng, 7);
            let w = gumbel_softmax(&l, rng.random_range(0.05..3.0), &z).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn low_temperature_limit_is_one_hot() {
        let w = gumbel_softmax(&[0.2, 1.7, 1.1, -3.0], 1e-3, &[0.0; 4]).unwrap();
        assert!((w[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn blend_examples() {
        let cb = AppearanceCodebook { k: 3, d: 2, entries: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] };
        assert_eq!(blend_codebook(&[0.0, 1.0, 0.0], &cb).unwrap(), vec![3.0, 4.0]);
        let same = AppearanceCodebook { k: 3, d: 2, entries: vec![0.5, -1.5, 0.5, -1.5, 0.5, -1.5] };
        let f = blend_codebook(&[0.2, 0.3, 0.5], &same).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-15 && (f[1] + 1.5).abs() < 1e-15);
        assert_eq!(blend_codebook(&[1.0], &cb), Err(CodebookError::LengthMismatch { expected: 3, got: 1 }));
    }

    #[test]
    fn decoder_shapes_and_zero() {
        let dec = DecoderMlp::zeros(64, 16, 99, 1);
        let out = decode_strand_appearance(&vec![0.3; 64], &dec).unwrap();
        assert_eq!(out.len(), 99 * 12);
        assert!(out.iter().all(|v| *v == 0.0));
        assert_eq!(
            decode_strand_appearance(&[0.0; 3], &dec),
            Err(CodebookError::DimensionMismatch { expected: 64, got: 3 })
        );
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[5.0, 1.0, 1.0]), 0);
        assert_eq!(argmax_lowest(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn init_rejects_bad_routing() {
        let shape = ModelShape { n_t: 2, k: 3, d: 4, h: 5, g: 6, sh_degree: 0 };
        assert!(matches!(CompactAppearanceModel::init(shape, vec![0, 3], vec![0, 1], 1), Err(CodebookError::Routing(_))));
        assert!(matches!(CompactAppearanceModel::init(shape, vec![0, 1], vec![0, 2], 1), Err(CodebookError::Routing(_))));
    }

    #[test]
    fn higher_bands_stay_zero_through_fit() {
        let shape = ModelShape { n_t: 1, k: 2, d: 4, h: 4, g: 3, sh_degree: 2 };
        let m = CompactAppearanceModel::init(shape, vec![0; 5], vec![0], 3).unwrap();
        let targets = AppearanceTargets { gaussians_per_strand: 3, colors: vec![vec![[0.9, 0.1, 0.2]; 3]; 5] };
        let (fit, _) = fit_appearance(&m, &targets, &FitHyper { iters: 20, ..Default::default() }).unwrap();
        let c = fit.decoder.coeffs();
        for g in 0..3 {
            for r in 3..c {
                let row = g * c + r;
                assert_eq!(fit.decoder.b2[row], 0.0);
                assert!(fit.decoder.w2[row * 4..(row + 1) * 4].iter().all(|w| *w == 0.0));
            }
        }
    }

    #[test]
    fn model_file_round_trip_and_manifest() {
        let shape = ModelShape { n_t: 2, k: 3, d: 4, h: 5, g: 6, sh_degree: 1 };
        let m = CompactAppearanceModel::init(shape, vec![0, 1, 1], vec![1, 0], 1).unwrap();
        for e in [export_compact(&m), export_soft(&m)] {
            let bytes = e.to_bytes();
            assert_eq!(ExportedModel::from_bytes(&bytes).unwrap(), e);
            let man = e.manifest();
            assert_eq!(man.total_bytes, bytes.len());
            let last = man.sections.last().unwrap();
            assert_eq!(last.offset + last.bytes, bytes.len());
        }
        assert!(ExportedModel::from_bytes(b"NOPE").is_err());
    }

    fn random_model(seed: u64, n_s: usize) -> (CompactAppearanceModel, AppearanceTargets) {
        let shape = ModelShape { n_t: 2, k: 3, d: 8, h: 6, g: 5, sh_degree: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let strand_card: Vec<usize> = (0..n_s).map(|_| rng.random_range(0..3)).collect();
        let mut m = CompactAppearanceModel::init(shape, strand_card, vec![0, 1, 1], seed).unwrap();
        let mut jitter = |v: &mut Vec<f64>, a: f64| v.iter_mut().for_each(|x| *x = rng.random_range(-a..a));
        for cb in &mut m.codebooks {
            jitter(&mut cb.entries, 1.0);
        }
        jitter(&mut m.decoder.w1, 1.0);
        jitter(&mut m.decoder.b1, 0.5);
        jitter(&mut m.decoder.w2, 1.0);
        jitter(&mut m.decoder.b2, 0.5);
        for o in &mut m.opacities {
            jitter(o, 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let colors = (0..n_s)
            .map(|_| (0..5).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
            .collect();
        (m, AppearanceTargets { gaussians_per_strand: 5, colors })
    }

    fn flatten(m: &CompactAppearanceModel) -> Vec<Vec<f64>> {
        vec![
            m.codebooks.iter().flat_map(|c| c.entries.clone()).collect(),
            m.logits.concat(),
            m.decoder.w1.clone(),
            m.decoder.b1.clone(),
            m.decoder.w2.clone(),
            m.decoder.b2.clone(),
            m.opacities.concat(),
        ]
    }

    fn set_param(m: &mut CompactAppearanceModel, class: usize, i: usize, v: f64) {
        let d = m.shape.k * m.shape.d;
        let k = m.shape.k;
        let g = m.shape.g;
        match class {
            0 => m.codebooks[i / d].entries[i % d] = v,
            1 => m.logits[i / k][i % k] = v,
            2 => m.decoder.w1[i] = v,
            3 => m.decoder.b1[i] = v,
            4 => m.decoder.w2[i] = v,
            5 => m.decoder.b2[i] = v,
            _ => m.opacities[i / g][i % g] = v,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let (m, t) = random_model(seed, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<Vec<f64>> = (0..4).map(|_| gumbel_noise(&mut rng, 3)).collect();
            let tau = 0.7;
            let (_, g) = distillation_gradient(&m, &t, tau, Some(&noise), 0.01);
            let analytic = [
                g.codebooks.concat(),
                g.logits.concat(),
                g.w1.clone(),
                g.b1.clone(),
                g.w2.clone(),
                g.b2.clone(),
                g.opacities.concat(),
            ];
            for (class, params) in flatten(&m).iter().enumerate() {
                let mut diff = 0.0;
                let mut norm = 0.0;
                for (i, &x) in params.iter().enumerate() {
                    let h = 1e-6;
                    let mut a = m.clone();
                    let mut b = m.clone();
                    set_param(&mut a, class, i, x - h);
                    set_param(&mut b, class, i, x + h);
                    let fd = (distillation_loss(&b, &t, tau, Some(&noise), 0.01) - distillation_loss(&a, &t, tau, Some(&noise), 0.01)) / (2.0 * h);
                    diff += (fd - analytic[class][i]).powi(2);
                    norm += fd * fd;
                }
                let rel = diff.sqrt() / norm.sqrt().max(1e-12);
                assert!(rel < 1e-4, "seed {seed} class {class}: {rel}");
            }
        }
    }

    #[test]
    fn zero_iterations_return_model_unchanged() {
        let (m, t) = random_model(1, 6);
        let (fit, trace) = fit_appearance(&m, &t, &FitHyper { iters: 0, ..Default::default() }).unwrap();
        assert_eq!(fit, m);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn empty_targets_rejected() {
        let (m, _) = random_model(1, 6);
        let t = AppearanceTargets { gaussians_per_strand: 0, colors: vec![] };
        assert_eq!(fit_appearance(&m, &t, &FitHyper::default()).unwrap_err(), CodebookError::EmptyTargets);
    }

    #[test]
    fn single_entry_fits_constant_red() {
        let shape = ModelShape { n_t: 1, k: 1, d: 8, h: 8, g: 10, sh_degree: 0 };
        let m = CompactAppearanceModel::init(shape, vec![0; 20], vec![0], 2).unwrap();
        let t = AppearanceTargets { gaussians_per_strand: 10, colors: vec![vec![[1.0, 0.0, 0.0]; 10]; 20] };
        let (fit, _) = fit_appearance(&m, &t, &FitHyper { iters: 200, ..Default::default() }).unwrap();
        let err = color_error(|s| fit.strand_sh(s, fit.tau), fit.decoder.coeffs(), &t);
        assert!(err < 0.01, "{err}");
    }

    #[test]
    fn accepted_steps_never_increase_loss() {
        let (m, t) = random_model(3, 12);
        let (_, trace) = fit_appearance(&m, &t, &FitHyper { iters: 60, ..Default::default() }).unwrap();
        assert!(trace.steps.iter().all(|s| s.after <= s.before));
        let fixed = FitHyper { iters: 60, gumbel_noise: false, tau_end: 1.0, ..Default::default() };
        let (_, trace) = fit_appearance(&m, &t, &fixed).unwrap();
        for w in trace.steps.windows(2) {
            assert!(w[1].after <= w[0].after);
        }
    }

    #[test]
    fn strands_depend_only_on_their_cluster() {
        let (m, _) = random_model(4, 10);
        let mut other = m.clone();
        other.codebooks[1].entries.iter_mut().for_each(|x| *x += 3.0);
        for s in 0..10 {
            if m.strand_cluster(s) == 0 {
                assert_eq!(m.strand_sh(s, 0.5), other.strand_sh(s, 0.5));
            } else {
                assert_ne!(m.strand_sh(s, 0.5), other.strand_sh(s, 0.5));
            }
        }
    }

    #[test]
    fn hard_export_matches_low_temperature_limit() {
        let (mut m, t) = random_model(6, 10);
        // make the top logit clearly separated
        for l in &mut m.logits {
            let i = argmax_lowest(l);
            l[i] += 1.0;
        }
        let e = export_compact(&m);
        let c = m.decoder.coeffs();
        let soft = |s: usize| m.strand_sh(s, 1e-4);
        let diff: f64 = (0..10)
            .map(|s| {
                let a = soft(s);
                let b = e.strand_sh(s, 1.0);
                (0..5).map(|g| (0..3).map(|ch| (dc_color(&a, g, c)[ch] - dc_color(&b, g, c)[ch]).abs()).sum::<f64>()).sum::<f64>()
            })
            .sum::<f64>()
            / (10 * 5 * 3) as f64;
        assert!(diff < 1e-3, "{diff}");
        assert_eq!(e.to_bytes(), export_compact(&m).to_bytes());
        let _ = t;
    }

    #[test]
    fn fit_is_identical_across_thread_counts() {
        let (m, t) = random_model(8, 300);
        let hyper = FitHyper { iters: 15, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fit_appearance(&m, &t, &hyper).unwrap())
        };
        let (a, ta) = run(1);
        let (b, tb) = run(3);
        assert_eq!(export_soft(&a).to_bytes(), export_soft(&b).to_bytes());
        assert_eq!(ta, tb);
    }
}
