//! Deterministic synthetic hairstyles and per-Gaussian target colors.
//!
//! A wisp is a guide curve rooted on the upper half of a spherical scalp
//! (`+y` is up). The guide is a cubic polynomial in the normalized strand
//! parameter plus a sinusoidal curl whose amplitude ramps up from the root.
//! Each strand of the wisp is the guide plus a smooth offset `a + t * b` with
//! `|a|, |b| <= spread / 4`, so corresponding points of any two strands in a
//! wisp are at most `wisp_spread` apart.
//!
//! Target sidecar file (`targets.bin`):
//!
//! ```text
//! u32 strand count, u32 gaussians per strand,
//! f32 r, g, b per Gaussian, strand after strand
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{orthonormal_basis, Vec3};
use crate::hairio::{Hairstyle, Strand};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid wisp parameters: {0}")]
    InvalidParams(&'static str),
    #[error("empty palette or zero segments")]
    InvalidColoring,
    #[error("target file truncated or malformed")]
    BadTargetFile,
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WispParams {
    pub n_wisps: usize,
    pub strands_per_wisp: usize,
    pub points_per_strand: usize,
    pub scalp_radius: f64,
    pub wisp_spread: f64,
    pub curl_amplitude: f64,
    /// Curl cycles per unit length. Large values relative to the strand
    /// speed give looping (trochoid) strands that no strip card can follow.
    pub curl_frequency: f64,
    pub strand_length: f64,
    pub seed: u64,
}

impl Default for WispParams {
    fn default() -> Self {
        Self {
            n_wisps: 20,
            strands_per_wisp: 100,
            points_per_strand: 100,
            scalp_radius: 0.1,
            wisp_spread: 0.01,
            curl_amplitude: 0.01,
            curl_frequency: 6.0,
            strand_length: 0.25,
            seed: 1,
        }
    }
}

impl WispParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_wisps == 0 || self.strands_per_wisp == 0 {
            return Err(SynthError::InvalidParams("counts must be at least 1"));
        }
        if self.points_per_strand < 2 {
            return Err(SynthError::InvalidParams("strands need at least 2 points"));
        }
        if !(self.scalp_radius > 0.0 && self.wisp_spread > 0.0 && self.strand_length > 0.0) {
            return Err(SynthError::InvalidParams("radius, spread and length must be positive"));
        }
        if !(self.curl_amplitude >= 0.0 && self.curl_frequency >= 0.0) {
            return Err(SynthError::InvalidParams("curl must be non-negative"));
        }
        Ok(())
    }
}

struct Guide {
    root: Vec3,
    out: Vec3,
    e1: Vec3,
    e2: Vec3,
    lateral: [f64; 2],
    phase: f64,
}

impl Guide {
    fn eval(&self, p: &WispParams, t: f64) -> Vec3 {
        let len = p.strand_length;
        let up = Vec3::y();
        let poly = self.out * (0.45 * t + 0.1 * t * t) - up * (0.45 * t * t + 0.05 * t * t * t)
            + self.e1 * (self.lateral[0] * t * t)
            + self.e2 * (self.lateral[1] * t * t * t);
        let w = std::f64::consts::TAU * p.curl_frequency * len * t + self.phase;
        let curl = (self.e1 * (w.cos() - self.phase.cos()) + self.e2 * (w.sin() - self.phase.sin()))
            * (p.curl_amplitude * t);
        self.root + poly * len + curl
    }
}

fn disk(rng: &mut ChaCha8Rng, radius: f64, e1: &Vec3, e2: &Vec3) -> Vec3 {
    let r = radius * rng.random::<f64>().sqrt();
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    e1 * (r * a.cos()) + e2 * (r * a.sin())
}

fn ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// `n_wisps * strands_per_wisp` strands of `points_per_strand` points each.
pub fn generate_wisp_hairstyle(p: &WispParams) -> Result<Hairstyle> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let max_polar = 70f64.to_radians();
    let mut strands = Vec::with_capacity(p.n_wisps * p.strands_per_wisp);
    for _ in 0..p.n_wisps {
        let theta = rng.random_range(0.0..1.0f64).sqrt() * max_polar;
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let out = Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
        let (e1, e2) = orthonormal_basis(&out);
        let guide = Guide {
            root: out * p.scalp_radius,
            out,
            e1,
            e2,
            lateral: [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        };
        let samples: Vec<Vec3> = (0..p.points_per_strand)
            .map(|j| guide.eval(p, j as f64 / (p.points_per_strand - 1) as f64))
            .collect();
        for _ in 0..p.strands_per_wisp {
            let quarter = 0.25 * p.wisp_spread;
            let tangent_offset = disk(&mut rng, quarter, &e1, &e2);
            let mut root = (guide.root + tangent_offset).normalize() * p.scalp_radius;
            if root.y < 0.0 {
                root.y = -root.y;
            }
            let base = root - guide.root;
            let drift = ball(&mut rng, quarter);
            let n = p.points_per_strand;
            let mut pts: Vec<Vec3> = samples
                .iter()
                .enumerate()
                .map(|(j, g)| g + base + drift * (j as f64 / (n - 1) as f64))
                .collect();
            pts[0] = root;
            strands.push(Strand::new(pts).expect("finite synthetic strand"));
        }
    }
    Ok(Hairstyle::new(strands))
}

/// Per-strand, per-Gaussian RGB targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceTargets {
    pub gaussians_per_strand: usize,
    pub colors: Vec<Vec<Rgb>>,
}

impl AppearanceTargets {
    pub fn strand_count(&self) -> usize {
        self.colors.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 12 * self.gaussians_per_strand * self.colors.len());
        out.extend_from_slice(&(self.colors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.gaussians_per_strand as u32).to_le_bytes());
        for row in &self.colors {
            for c in row {
                for v in c {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 4]> {
            bytes.get(i..i + 4).map(|b| b.try_into().unwrap()).ok_or(SynthError::BadTargetFile)
        };
        let n = u32::from_le_bytes(word(0)?) as usize;
        let g = u32::from_le_bytes(word(4)?) as usize;
        if bytes.len() != 8 + 12 * n * g {
            return Err(SynthError::BadTargetFile);
        }
        let mut pos = 8;
        let mut colors = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(g);
            for _ in 0..g {
                let mut c = [0.0; 3];
                for v in &mut c {
                    *v = f32::from_le_bytes(word(pos)?) as f64;
                    pos += 4;
                }
                row.push(c);
            }
            colors.push(row);
        }
        Ok(Self { gaussians_per_strand: g, colors })
    }
}

/// Run lengths for splitting `g` Gaussians into `segments` contiguous runs:
/// the first `segments - 1` runs take `ceil(g / segments)` (or whatever is
/// left), the last run takes the remainder.
pub fn segment_runs(g: usize, segments: usize) -> Vec<usize> {
    let head = g.div_ceil(segments);
    let mut left = g;
    let mut runs = Vec::with_capacity(segments);
    for _ in 0..segments - 1 {
        let r = head.min(left);
        runs.push(r);
        left -= r;
    }
    runs.push(left);
    runs
}

fn paint(runs: &[usize], colors: &[Rgb]) -> Vec<Rgb> {
    runs.iter().zip(colors).flat_map(|(&n, c)| std::iter::repeat_n(*c, n)).collect()
}

/// Each strand gets `segments` runs, each run an independently drawn palette
/// color.
pub fn assign_synthetic_colors(
    h: &Hairstyle,
    palette: &[Rgb],
    segments: usize,
    seed: u64,
) -> Result<AppearanceTargets> {
    if palette.is_empty() || segments == 0 {
        return Err(SynthError::InvalidColoring);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = h.points_per_strand().unwrap_or(0).saturating_sub(1);
    let runs = segment_runs(g, segments);
    let colors = h
        .strands
        .iter()
        .map(|_| {
            let picks: Vec<Rgb> = (0..segments).map(|_| palette[rng.random_range(0..palette.len())]).collect();
            paint(&runs, &picks)
        })
        .collect();
    Ok(AppearanceTargets { gaussians_per_strand: g, colors })
}

/// Like [`assign_synthetic_colors`] but every strand picks one of
/// `n_patterns` shared run patterns, which bounds the number of distinct
/// strand appearances.
pub fn assign_patterned_colors(
    h: &Hairstyle,
    palette: &[Rgb],
    segments: usize,
    n_patterns: usize,
    seed: u64,
) -> Result<AppearanceTargets> {
    if palette.is_empty() || segments == 0 || n_patterns == 0 {
        return Err(SynthError::InvalidColoring);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = h.points_per_strand().unwrap_or(0).saturating_sub(1);
    let runs = segment_runs(g, segments);
    // pattern i starts at palette color i so patterns differ when possible
    let patterns: Vec<Vec<Rgb>> = (0..n_patterns)
        .map(|i| {
            let mut picks = vec![palette[i % palette.len()]];
            picks.extend((1..segments).map(|_| palette[rng.random_range(0..palette.len())]));
            paint(&runs, &picks)
        })
        .collect();
    let colors = h.strands.iter().map(|_| patterns[rng.random_range(0..n_patterns)].clone()).collect();
    Ok(AppearanceTargets { gaussians_per_strand: g, colors })
}
