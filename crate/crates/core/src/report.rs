//! Model size accounting, compression ratios and quality metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::sh_coeff_count;
use crate::geom::discrete_curvature;
use crate::gsplat::Image;
use crate::hairio::Hairstyle;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("accounting config is missing `{0}`")]
    IncompleteConfig(&'static str),
    #[error("images differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("hairstyles differ in shape")]
    ShapeMismatch,
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub const MB: f64 = 1e6;
pub const MIB: f64 = 1_048_576.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitMode {
    /// One 32-bit float per logit.
    Float,
    /// One u32 entry index per strand.
    Index,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingConfig {
    pub n_s: usize,
    pub g: usize,
    pub n_t: usize,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub sh_degree: usize,
    pub logit_mode: LogitMode,
}

/// Accounting inputs as read from a config file, possibly incomplete.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartialAccounting {
    pub n_s: Option<usize>,
    pub g: Option<usize>,
    pub n_t: Option<usize>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub h: Option<usize>,
    pub sh_degree: Option<usize>,
    pub logit_mode: Option<LogitMode>,
}

impl PartialAccounting {
    pub fn complete(&self) -> Result<AccountingConfig> {
        Ok(AccountingConfig {
            n_s: self.n_s.ok_or(ReportError::IncompleteConfig("n_s"))?,
            g: self.g.ok_or(ReportError::IncompleteConfig("g"))?,
            n_t: self.n_t.ok_or(ReportError::IncompleteConfig("n_t"))?,
            k: self.k.ok_or(ReportError::IncompleteConfig("k"))?,
            d: self.d.ok_or(ReportError::IncompleteConfig("d"))?,
            h: self.h.ok_or(ReportError::IncompleteConfig("h"))?,
            sh_degree: self.sh_degree.ok_or(ReportError::IncompleteConfig("sh_degree"))?,
            logit_mode: self.logit_mode.ok_or(ReportError::IncompleteConfig("logit_mode"))?,
        })
    }
}

/// Byte counts of the per-strand geometry stored on the cards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometryBytes {
    pub barycentric: u64,
    pub triangle_index: u64,
    pub displacement: u64,
    pub opacity: u64,
    pub card_vertices: u64,
    pub total: u64,
}

/// Three float barycentrics, one u32 triangle index and one float
/// displacement per strand point, one float opacity per Gaussian and three
/// floats per card vertex.
pub fn geometry_bytes(points: u64, gaussians: u64, card_vertices: u64) -> GeometryBytes {
    let barycentric = points * 3 * 4;
    let triangle_index = points * 4;
    let displacement = points * 4;
    let opacity = gaussians * 4;
    let card_vertices = card_vertices * 3 * 4;
    GeometryBytes {
        barycentric,
        triangle_index,
        displacement,
        opacity,
        card_vertices,
        total: barycentric + triangle_index + displacement + opacity + card_vertices,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub config: AccountingConfig,
    pub logits_bytes: u64,
    pub codebook_bytes: u64,
    pub decoder_bytes: u64,
    pub appearance_bytes: u64,
    pub unique_bytes: u64,
    pub ratio: f64,
    pub geometry: Option<GeometryBytes>,
}

impl SizeReport {
    pub fn appearance_mb(&self) -> f64 {
        self.appearance_bytes as f64 / MB
    }

    pub fn appearance_mib(&self) -> f64 {
        self.appearance_bytes as f64 / MIB
    }

    pub fn unique_mb(&self) -> f64 {
        self.unique_bytes as f64 / MB
    }

    pub fn unique_mib(&self) -> f64 {
        self.unique_bytes as f64 / MIB
    }

    pub fn with_geometry(mut self, g: GeometryBytes) -> Self {
        self.geometry = Some(g);
        self
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mode = match self.config.logit_mode {
            LogitMode::Float => "float",
            LogitMode::Index => "index",
        };
        let mut rows: Vec<(String, u64)> = vec![
            (format!("logits ({mode})"), self.logits_bytes),
            ("codebooks".into(), self.codebook_bytes),
            ("decoder".into(), self.decoder_bytes),
            ("appearance total".into(), self.appearance_bytes),
            ("unique baseline".into(), self.unique_bytes),
        ];
        if let Some(g) = &self.geometry {
            rows.extend([
                ("geometry barycentric".into(), g.barycentric),
                ("geometry triangle index".into(), g.triangle_index),
                ("geometry displacement".into(), g.displacement),
                ("geometry opacity".into(), g.opacity),
                ("geometry card vertices".into(), g.card_vertices),
                ("geometry total".into(), g.total),
            ]);
        }
        let mut out = format!("{:<26} {:>14} {:>12} {:>12}\n", "component", "bytes", "MB", "MiB");
        for (name, b) in rows {
            out += &format!("{:<26} {:>14} {:>12.6} {:>12.6}\n", name, b, b as f64 / MB, b as f64 / MIB);
        }
        out += &format!("{:<26} {:>14.4}\n", "compression ratio", self.ratio);
        out
    }
}

/// Appearance bytes of the compact model against the per-strand baseline.
pub fn parameter_accounting(cfg: &AccountingConfig) -> SizeReport {
    let c = sh_coeff_count(cfg.sh_degree) as u64;
    let (n_s, g, n_t, k, d, h) = (cfg.n_s as u64, cfg.g as u64, cfg.n_t as u64, cfg.k as u64, cfg.d as u64, cfg.h as u64);
    let logits_bytes = match cfg.logit_mode {
        LogitMode::Float => n_s * k * 4,
        LogitMode::Index => n_s * 4,
    };
    let codebook_bytes = n_t * k * d * 4;
    let decoder_bytes = ((d + 1) * h + (h + 1) * g * c) * 4;
    let appearance_bytes = logits_bytes + codebook_bytes + decoder_bytes;
    let unique_bytes = n_s * g * c * 4;
    SizeReport {
        config: *cfg,
        logits_bytes,
        codebook_bytes,
        decoder_bytes,
        appearance_bytes,
        unique_bytes,
        ratio: unique_bytes as f64 / appearance_bytes as f64,
        geometry: None,
    }
}

/// Compression ratio from a pair of reported sizes in the same unit.
pub fn ratio_from_sizes(unique: f64, model: f64) -> f64 {
    unique / model
}

/// Peak signal-to-noise ratio with peak value 1 over all channels;
/// identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(ReportError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mut se = 0.0;
    for (p, q) in a.pixels.iter().zip(&b.pixels) {
        for ch in 0..3 {
            se += (p[ch] - q[ch]).powi(2);
        }
    }
    let mse = se / (a.pixels.len() * 3) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn check_shapes(a: &Hairstyle, b: &Hairstyle) -> Result<()> {
    if a.len() != b.len() || a.strands.iter().zip(&b.strands).any(|(x, y)| x.len() != y.len()) {
        return Err(ReportError::ShapeMismatch);
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding points.
pub fn position_error(a: &Hairstyle, b: &Hairstyle) -> Result<f64> {
    check_shapes(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.strands.iter().zip(&b.strands) {
        for (p, q) in x.points().iter().zip(y.points()) {
            sum += (p - q).norm();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean absolute difference of discrete curvature over interior points.
pub fn curvature_error(a: &Hairstyle, b: &Hairstyle) -> Result<f64> {
    check_shapes(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.strands.iter().zip(&b.strands) {
        let (ka, kb) = (discrete_curvature(x.points()), discrete_curvature(y.points()));
        for i in 1..ka.len().saturating_sub(1) {
            sum += (ka[i] - kb[i]).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Quality metrics of one pipeline run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub position_error: Option<f64>,
    pub curvature_error: Option<f64>,
    pub color_error_soft: Option<f64>,
    pub color_error_hard: Option<f64>,
    /// PSNR of each preview view; `None` stands for identical images.
    pub psnr: Vec<Option<f64>>,
}

impl QualityReport {
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        out += &format!("{:<26} {:>14}\n", "position error", fmt(self.position_error));
        out += &format!("{:<26} {:>14}\n", "curvature error", fmt(self.curvature_error));
        out += &format!("{:<26} {:>14}\n", "color error (soft)", fmt(self.color_error_soft));
        out += &format!("{:<26} {:>14}\n", "color error (hard)", fmt(self.color_error_hard));
        for (i, p) in self.psnr.iter().enumerate() {
            let v = p.map_or("inf".to_string(), |x| format!("{x:.3}"));
            out += &format!("{:<26} {:>14}\n", format!("psnr view {i} (dB)"), v);
        }
        out
    }
}

/// Map the infinite PSNR sentinel to `None` for JSON output.
pub fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
