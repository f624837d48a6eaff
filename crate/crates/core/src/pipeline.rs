//! End-to-end pipeline: configuration, stages and on-disk artifacts.
//!
//! Every stage reads the artifacts of earlier stages from the output
//! directory and writes its own, so any stage can be rerun on its own.
//!
//! | stage    | writes                                             |
//! |----------|----------------------------------------------------|
//! | synth    | `synth.hair`, `targets.bin`                        |
//! | ingest   | `strands.cgh` (and `targets.bin` from `targets`)   |
//! | cluster  | `strand_clusters.json`                             |
//! | cards    | `cards.json`, `cards.obj`, `strand_cards.bin`      |
//! | uvmap    | `uv.bin`, `textures/card_NNNN.pgm`                 |
//! | codebook | `card_clusters.json`                               |
//! | fit      | `model_soft.cghm`, `fit_trace.json`                |
//! | export   | `model.cghm`, `model.json`                         |
//! | render   | `render_NN.ppm`, `reference_NN.ppm`                |
//! | report   | `report.txt`, `report.json`                        |
//!
//! A full run also writes `manifest.json` with the configuration used.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::card::{build_card, CardConfig, CardError, HairCard};
use crate::cluster::{clusters_from_assignments, cluster_strands, ClusterError, StrandCluster};
use crate::codebook::{
    cluster_cards, color_error, export_compact, export_soft, fit_appearance, texture_feature, CodebookError,
    CompactAppearanceModel, ExportedModel, FitHyper, FitTrace, ModelShape, COLOR_OFFSET, SH_C0,
};
use crate::geom::Vec3;
use crate::gsplat::{render, strand_to_gaussians, Camera, Gaussian, GsplatError, Image, RenderOptions};
use crate::hairio::{parse_any, parse_blob, write_blob, write_hair_file, HairIoError, Hairstyle, Strand};
use crate::report::{
    curvature_error, finite_or_none, geometry_bytes, parameter_accounting, position_error, psnr, AccountingConfig,
    LogitMode, QualityReport, ReportError, SizeReport,
};
use crate::synth::{assign_patterned_colors, generate_wisp_hairstyle, AppearanceTargets, Rgb, SynthError, WispParams};
use crate::uvmap::{optimize_uv, rasterize_strand_texture, reconstruct_points, StrandUVSet, UvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    Cluster,
    Cards,
    Uvmap,
    Codebook,
    Fit,
    Export,
    Render,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Cluster,
        Stage::Cards,
        Stage::Uvmap,
        Stage::Codebook,
        Stage::Fit,
        Stage::Export,
        Stage::Render,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::Cards => "cards",
            Stage::Uvmap => "uvmap",
            Stage::Codebook => "codebook",
            Stage::Fit => "fit",
            Stage::Export => "export",
            Stage::Render => "render",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Hair(#[from] HairIoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Card(#[from] CardError),
    #[error(transparent)]
    Uv(#[from] UvError),
    #[error(transparent)]
    Codebook(#[from] CodebookError),
    #[error(transparent)]
    Gsplat(#[from] GsplatError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("{0}: {1}")]
    Json(PathBuf, serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

pub type Result<T> = std::result::Result<T, PipelineError>;
type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_wisps: usize,
    pub strands_per_wisp: usize,
    pub points_per_strand: usize,
    pub scalp_radius: f64,
    pub wisp_spread: f64,
    pub curl_amplitude: f64,
    pub curl_frequency: f64,
    pub strand_length: f64,
    pub palette: Vec<Rgb>,
    /// Color runs along each strand.
    pub segments: usize,
    /// Distinct strand color patterns.
    pub n_patterns: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let w = WispParams::default();
        Self {
            n_wisps: w.n_wisps,
            strands_per_wisp: w.strands_per_wisp,
            points_per_strand: w.points_per_strand,
            scalp_radius: w.scalp_radius,
            wisp_spread: w.wisp_spread,
            curl_amplitude: w.curl_amplitude,
            curl_frequency: w.curl_frequency,
            strand_length: w.strand_length,
            palette: vec![[0.35, 0.2, 0.1], [0.85, 0.65, 0.35], [0.6, 0.15, 0.1], [0.1, 0.08, 0.06]],
            segments: 4,
            n_patterns: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub points_per_strand: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { points_per_strand: crate::hairio::DEFAULT_POINTS_PER_STRAND }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub n_c: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { n_c: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UvConfig {
    pub iters: usize,
    pub step: f64,
    pub texture_size: usize,
}

impl Default for UvConfig {
    fn default() -> Self {
        Self {
            iters: crate::uvmap::DEFAULT_UV_ITERS,
            step: crate::uvmap::DEFAULT_UV_STEP,
            texture_size: crate::uvmap::DEFAULT_TEXTURE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub n_t: usize,
    pub k: usize,
    pub d: usize,
    pub h: usize,
    pub sh_degree: usize,
    pub feature_grid: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { n_t: 64, k: 10, d: 64, h: 8, sh_degree: 3, feature_grid: crate::codebook::DEFAULT_FEATURE_GRID }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iters: usize,
    pub step: f64,
    pub logit_step_scale: f64,
    pub lambda_o: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub gumbel_noise: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        let h = FitHyper::default();
        Self {
            iters: h.iters,
            step: h.step,
            logit_step_scale: h.logit_step_scale,
            lambda_o: h.lambda_o,
            tau_start: h.tau_start,
            tau_end: h.tau_end,
            gumbel_noise: h.gumbel_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    pub fn camera(&self) -> std::result::Result<Camera, GsplatError> {
        Camera::look_at(self.eye.into(), self.target.into(), self.up.into(), self.fov_y, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Cross-section scale `d` of the strand Gaussians.
    pub thickness: f64,
    pub opaque: bool,
    pub background: Rgb,
    /// Used for the automatic front and side views when `cameras` is empty.
    pub width: usize,
    pub height: usize,
    pub fov_y: f64,
    pub cameras: Vec<CameraSpec>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            thickness: crate::gsplat::DEFAULT_THICKNESS,
            opaque: false,
            background: [0.0; 3],
            width: 256,
            height: 256,
            fov_y: 0.8,
            cameras: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Hairstyle to ingest (`.hair` or strand blob); the synth output when
    /// absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Per-Gaussian target colors for an ingested hairstyle.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<PathBuf>,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub cluster: ClusterConfig,
    pub cards: CardConfig,
    pub uvmap: UvConfig,
    pub codebook: CodebookConfig,
    pub fit: FitConfig,
    pub render: RenderConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("cghair_out"),
            input: None,
            targets: None,
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            cluster: ClusterConfig::default(),
            cards: CardConfig::default(),
            uvmap: UvConfig::default(),
            codebook: CodebookConfig::default(),
            fit: FitConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> std::result::Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let counts = [
            ("ingest.points_per_strand", self.ingest.points_per_strand),
            ("cluster.n_c", self.cluster.n_c),
            ("cards.n_ctrl", self.cards.n_ctrl),
            ("cards.n_out", self.cards.n_out),
            ("uvmap.texture_size", self.uvmap.texture_size),
            ("codebook.n_t", self.codebook.n_t),
            ("codebook.k", self.codebook.k),
            ("codebook.d", self.codebook.d),
            ("codebook.h", self.codebook.h),
            ("codebook.feature_grid", self.codebook.feature_grid),
            ("render.width", self.render.width),
            ("render.height", self.render.height),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be at least 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err("output_dir must not be empty".into());
        }
        if self.codebook.sh_degree > 3 {
            return Err("codebook.sh_degree must be at most 3".into());
        }
        if self.codebook.feature_grid > self.uvmap.texture_size {
            return Err("codebook.feature_grid exceeds uvmap.texture_size".into());
        }
        if self.ingest.points_per_strand < 4 {
            return Err("ingest.points_per_strand must be at least 4".into());
        }
        Ok(())
    }

    fn sub_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage)
    }

    pub fn wisp_params(&self) -> WispParams {
        let s = &self.synth;
        WispParams {
            n_wisps: s.n_wisps,
            strands_per_wisp: s.strands_per_wisp,
            points_per_strand: s.points_per_strand,
            scalp_radius: s.scalp_radius,
            wisp_spread: s.wisp_spread,
            curl_amplitude: s.curl_amplitude,
            curl_frequency: s.curl_frequency,
            strand_length: s.strand_length,
            seed: self.sub_seed(0),
        }
    }

    pub fn fit_hyper(&self) -> FitHyper {
        let f = &self.fit;
        FitHyper {
            iters: f.iters,
            step: f.step,
            logit_step_scale: f.logit_step_scale,
            lambda_o: f.lambda_o,
            tau_start: f.tau_start,
            tau_end: f.tau_end,
            gumbel_noise: f.gumbel_noise,
            seed: self.sub_seed(5),
        }
    }
}

pub const SYNTH_HAIR: &str = "synth.hair";
pub const TARGETS: &str = "targets.bin";
pub const STRANDS: &str = "strands.cgh";
pub const STRAND_CLUSTERS: &str = "strand_clusters.json";
pub const CARDS: &str = "cards.json";
pub const CARDS_OBJ: &str = "cards.obj";
pub const STRAND_CARDS: &str = "strand_cards.bin";
pub const UV_SETS: &str = "uv.bin";
pub const TEXTURE_DIR: &str = "textures";
pub const CARD_CLUSTERS: &str = "card_clusters.json";
pub const MODEL_SOFT: &str = "model_soft.cghm";
pub const FIT_TRACE: &str = "fit_trace.json";
pub const MODEL: &str = "model.cghm";
pub const MODEL_MANIFEST: &str = "model.json";
pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";
pub const MANIFEST: &str = "manifest.json";

pub fn render_name(view: usize) -> String {
    format!("render_{view:02}.ppm")
}

pub fn reference_name(view: usize) -> String {
    format!("reference_{view:02}.ppm")
}

fn read(path: &Path) -> StageResult<Vec<u8>> {
    fs::read(path).map_err(|source| StageError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, bytes: &[u8]) -> StageResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| StageError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| StageError::Io { path: path.to_path_buf(), source })?;
    log::debug!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> StageResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| StageError::Json(path.to_path_buf(), e))?;
    bytes.push(b'\n');
    write(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> StageResult<T> {
    serde_json::from_slice(&read(path)?).map_err(|e| StageError::Json(path.to_path_buf(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrandClustering {
    pub n_c: usize,
    pub assignments: Vec<usize>,
}

/// Binary per-card strand UV sets: `CGUV`, u32 card count, then per card a
/// u32 set count and per set u32 strand index, u32 point count, f64 initial
/// and final loss, and per point f64 u, v, delta, u32 triangle, three f64
/// barycentrics and f64 residual. Little-endian.
pub fn write_uv_sets(cards: &[Vec<StrandUVSet>]) -> Vec<u8> {
    let mut out = b"CGUV".to_vec();
    let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    u(&mut out, cards.len());
    for sets in cards {
        u(&mut out, sets.len());
        for s in sets {
            u(&mut out, s.strand);
            u(&mut out, s.len());
            f(&mut out, s.initial_loss);
            f(&mut out, s.final_loss);
            for i in 0..s.len() {
                f(&mut out, s.uv[i][0]);
                f(&mut out, s.uv[i][1]);
                f(&mut out, s.delta[i]);
                u(&mut out, s.triangle[i]);
                s.bary[i].iter().for_each(|b| f(&mut out, *b));
                f(&mut out, s.residual[i]);
            }
        }
    }
    out
}

pub fn read_uv_sets(bytes: &[u8]) -> std::result::Result<Vec<Vec<StrandUVSet>>, String> {
    if bytes.get(..4) != Some(b"CGUV".as_slice()) {
        return Err("missing CGUV magic".into());
    }
    let mut rd = Reader { bytes, pos: 4 };
    let n_cards = rd.u32()?;
    let mut cards = Vec::with_capacity(n_cards);
    for _ in 0..n_cards {
        let n_sets = rd.u32()?;
        let mut sets = Vec::with_capacity(n_sets);
        for _ in 0..n_sets {
            let strand = rd.u32()?;
            let n = rd.u32()?;
            let initial_loss = rd.f64()?;
            let final_loss = rd.f64()?;
            let mut s = StrandUVSet {
                strand,
                uv: Vec::with_capacity(n),
                delta: Vec::with_capacity(n),
                triangle: Vec::with_capacity(n),
                bary: Vec::with_capacity(n),
                residual: Vec::with_capacity(n),
                initial_loss,
                final_loss,
            };
            for _ in 0..n {
                s.uv.push([rd.f64()?, rd.f64()?]);
                s.delta.push(rd.f64()?);
                s.triangle.push(rd.u32()?);
                s.bary.push([rd.f64()?, rd.f64()?, rd.f64()?]);
                s.residual.push(rd.f64()?);
            }
            sets.push(s);
        }
        cards.push(sets);
    }
    if rd.pos != bytes.len() {
        return Err("trailing bytes in uv file".into());
    }
    Ok(cards)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        let s = self.bytes.get(self.pos..self.pos + N).ok_or("truncated uv file")?;
        self.pos += N;
        Ok(s.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// Strand-to-card index: u32 strand count, then one u32 card index per
/// strand, little-endian.
pub fn strand_cards_bytes(cards: &[usize]) -> Vec<u8> {
    std::iter::once(cards.len()).chain(cards.iter().copied()).flat_map(|v| (v as u32).to_le_bytes()).collect()
}

pub fn parse_strand_cards(bytes: &[u8]) -> std::result::Result<Vec<usize>, String> {
    let words: Vec<usize> =
        bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize).collect();
    match words.split_first() {
        Some((&n, rest)) if bytes.len() % 4 == 0 && rest.len() == n => Ok(rest.to_vec()),
        _ => Err("malformed strand-to-card index".into()),
    }
}

/// Wavefront OBJ of all card meshes, one object per card.
pub fn cards_to_obj(cards: &[HairCard]) -> String {
    let mut out = String::new();
    let mut base = 1;
    for (i, c) in cards.iter().enumerate() {
        out += &format!("o card_{i:04}\n");
        for v in &c.mesh.vertices {
            out += &format!("v {} {} {}\n", v.x, v.y, v.z);
        }
        for uv in &c.mesh.uvs {
            out += &format!("vt {} {}\n", uv[0], uv[1]);
        }
        for n in &c.mesh.normals {
            out += &format!("vn {} {} {}\n", n.x, n.y, n.z);
        }
        for t in &c.mesh.triangles {
            let [a, b, d] = t.map(|x| x + base);
            out += &format!("f {a}/{a}/{a} {b}/{b}/{b} {d}/{d}/{d}\n");
        }
        base += c.mesh.vertices.len();
    }
    out
}

/// Loaded intermediate state shared by the later stages.
pub struct Workspace {
    pub cfg: PipelineConfig,
}

impl Workspace {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self { cfg }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    pub fn strands(&self) -> StageResult<Hairstyle> {
        Ok(parse_blob(&read(&self.path(STRANDS))?)?)
    }

    pub fn targets(&self) -> StageResult<AppearanceTargets> {
        let path = self.path(TARGETS);
        if !path.exists() {
            return Err(StageError::Invalid(format!(
                "no appearance targets at {} (run synth or set `targets`)",
                path.display()
            )));
        }
        Ok(AppearanceTargets::from_bytes(&read(&path)?)?)
    }

    pub fn clusters(&self, h: &Hairstyle) -> StageResult<Vec<StrandCluster>> {
        let c: StrandClustering = read_json(&self.path(STRAND_CLUSTERS))?;
        Ok(clusters_from_assignments(h, &c.assignments, c.n_c)?)
    }

    pub fn cards(&self) -> StageResult<Vec<HairCard>> {
        read_json(&self.path(CARDS))
    }

    pub fn uv_sets(&self) -> StageResult<Vec<Vec<StrandUVSet>>> {
        read_uv_sets(&read(&self.path(UV_SETS))?).map_err(StageError::Invalid)
    }

    pub fn model(&self, name: &str) -> StageResult<ExportedModel> {
        Ok(ExportedModel::from_bytes(&read(&self.path(name))?)?)
    }

    /// Strand index -> card index.
    pub fn strand_cards(&self, h: &Hairstyle, clusters: &[StrandCluster]) -> Vec<usize> {
        let mut out = vec![0; h.len()];
        for (card, c) in clusters.iter().enumerate() {
            for &m in &c.members {
                out[m] = card;
            }
        }
        out
    }

    /// Strands rebuilt from their card, UV coordinates and displacements.
    pub fn reconstructed(&self, cards: &[HairCard], uv: &[Vec<StrandUVSet>], n_strands: usize) -> StageResult<Vec<Vec<Vec3>>> {
        let mut out = vec![Vec::new(); n_strands];
        for (card, sets) in cards.iter().zip(uv) {
            for s in sets {
                out[s.strand] = reconstruct_points(s, card)?;
            }
        }
        Ok(out)
    }

    pub fn cameras(&self, h: &Hairstyle) -> StageResult<Vec<Camera>> {
        let r = &self.cfg.render;
        if !r.cameras.is_empty() {
            return r.cameras.iter().map(|c| c.camera().map_err(StageError::from)).collect();
        }
        let pts: Vec<Vec3> = h.strands.iter().flat_map(|s| s.points().iter().copied()).collect();
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let center = (lo + hi) * 0.5;
        let radius = pts.iter().map(|p| (p - center).norm()).fold(0.0, f64::max).max(1e-6);
        let dist = 1.1 * radius / (0.5 * r.fov_y).tan();
        [Vec3::z(), Vec3::x()]
            .iter()
            .map(|dir| Camera::look_at(center + dir * dist, center, Vec3::y(), r.fov_y, r.width, r.height).map_err(StageError::from))
            .collect()
    }
}

fn stage<T>(s: Stage, f: impl FnOnce() -> StageResult<T>) -> Result<T> {
    log::info!("stage {s}");
    f().map_err(|source| PipelineError { stage: s, source })
}

pub fn run_stage(s: Stage, cfg: &PipelineConfig) -> Result<()> {
    let ws = Workspace::new(cfg.clone());
    stage(s, || match s {
        Stage::Synth => synth(&ws),
        Stage::Ingest => ingest(&ws),
        Stage::Cluster => cluster(&ws),
        Stage::Cards => cards(&ws),
        Stage::Uvmap => uvmap(&ws),
        Stage::Codebook => codebook(&ws),
        Stage::Fit => fit(&ws),
        Stage::Export => export(&ws),
        Stage::Render => render_stage(&ws),
        Stage::Report => report(&ws),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub stages: Vec<String>,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub bytes: u64,
}

/// Every stage in order (synth only when no input is configured), then the
/// run manifest.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunManifest> {
    let stages: Vec<Stage> = Stage::ALL
        .iter()
        .copied()
        .filter(|s| *s != Stage::Synth || cfg.input.is_none())
        .collect();
    for s in &stages {
        run_stage(*s, cfg)?;
    }
    let ws = Workspace::new(cfg.clone());
    let manifest = || -> StageResult<RunManifest> {
        let mut names: Vec<String> = [
            STRANDS, TARGETS, STRAND_CLUSTERS, CARDS, CARDS_OBJ, STRAND_CARDS, UV_SETS, CARD_CLUSTERS, MODEL_SOFT, FIT_TRACE, MODEL,
            MODEL_MANIFEST, REPORT_TXT, REPORT_JSON,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let views = ws.cameras(&ws.strands()?)?.len();
        for v in 0..views {
            names.push(render_name(v));
            names.push(reference_name(v));
        }
        let artifacts = names
            .into_iter()
            .filter_map(|name| fs::metadata(ws.path(&name)).ok().map(|m| ArtifactEntry { name, bytes: m.len() }))
            .collect();
        let manifest = RunManifest {
            config: cfg.clone(),
            stages: stages.iter().map(|s| s.name().to_string()).collect(),
            artifacts,
        };
        write_json(&ws.path(MANIFEST), &manifest)?;
        Ok(manifest)
    };
    manifest().map_err(|source| PipelineError { stage: Stage::Report, source })
}

fn synth(ws: &Workspace) -> StageResult<()> {
    let cfg = &ws.cfg;
    let h = generate_wisp_hairstyle(&cfg.wisp_params())?;
    let s = &cfg.synth;
    let targets = assign_patterned_colors(&h, &s.palette, s.segments, s.n_patterns, cfg.sub_seed(1))?;
    write(&ws.path(SYNTH_HAIR), &write_hair_file(&h)?)?;
    write(&ws.path(TARGETS), &targets.to_bytes())?;
    log::info!("synthesized {} strands", h.len());
    Ok(())
}

fn ingest(ws: &Workspace) -> StageResult<()> {
    let cfg = &ws.cfg;
    let input = cfg.input.clone().unwrap_or_else(|| ws.path(SYNTH_HAIR));
    let h = parse_any(&read(&input)?)?;
    let h = h.normalized(cfg.ingest.points_per_strand)?;
    if let Some(t) = &cfg.targets {
        let bytes = read(t)?;
        let targets = AppearanceTargets::from_bytes(&bytes)?;
        if targets.strand_count() != h.len() || targets.gaussians_per_strand + 1 != cfg.ingest.points_per_strand {
            return Err(StageError::Invalid(format!(
                "targets cover {} strands x {} Gaussians, hairstyle has {} x {}",
                targets.strand_count(),
                targets.gaussians_per_strand,
                h.len(),
                cfg.ingest.points_per_strand - 1
            )));
        }
        write(&ws.path(TARGETS), &bytes)?;
    }
    write(&ws.path(STRANDS), &write_blob(&h)?)?;
    log::info!("ingested {} strands from {}", h.len(), input.display());
    Ok(())
}

fn cluster(ws: &Workspace) -> StageResult<()> {
    let h = ws.strands()?;
    let n_c = ws.cfg.cluster.n_c.min(h.len());
    let clusters = cluster_strands(&h, n_c, ws.cfg.sub_seed(2))?;
    let mut assignments = vec![0; h.len()];
    for c in &clusters {
        for &m in &c.members {
            assignments[m] = c.id;
        }
    }
    write_json(&ws.path(STRAND_CLUSTERS), &StrandClustering { n_c, assignments })?;
    log::info!("{} strand clusters", clusters.len());
    Ok(())
}

fn cards(ws: &Workspace) -> StageResult<()> {
    use rayon::prelude::*;
    let h = ws.strands()?;
    let clusters = ws.clusters(&h)?;
    let cards = clusters
        .par_iter()
        .map(|c| build_card(c, &h.strands, &ws.cfg.cards))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_json(&ws.path(CARDS), &cards)?;
    write(&ws.path(CARDS_OBJ), cards_to_obj(&cards).as_bytes())?;
    write(&ws.path(STRAND_CARDS), &strand_cards_bytes(&ws.strand_cards(&h, &clusters)))?;
    log::info!("{} cards", cards.len());
    Ok(())
}

fn uvmap(ws: &Workspace) -> StageResult<()> {
    let h = ws.strands()?;
    let clusters = ws.clusters(&h)?;
    let cards = ws.cards()?;
    let u = &ws.cfg.uvmap;
    let sets = clusters
        .iter()
        .zip(&cards)
        .map(|(c, card)| optimize_uv(c, &h.strands, card, u.iters, u.step))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write(&ws.path(UV_SETS), &write_uv_sets(&sets))?;
    for (i, s) in sets.iter().enumerate() {
        let tex = rasterize_strand_texture(s, u.texture_size, u.texture_size)?;
        let mut bytes = Vec::new();
        tex.write_pgm(&mut bytes).expect("write to memory");
        write(&ws.path(&format!("{TEXTURE_DIR}/card_{i:04}.pgm")), &bytes)?;
    }
    let worst = sets.iter().flatten().flat_map(|s| s.residual.iter()).fold(0.0, |a: f64, b| a.max(*b));
    log::info!("uv mapping done, max residual {worst:.3e}");
    Ok(())
}

fn codebook(ws: &Workspace) -> StageResult<()> {
    use rayon::prelude::*;
    let sets = ws.uv_sets()?;
    let u = &ws.cfg.uvmap;
    let grid = ws.cfg.codebook.feature_grid;
    let features = sets
        .par_iter()
        .map(|s| rasterize_strand_texture(s, u.texture_size, u.texture_size).map(|t| texture_feature(&t, grid)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let n_t = ws.cfg.codebook.n_t;
    if n_t > features.len() {
        return Err(StageError::Invalid(format!("codebook.n_t = {n_t} exceeds the {} cards", features.len())));
    }
    let clusters = cluster_cards(&features, n_t, ws.cfg.sub_seed(3))?;
    write_json(&ws.path(CARD_CLUSTERS), &clusters)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub final_tau: f64,
    pub trace: FitTrace,
}

fn fit(ws: &Workspace) -> StageResult<()> {
    let h = ws.strands()?;
    let clusters = ws.clusters(&h)?;
    let card_clusters: crate::codebook::CardClusters = read_json(&ws.path(CARD_CLUSTERS))?;
    let targets = ws.targets()?;
    let c = &ws.cfg.codebook;
    let g = ws.cfg.ingest.points_per_strand - 1;
    let shape = ModelShape { n_t: c.n_t, k: c.k, d: c.d, h: c.h, g, sh_degree: c.sh_degree };
    let model = CompactAppearanceModel::init(shape, ws.strand_cards(&h, &clusters), card_clusters.assignments, ws.cfg.sub_seed(4))?;
    let (fitted, trace) = fit_appearance(&model, &targets, &ws.cfg.fit_hyper())?;
    write(&ws.path(MODEL_SOFT), &export_soft(&fitted).to_bytes())?;
    write_json(&ws.path(FIT_TRACE), &FitSummary { final_tau: fitted.tau, trace })?;
    Ok(())
}

/// Rebuild the float-logit training model from its file (codebooks, logits
/// and decoder as stored).
pub fn model_from_soft(e: &ExportedModel) -> std::result::Result<CompactAppearanceModel, String> {
    let crate::codebook::LogitStorage::Float(logits) = &e.logits else {
        return Err("model file stores hard indices, not logits".into());
    };
    let s = e.shape;
    let f = |v: &[f32]| v.iter().map(|x| *x as f64).collect::<Vec<f64>>();
    let mut decoder = crate::codebook::DecoderMlp::zeros(s.d, s.h, s.g, s.sh_degree);
    decoder.w1 = f(&e.w1);
    decoder.b1 = f(&e.b1);
    decoder.w2 = f(&e.w2);
    decoder.b2 = f(&e.b2);
    Ok(CompactAppearanceModel {
        shape: s,
        codebooks: e
            .codebooks
            .chunks(s.k * s.d)
            .map(|c| crate::codebook::AppearanceCodebook { k: s.k, d: s.d, entries: f(c) })
            .collect(),
        logits: logits.chunks(s.k).map(f).collect(),
        strand_card: e.strand_card.iter().map(|x| *x as usize).collect(),
        card_cluster: e.card_cluster.iter().map(|x| *x as usize).collect(),
        decoder,
        opacities: e.opacities.chunks(s.g).map(f).collect(),
        tau: 1.0,
    })
}

fn export(ws: &Workspace) -> StageResult<()> {
    let soft = model_from_soft(&ws.model(MODEL_SOFT)?).map_err(StageError::Invalid)?;
    let hard = export_compact(&soft);
    write(&ws.path(MODEL), &hard.to_bytes())?;
    let mut manifest = Vec::new();
    hard.write_manifest(&mut manifest).expect("write to memory");
    manifest.push(b'\n');
    write(&ws.path(MODEL_MANIFEST), &manifest)?;
    Ok(())
}

/// Gaussians of every strand; a reconstructed strand with a degenerate
/// segment falls back to the ingested strand.
pub fn scene(
    geometry: &[Vec<Vec3>],
    fallback: &Hairstyle,
    thickness: f64,
    mut appearance: impl FnMut(usize) -> (Vec<f64>, Vec<Vec<f64>>),
) -> std::result::Result<Vec<Gaussian>, GsplatError> {
    let mut out = Vec::new();
    for (s, pts) in geometry.iter().enumerate() {
        let (opacity, sh) = appearance(s);
        let rebuilt = Strand::new(pts.clone()).ok();
        let gs = match rebuilt.map(|st| strand_to_gaussians(&st, thickness, &opacity, &sh)) {
            Some(Ok(gs)) => gs,
            Some(Err(GsplatError::ZeroLengthSegment(_))) | None => {
                strand_to_gaussians(&fallback.strands[s], thickness, &opacity, &sh)?
            }
            Some(Err(e)) => return Err(e),
        };
        out.extend(gs.gaussians);
    }
    Ok(out)
}

fn sh_rows(flat: &[f64], g: usize) -> Vec<Vec<f64>> {
    let c = flat.len() / g;
    flat.chunks(c).map(|r| r.to_vec()).collect()
}

/// Per-Gaussian coefficients of a target color: band 0 only.
pub fn target_sh(rgb: &Rgb, coeffs: usize) -> Vec<f64> {
    let mut v = vec![0.0; coeffs];
    for ch in 0..3 {
        v[ch] = (rgb[ch] - COLOR_OFFSET) / SH_C0;
    }
    v
}

fn render_stage(ws: &Workspace) -> StageResult<()> {
    let h = ws.strands()?;
    let cards = ws.cards()?;
    let uv = ws.uv_sets()?;
    let model = ws.model(MODEL)?;
    let targets = ws.targets()?;
    let geometry = ws.reconstructed(&cards, &uv, h.len())?;
    let g = model.shape.g;
    let coeffs = crate::codebook::sh_coeff_count(model.shape.sh_degree);
    let r = &ws.cfg.render;
    let ours = scene(&geometry, &h, r.thickness, |s| (model.strand_opacities(s), sh_rows(&model.strand_sh(s, 1.0), g)))?;
    let reference = scene(&geometry, &h, r.thickness, |s| {
        (vec![1.0; g], targets.colors[s].iter().map(|c| target_sh(c, coeffs)).collect())
    })?;
    let opts = RenderOptions { background: r.background, opaque: r.opaque, ..Default::default() };
    for (v, cam) in ws.cameras(&h)?.iter().enumerate() {
        for (name, gs) in [(render_name(v), &ours), (reference_name(v), &reference)] {
            let img = render(gs, cam, &opts)?;
            let mut bytes = Vec::new();
            img.write_ppm(&mut bytes).expect("write to memory");
            write(&ws.path(&name), &bytes)?;
        }
    }
    Ok(())
}

pub fn read_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err("only 8-bit P6 images are supported".into());
    }
    let w: usize = fields[1].parse().map_err(|_| "bad width")?;
    let h: usize = fields[2].parse().map_err(|_| "bad height")?;
    let data = bytes.get(pos..pos + w * h * 3).ok_or("truncated PPM data")?;
    Ok(Image {
        width: w,
        height: h,
        pixels: data.chunks(3).map(|p| p.iter().map(|c| *c as f64 / 255.0).collect::<Vec<_>>().try_into().unwrap()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub strands: usize,
    pub cards: usize,
    pub card_clusters: usize,
    /// Stored form: one entry index per strand.
    pub size_index: SizeReport,
    /// Training form: float logits.
    pub size_float: SizeReport,
    pub model_file_bytes: u64,
    pub quality: QualityReport,
    pub max_uv_residual: f64,
    pub final_fit_loss: Option<f64>,
}

fn report(ws: &Workspace) -> StageResult<()> {
    let h = ws.strands()?;
    let cards = ws.cards()?;
    let uv = ws.uv_sets()?;
    let targets = ws.targets()?;
    let hard = ws.model(MODEL)?;
    let soft = ws.model(MODEL_SOFT)?;
    let summary: FitSummary = read_json(&ws.path(FIT_TRACE))?;
    let s = hard.shape;
    let acc = AccountingConfig {
        n_s: hard.strand_count(),
        g: s.g,
        n_t: s.n_t,
        k: s.k,
        d: s.d,
        h: s.h,
        sh_degree: s.sh_degree,
        logit_mode: LogitMode::Index,
    };
    let points = h.total_points() as u64;
    let vertices: u64 = cards.iter().map(|c| c.mesh.vertices.len() as u64).sum();
    let geo = geometry_bytes(points, (hard.strand_count() * s.g) as u64, vertices);
    let size_index = parameter_accounting(&acc).with_geometry(geo);
    let size_float = parameter_accounting(&AccountingConfig { logit_mode: LogitMode::Float, ..acc }).with_geometry(geo);

    let geometry = ws.reconstructed(&cards, &uv, h.len())?;
    let rebuilt = Hairstyle::new(
        geometry
            .iter()
            .zip(&h.strands)
            .map(|(p, orig)| Strand::new(p.clone()).unwrap_or_else(|_| orig.clone()))
            .collect(),
    );
    let c = crate::codebook::sh_coeff_count(s.sh_degree);
    let mut quality = QualityReport {
        position_error: Some(position_error(&h, &rebuilt)?),
        curvature_error: Some(curvature_error(&h, &rebuilt)?),
        color_error_soft: Some(color_error(|i| soft.strand_sh(i, summary.final_tau), c, &targets)),
        color_error_hard: Some(color_error(|i| hard.strand_sh(i, 1.0), c, &targets)),
        psnr: Vec::new(),
    };
    let views = ws.cameras(&h)?.len();
    for v in 0..views {
        let (a, b) = (ws.path(&render_name(v)), ws.path(&reference_name(v)));
        if !a.exists() || !b.exists() {
            continue;
        }
        let ia = read_ppm(&read(&a)?).map_err(StageError::Invalid)?;
        let ib = read_ppm(&read(&b)?).map_err(StageError::Invalid)?;
        quality.psnr.push(finite_or_none(psnr(&ia, &ib)?));
    }
    let max_uv_residual = uv.iter().flatten().flat_map(|s| s.residual.iter()).fold(0.0, |a: f64, b| a.max(*b));
    let rep = PipelineReport {
        strands: h.len(),
        cards: cards.len(),
        card_clusters: s.n_t,
        size_index,
        size_float,
        model_file_bytes: hard.to_bytes().len() as u64,
        quality,
        max_uv_residual,
        final_fit_loss: summary.trace.final_loss(),
    };
    write_json(&ws.path(REPORT_JSON), &rep)?;
    write(&ws.path(REPORT_TXT), report_text(&rep).as_bytes())?;
    Ok(())
}

pub fn report_text(r: &PipelineReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "strands {}  cards {}  card clusters {}", r.strands, r.cards, r.card_clusters);
    let _ = writeln!(out, "\n== stored model (entry indices) ==");
    out += &r.size_index.to_table();
    let _ = writeln!(out, "\n== training model (float logits) ==");
    out += &r.size_float.to_table();
    let _ = writeln!(out, "\nmodel file bytes {}", r.model_file_bytes);
    let _ = writeln!(out, "\n== quality ==");
    out += &r.quality.to_table();
    let _ = writeln!(out, "{:<26} {:>14.6e}", "max uv residual", r.max_uv_residual);
    out
}

/// Load a config file (defaults when absent) and apply a seed override.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> std::result::Result<PipelineConfig, String> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}
