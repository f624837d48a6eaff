//! Hair card construction.
//!
//! A card is a strip mesh around a guide polyline `p_k`. Every guide point
//! carries a frame: tangent `t_k`, normal `n_k` (orthogonal to `t_k`) and
//! bitangent `b_k = n_k x t_k`, so `(n_k, t_k, b_k)` is a right-handed
//! orthonormal triple. Normals minimize the summed absolute distance of the
//! cluster's strand points to the card plane; the width is the largest
//! bitangent offset of any cluster point and the vertices are
//! `p_k -/+ w b_k`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::CubicBSpline;
use crate::cluster::StrandCluster;
use crate::geom::{cumulative_length, orthonormal_basis, polyline_tangents, project_on_polyline, transport, Vec3};
use crate::hairio::Strand;

#[derive(Debug, Error, PartialEq)]
pub enum CardError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("tangent {0} is not unit length")]
    NonUnitTangent(usize),
    #[error("normal {0} vanished after smoothing")]
    DegenerateAfterSmoothing(usize),
    #[error("cluster has no strands")]
    EmptyCluster,
    #[error("{0} per-segment point sets for {1} guide points")]
    SegmentCountMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, CardError>;

/// Smoothing constant of the `sqrt(x^2 + eps^2)` surrogate for `|x|`.
pub const ABS_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CardConfig {
    pub n_ctrl: usize,
    pub n_out: usize,
    pub normal_iters: usize,
    /// Initial angular step (radians) of the normal refinement.
    pub normal_step: f64,
    pub smooth_sigma: f64,
    pub w_min: f64,
}

impl Default for CardConfig {
    fn default() -> Self {
        Self { n_ctrl: 12, n_out: 16, normal_iters: 200, normal_step: 0.1, smooth_sigma: 1.0, w_min: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardMesh {
    pub vertices: Vec<Vec3>,
    /// Per-vertex card normal (`n_k` of the vertex row).
    pub normals: Vec<Vec3>,
    pub uvs: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HairCard {
    pub cluster_id: usize,
    pub guide: Vec<Vec3>,
    pub tangents: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub bitangents: Vec<Vec3>,
    pub width: f64,
    pub mesh: CardMesh,
}

impl HairCard {
    pub fn rows(&self) -> usize {
        self.guide.len()
    }
}

/// Least-squares cubic B-spline through the raw guide, sampled at `n_out`
/// uniform parameters.
pub fn fit_guide(guide_raw: &Strand, n_ctrl: usize, n_out: usize) -> Result<Vec<Vec3>> {
    if guide_raw.len() < 4 {
        return Err(CardError::TooFewPoints { needed: 4, got: guide_raw.len() });
    }
    if n_ctrl < 4 || n_ctrl > guide_raw.len() {
        return Err(CardError::TooFewPoints { needed: n_ctrl.max(4), got: guide_raw.len() });
    }
    if n_out < 2 {
        return Err(CardError::TooFewPoints { needed: 2, got: n_out });
    }
    let pts: Vec<[f64; 3]> = guide_raw.points().iter().map(|p| [p.x, p.y, p.z]).collect();
    let spline = CubicBSpline::fit(&pts, n_ctrl);
    Ok(spline.sample(n_out).into_iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
}

/// Guide index of each point: the guide point closest in arc length to the
/// point's projection onto the guide polyline.
pub fn segment_membership(guide: &[Vec3], points: &[Vec3]) -> Vec<usize> {
    let arc = cumulative_length(guide);
    points
        .iter()
        .map(|p| {
            let s = project_on_polyline(p, guide, &arc);
            let mut best = (0, f64::INFINITY);
            for (k, sk) in arc.iter().enumerate() {
                let d = (s - sk).abs();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

/// Parallel-transport an arbitrary first normal along the tangents.
pub fn initial_normals(tangents: &[Vec3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(tangents.len());
    let mut n = orthonormal_basis(&tangents[0]).0;
    out.push(n);
    for w in tangents.windows(2) {
        let moved = transport(&n, &w[0], &w[1]);
        n = (moved - w[1] * w[1].dot(&moved)).normalize();
        out.push(n);
    }
    out
}

/// Plane-distance objective `sum_k sum_{p in N_k} |(p - p_k) . n_k|`.
pub fn normal_objective(guide: &[Vec3], normals: &[Vec3], cluster_points: &[Vec<Vec3>]) -> f64 {
    cluster_points
        .iter()
        .enumerate()
        .map(|(k, set)| set.iter().map(|p| (p - guide[k]).dot(&normals[k]).abs()).sum::<f64>())
        .sum()
}

/// One guide point's plane-fitting problem in the angle of `n` within the
/// plane spanned by `e1`, `e2`.
struct AngleProblem {
    /// In-plane coordinates of the offsets `p - p_k`.
    coords: Vec<(f64, f64)>,
}

impl AngleProblem {
    fn exact(&self, theta: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        self.coords.iter().map(|(x, y)| (x * c + y * s).abs()).sum()
    }

    fn smooth(&self, theta: f64) -> (f64, f64) {
        let (s, c) = theta.sin_cos();
        let eps2 = ABS_EPSILON * ABS_EPSILON;
        let mut f = 0.0;
        let mut g = 0.0;
        for (x, y) in &self.coords {
            let r = x * c + y * s;
            let dr = -x * s + y * c;
            let root = (r * r + eps2).sqrt();
            f += root;
            g += r / root * dr;
        }
        (f, g)
    }

    fn solve(&self, iters: usize, step: f64) -> f64 {
        if self.coords.is_empty() {
            return 0.0;
        }
        // The unsmoothed objective is concave between the angles where one
        // residual vanishes, so its minimum sits at one of them. Pick the best
        // such angle (or the initial one), then polish on the surrogate.
        let mut best = (0.0, self.exact(0.0));
        for (x, y) in &self.coords {
            let theta = (-x).atan2(*y);
            let f = self.exact(theta);
            if f < best.1 {
                best = (theta, f);
            }
        }
        let scale: f64 = self.coords.iter().map(|(x, y)| x.hypot(*y)).sum::<f64>().max(f64::MIN_POSITIVE);
        let mut theta = best.0;
        let (mut f, mut g) = self.smooth(theta);
        let mut h = step;
        for _ in 0..iters {
            if g == 0.0 || h < 1e-14 {
                break;
            }
            let cand = theta - h * g / scale;
            let (fc, gc) = self.smooth(cand);
            if fc <= f {
                theta = cand;
                f = fc;
                g = gc;
                h = (h * 1.5).min(step);
            } else {
                h *= 0.5;
            }
        }
        if self.exact(theta) <= best.1 {
            theta
        } else {
            best.0
        }
    }
}

/// Minimize the plane-distance objective over normals constrained to the
/// planes orthogonal to the tangents.
///
/// Each normal is `cos(theta) e1 + sin(theta) e2` with `e1` the parallel
/// transported initial normal and `e2 = t x e1`, so the constraints hold by
/// construction. The returned objective never exceeds the objective at the
/// initial normals.
pub fn optimize_normals(
    guide: &[Vec3],
    tangents: &[Vec3],
    cluster_points: &[Vec<Vec3>],
    iters: usize,
    step: f64,
) -> Result<Vec<Vec3>> {
    if cluster_points.len() != guide.len() || tangents.len() != guide.len() {
        return Err(CardError::SegmentCountMismatch(cluster_points.len(), guide.len()));
    }
    if let Some(k) = tangents.iter().position(|t| (t.norm() - 1.0).abs() > 1e-6) {
        return Err(CardError::NonUnitTangent(k));
    }
    let init = initial_normals(tangents);
    Ok((0..guide.len())
        .map(|k| {
            let e1 = init[k];
            let e2 = tangents[k].cross(&e1);
            let problem = AngleProblem {
                coords: cluster_points[k]
                    .iter()
                    .map(|p| {
                        let q = p - guide[k];
                        (q.dot(&e1), q.dot(&e2))
                    })
                    .collect(),
            };
            let theta = problem.solve(iters, step);
            if theta == 0.0 {
                e1
            } else {
                e1 * theta.cos() + e2 * theta.sin()
            }
        })
        .collect())
}

/// Flip normals so consecutive ones agree in sign, Gaussian-filter them along
/// the guide and project back onto the planes orthogonal to the tangents.
pub fn smooth_and_orient_normals(normals: &[Vec3], tangents: &[Vec3], sigma: f64) -> Result<Vec<Vec3>> {
    let n = normals.len();
    let mut flipped = normals.to_vec();
    for k in 1..n {
        if flipped[k].dot(&flipped[k - 1]) < 0.0 {
            flipped[k] = -flipped[k];
        }
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp())
        .collect();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut acc = Vec3::zeros();
        let mut wsum = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let idx = k as isize + j as isize - radius;
            if idx < 0 || idx >= n as isize {
                continue;
            }
            acc += flipped[idx as usize] * *w;
            wsum += w;
        }
        let avg = acc / wsum;
        let t = tangents[k];
        let proj = avg - t * t.dot(&avg);
        let len = proj.norm();
        if len < 1e-8 {
            return Err(CardError::DegenerateAfterSmoothing(k));
        }
        out.push(proj / len);
    }
    Ok(out)
}

fn strip_mesh(guide: &[Vec3], normals: &[Vec3], bitangents: &[Vec3], width: f64) -> CardMesh {
    let rows = guide.len();
    let mut vertices = Vec::with_capacity(2 * rows);
    let mut vnormals = Vec::with_capacity(2 * rows);
    let mut uvs = Vec::with_capacity(2 * rows);
    for k in 0..rows {
        let v = k as f64 / (rows - 1) as f64;
        vertices.push(guide[k] - bitangents[k] * width);
        vertices.push(guide[k] + bitangents[k] * width);
        vnormals.push(normals[k]);
        vnormals.push(normals[k]);
        uvs.push([0.0, v]);
        uvs.push([1.0, v]);
    }
    let mut triangles = Vec::with_capacity(2 * (rows - 1));
    for k in 0..rows - 1 {
        let a = 2 * k;
        // front faces along +n
        triangles.push([a, a + 2, a + 1]);
        triangles.push([a + 1, a + 2, a + 3]);
    }
    CardMesh { vertices, normals: vnormals, uvs, triangles }
}

/// Build the card of one strand cluster.
pub fn build_card(cluster: &StrandCluster, strands: &[Strand], cfg: &CardConfig) -> Result<HairCard> {
    if cluster.members.is_empty() {
        return Err(CardError::EmptyCluster);
    }
    let n_ctrl = cfg.n_ctrl.min(cluster.guide.len());
    let guide = fit_guide(&cluster.guide, n_ctrl, cfg.n_out)?;
    let tangents = polyline_tangents(&guide);
    let points: Vec<Vec3> = cluster
        .members
        .iter()
        .flat_map(|&i| strands[i].points().iter().copied())
        .collect();
    let membership = segment_membership(&guide, &points);
    let mut sets = vec![Vec::new(); guide.len()];
    for (p, k) in points.iter().zip(&membership) {
        sets[*k].push(*p);
    }
    let normals = optimize_normals(&guide, &tangents, &sets, cfg.normal_iters, cfg.normal_step)?;
    let normals = smooth_and_orient_normals(&normals, &tangents, cfg.smooth_sigma)?;
    let bitangents: Vec<Vec3> = normals.iter().zip(&tangents).map(|(n, t)| n.cross(t)).collect();
    let width = card_width(&guide, &bitangents, &sets).max(cfg.w_min);
    let mesh = strip_mesh(&guide, &normals, &bitangents, width);
    Ok(HairCard { cluster_id: cluster.id, guide, tangents, normals, bitangents, width, mesh })
}

/// Largest bitangent offset `|(p - p_k) . b_k|` over all segment point sets.
pub fn card_width(guide: &[Vec3], bitangents: &[Vec3], sets: &[Vec<Vec3>]) -> f64 {
    sets.iter()
        .enumerate()
        .flat_map(|(k, set)| set.iter().map(move |p| (p - guide[k]).dot(&bitangents[k]).abs()))
        .fold(0.0, f64::max)
}
