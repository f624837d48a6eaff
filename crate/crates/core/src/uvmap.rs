//! Inverse mapping of strands onto their card and strand-texture rasterization.
//!
//! Each strand point `p` is represented by a card UV position `u` and a
//! displacement `delta` along the interpolated card normal:
//! `p_hat = sum_m lambda_m v_m + delta * n_hat`, where the `lambda_m` are the
//! barycentric weights of `u` inside its card triangle.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bspline::CubicBSpline;
use crate::card::{segment_membership, HairCard};
use crate::cluster::StrandCluster;
use crate::geom::Vec3;
use crate::hairio::Strand;

#[derive(Debug, Error, PartialEq)]
pub enum UvError {
    #[error("triangle index {0} out of range")]
    InvalidTriangleIndex(usize),
    #[error("texture resolution must be non-zero")]
    ZeroResolution,
    #[error("strand {0} not in hairstyle")]
    UnknownStrand(usize),
}

pub type Result<T> = std::result::Result<T, UvError>;

pub const DEFAULT_UV_ITERS: usize = 500;
pub const DEFAULT_UV_STEP: f64 = 0.5;
pub const DEFAULT_TEXTURE_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrandUVSet {
    pub strand: usize,
    pub uv: Vec<[f64; 2]>,
    pub delta: Vec<f64>,
    pub triangle: Vec<usize>,
    pub bary: Vec<[f64; 3]>,
    /// Per-point distance between reconstruction and input point.
    pub residual: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl StrandUVSet {
    pub fn len(&self) -> usize {
        self.uv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uv.is_empty()
    }
}

/// Triangle containing `uv` and its barycentric weights. Rows are found
/// directly from `v`; the diagonal of the row picks one of its two triangles.
pub fn locate(card: &HairCard, uv: [f64; 2]) -> (usize, [f64; 3]) {
    let rows = card.rows();
    let u = uv[0].clamp(0.0, 1.0);
    let v = uv[1].clamp(0.0, 1.0);
    let dv = 1.0 / (rows - 1) as f64;
    let k = ((v / dv).floor() as usize).min(rows - 2);
    let b = (v - k as f64 * dv) / dv;
    let tri = if u + b <= 1.0 { 2 * k } else { 2 * k + 1 };
    (tri, barycentric(card, tri, [u, v]))
}

fn barycentric(card: &HairCard, tri: usize, uv: [f64; 2]) -> [f64; 3] {
    let [i0, i1, i2] = card.mesh.triangles[tri];
    let (a, b, c) = (card.mesh.uvs[i0], card.mesh.uvs[i1], card.mesh.uvs[i2]);
    let (e1, e2) = ([b[0] - a[0], b[1] - a[1]], [c[0] - a[0], c[1] - a[1]]);
    let q = [uv[0] - a[0], uv[1] - a[1]];
    let det = e1[0] * e2[1] - e1[1] * e2[0];
    let l1 = (q[0] * e2[1] - q[1] * e2[0]) / det;
    let l2 = (e1[0] * q[1] - e1[1] * q[0]) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Derivatives of the barycentric weights of triangle `tri` w.r.t. `u` and `v`.
fn bary_gradient(card: &HairCard, tri: usize) -> [[f64; 3]; 2] {
    let [i0, i1, i2] = card.mesh.triangles[tri];
    let (a, b, c) = (card.mesh.uvs[i0], card.mesh.uvs[i1], card.mesh.uvs[i2]);
    let (e1, e2) = ([b[0] - a[0], b[1] - a[1]], [c[0] - a[0], c[1] - a[1]]);
    let det = e1[0] * e2[1] - e1[1] * e2[0];
    let du = [e2[1] / det, -e1[1] / det];
    let dv = [-e2[0] / det, e1[0] / det];
    [[-du[0] - du[1], du[0], du[1]], [-dv[0] - dv[1], dv[0], dv[1]]]
}

fn surface(card: &HairCard, tri: usize, bary: &[f64; 3]) -> (Vec3, Vec3) {
    let ids = card.mesh.triangles[tri];
    let mut v = Vec3::zeros();
    let mut n = Vec3::zeros();
    for (m, &i) in ids.iter().enumerate() {
        v += card.mesh.vertices[i] * bary[m];
        n += card.mesh.normals[i] * bary[m];
    }
    (v, n)
}

/// Point on or off the card given its triangle, barycentric weights and
/// normal displacement.
pub fn reconstruct_point(card: &HairCard, tri: usize, bary: &[f64; 3], delta: f64) -> Result<Vec3> {
    if tri >= card.mesh.triangles.len() {
        return Err(UvError::InvalidTriangleIndex(tri));
    }
    let (v, n) = surface(card, tri, bary);
    Ok(v + n.normalize() * delta)
}

pub fn reconstruct_points(set: &StrandUVSet, card: &HairCard) -> Result<Vec<Vec3>> {
    set.triangle
        .iter()
        .zip(&set.bary)
        .zip(&set.delta)
        .map(|((&t, b), &d)| reconstruct_point(card, t, b, d))
        .collect()
}

/// Reconstruction at `(u, v, delta)` and its Jacobian columns.
pub fn eval_with_jacobian(card: &HairCard, params: [f64; 3]) -> (Vec3, [Vec3; 3]) {
    let (tri, bary) = locate(card, [params[0], params[1]]);
    let ids = card.mesh.triangles[tri];
    let dl = bary_gradient(card, tri);
    let (v, n) = surface(card, tri, &bary);
    let len = n.norm();
    let nh = n / len;
    let delta = params[2];
    let mut cols = [Vec3::zeros(), Vec3::zeros(), nh];
    for (axis, col) in cols.iter_mut().take(2).enumerate() {
        let mut dv = Vec3::zeros();
        let mut dn = Vec3::zeros();
        for (m, &i) in ids.iter().enumerate() {
            dv += card.mesh.vertices[i] * dl[axis][m];
            dn += card.mesh.normals[i] * dl[axis][m];
        }
        let dnh = (dn - nh * nh.dot(&dn)) / len;
        *col = dv + dnh * delta;
    }
    (v + nh * delta, cols)
}

/// Squared reconstruction error of one point and its gradient.
pub fn point_loss(card: &HairCard, params: [f64; 3], target: &Vec3) -> (f64, [f64; 3], [Vec3; 3]) {
    let (p, cols) = eval_with_jacobian(card, params);
    let r = p - target;
    let g = [2.0 * r.dot(&cols[0]), 2.0 * r.dot(&cols[1]), 2.0 * r.dot(&cols[2])];
    (r.norm_squared(), g, cols)
}

fn clamp_params(p: [f64; 3]) -> [f64; 3] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2]]
}

/// Fit one point by diagonally preconditioned gradient descent with
/// backtracking; each gradient entry is scaled by the squared norm of its
/// Jacobian column.
fn fit_point(card: &HairCard, init: [f64; 3], target: &Vec3, iters: usize, step: f64) -> ([f64; 3], f64, f64) {
    let mut x = clamp_params(init);
    let (mut f, mut g, mut cols) = point_loss(card, x, target);
    let f0 = f;
    let mut h = step;
    for _ in 0..iters {
        if f == 0.0 || h < 1e-12 {
            break;
        }
        let dir: [f64; 3] = std::array::from_fn(|j| g[j] / (2.0 * cols[j].norm_squared()).max(1e-300));
        let cand = clamp_params(std::array::from_fn(|j| x[j] - h * dir[j]));
        let (fc, gc, cc) = point_loss(card, cand, target);
        if fc < f {
            x = cand;
            f = fc;
            g = gc;
            cols = cc;
            h = (h * 2.0).min(step);
        } else {
            h *= 0.5;
        }
    }
    (x, f0, f)
}

/// Barycentric weights of the point of triangle `abc` closest to `p`.
fn closest_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let (ab, ac, ap) = (b - a, c - a, p - a);
    let (d1, d2) = (ab.dot(&ap), ac.dot(&ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let (d3, d4) = (ab.dot(&bp), ac.dot(&bp));
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return [1.0 - t, t, 0.0];
    }
    let cp = p - c;
    let (d5, d6) = (ab.dot(&cp), ac.dot(&cp));
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return [1.0 - t, 0.0, t];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - t, t];
    }
    let denom = 1.0 / (va + vb + vc);
    let (v, w) = (vb * denom, vc * denom);
    [1.0 - v - w, v, w]
}

/// Start at the closest point over all card triangles, displaced along the
/// interpolated normal.
fn closest_point_params(card: &HairCard, p: &Vec3) -> [f64; 3] {
    let mut best = ([0.5, 0.5, 0.0], f64::INFINITY);
    for (t, ids) in card.mesh.triangles.iter().enumerate() {
        let [a, b, c] = ids.map(|i| card.mesh.vertices[i]);
        let lam = closest_on_triangle(p, &a, &b, &c);
        let (q, n) = surface(card, t, &lam);
        let d = (p - q).norm_squared();
        if d < best.1 {
            let uv: [f64; 2] = std::array::from_fn(|j| (0..3).map(|m| lam[m] * card.mesh.uvs[ids[m]][j]).sum());
            best = ([uv[0], uv[1], (p - q).dot(&n.normalize())], d);
        }
    }
    best.0
}

/// Exact `(u, v, delta)` of `p` inside triangle `t`, if `p` lies in the
/// prism swept by the triangle along its interpolated normals. Solves
/// `v(lambda) + e n(lambda) = p` by Newton's method, `n` unnormalized.
fn prism_params(card: &HairCard, t: usize, p: &Vec3) -> Option<[f64; 3]> {
    let ids = card.mesh.triangles[t];
    let [a, b, c] = ids.map(|i| card.mesh.vertices[i]);
    let [na, nb, nc] = ids.map(|i| card.mesh.normals[i]);
    let (ea, eb) = (b - a, c - a);
    let (ma, mb) = (nb - na, nc - na);
    let centroid = (a + b + c) / 3.0;
    let mut x = [1.0 / 3.0, 1.0 / 3.0, (p - centroid).dot(&((na + nb + nc) / 3.0).normalize())];
    let scale = ea.norm().max(eb.norm());
    for _ in 0..30 {
        let n = na + ma * x[0] + mb * x[1];
        let r = a + ea * x[0] + eb * x[1] + n * x[2] - p;
        if r.norm() <= 1e-15 * scale {
            break;
        }
        let j = nalgebra::Matrix3::from_columns(&[ea + ma * x[2], eb + mb * x[2], n]);
        let dx = j.lu().solve(&(-r))?;
        x = [x[0] + dx.x, x[1] + dx.y, x[2] + dx.z];
    }
    let lam = [1.0 - x[0] - x[1], x[0], x[1]];
    if lam.iter().any(|l| *l < -1e-9 || !l.is_finite()) {
        return None;
    }
    let n = na * lam[0] + nb * lam[1] + nc * lam[2];
    let q = a * lam[0] + b * lam[1] + c * lam[2] + n * x[2];
    if (q - p).norm() > 1e-9 * scale {
        return None;
    }
    let uv: [f64; 2] = std::array::from_fn(|k| (0..3).map(|m| lam[m] * card.mesh.uvs[ids[m]][k]).sum());
    Some([uv[0], uv[1], x[2] * n.norm()])
}

/// Initial `(u, v, delta)` of each point. Exact prism solutions win, first
/// those in the card rows next to the point's guide sample, then anywhere;
/// among several the smallest displacement is kept. Without an exact
/// solution the guide sample's frame or the closest card point is used,
/// whichever reconstructs the point better.
pub fn initial_params(card: &HairCard, points: &[Vec3]) -> Vec<[f64; 3]> {
    let rows = card.rows();
    let n_tri = card.mesh.triangles.len();
    let smallest = |tris: &mut dyn Iterator<Item = usize>, p: &Vec3| {
        tris.filter_map(|t| prism_params(card, t, p)).min_by(|x, y| x[2].abs().total_cmp(&y[2].abs()))
    };
    segment_membership(&card.guide, points)
        .into_iter()
        .zip(points)
        .map(|(k, p)| {
            // triangles 2r and 2r + 1 span rows r and r + 1
            let near = 2 * k.saturating_sub(1)..(2 * (k + 1)).min(n_tri);
            let exact = smallest(&mut near.clone(), p)
                .or_else(|| smallest(&mut (0..n_tri).filter(|t| !near.contains(t)), p));
            if let Some(x) = exact {
                return clamp_params(x);
            }
            let off = p - card.guide[k];
            let u = 0.5 + off.dot(&card.bitangents[k]) / (2.0 * card.width);
            let frame = clamp_params([u, k as f64 / (rows - 1) as f64, off.dot(&card.normals[k])]);
            let closest = clamp_params(closest_point_params(card, p));
            if point_loss(card, closest, p).0 < point_loss(card, frame, p).0 {
                closest
            } else {
                frame
            }
        })
        .collect()
}

/// Inverse-map one strand onto a card.
pub fn optimize_strand_uv(card: &HairCard, strand_index: usize, strand: &Strand, iters: usize, step: f64) -> StrandUVSet {
    let points = strand.points();
    let init = initial_params(card, points);
    let mut set = StrandUVSet {
        strand: strand_index,
        uv: Vec::with_capacity(points.len()),
        delta: Vec::with_capacity(points.len()),
        triangle: Vec::with_capacity(points.len()),
        bary: Vec::with_capacity(points.len()),
        residual: Vec::with_capacity(points.len()),
        initial_loss: 0.0,
        final_loss: 0.0,
    };
    for (p, x0) in points.iter().zip(init) {
        let (x, f0, f) = fit_point(card, x0, p, iters, step);
        let (tri, bary) = locate(card, [x[0], x[1]]);
        set.uv.push([x[0], x[1]]);
        set.delta.push(x[2]);
        set.triangle.push(tri);
        set.bary.push(bary);
        set.residual.push(f.sqrt());
        set.initial_loss += f0;
        set.final_loss += f;
    }
    set
}

/// Inverse-map every member strand of a cluster onto its card.
pub fn optimize_uv(cluster: &StrandCluster, strands: &[Strand], card: &HairCard, iters: usize, step: f64) -> Result<Vec<StrandUVSet>> {
    if let Some(&bad) = cluster.members.iter().find(|&&i| i >= strands.len()) {
        return Err(UvError::UnknownStrand(bad));
    }
    Ok(cluster
        .members
        .par_iter()
        .map(|&i| optimize_strand_uv(card, i, &strands[i], iters, step))
        .collect())
}

/// Coverage raster of strand paths in card UV space, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrandTexture {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub strands: usize,
}

impl StrandTexture {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|p| (p * 255.0).round() as u8).collect();
        w.write_all(&bytes)
    }
}

/// Peak of one splat; four samples per pixel along a line then give unit
/// coverage on the line.
pub const SPLAT_AMPLITUDE: f64 = 0.099_735_570_100_358_17;
const SPLAT_RADIUS: f64 = 4.0;

/// Integrated mass of one splat footprint over the plane.
pub fn footprint_mass() -> f64 {
    SPLAT_AMPLITUDE * 2.0 * std::f64::consts::PI
}

/// Dense pixel-space samples of one strand's UV path.
pub fn strand_samples(set: &StrandUVSet, width: usize, height: usize) -> Vec<[f64; 2]> {
    let px: Vec<[f64; 2]> = set.uv.iter().map(|uv| [uv[0] * width as f64, uv[1] * height as f64]).collect();
    if px.is_empty() {
        return px;
    }
    if px.len() == 1 {
        return px;
    }
    let length: f64 = px.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum();
    let count = ((4.0 * length).ceil() as usize + 1).max(2);
    if px.len() < 4 {
        // too short for a cubic: sample the polyline
        let arc = crate::bspline::chord_parameters(&px);
        return (0..count)
            .map(|i| {
                let t = i as f64 / (count - 1) as f64;
                let j = arc.partition_point(|a| *a < t).clamp(1, px.len() - 1);
                let span = arc[j] - arc[j - 1];
                let s = if span > 0.0 { (t - arc[j - 1]) / span } else { 0.0 };
                [px[j - 1][0] + s * (px[j][0] - px[j - 1][0]), px[j - 1][1] + s * (px[j][1] - px[j - 1][1])]
            })
            .collect();
    }
    let n_ctrl = (px.len() / 4).clamp(4, 32).min(px.len());
    CubicBSpline::fit(&px, n_ctrl).sample(count)
}

/// Unclamped splat accumulation and the number of samples splatted.
pub fn accumulate(uv_sets: &[StrandUVSet], width: usize, height: usize) -> Result<(Vec<f64>, usize)> {
    if width == 0 || height == 0 {
        return Err(UvError::ZeroResolution);
    }
    let mut buf = vec![0.0; width * height];
    let mut total = 0;
    for set in uv_sets {
        let samples = strand_samples(set, width, height);
        total += samples.len();
        for s in samples {
            let x0 = (s[0] - SPLAT_RADIUS).ceil().max(0.0) as usize;
            let x1 = ((s[0] + SPLAT_RADIUS).floor()).min(width as f64 - 1.0);
            let y0 = (s[1] - SPLAT_RADIUS).ceil().max(0.0) as usize;
            let y1 = ((s[1] + SPLAT_RADIUS).floor()).min(height as f64 - 1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for y in y0..=y1 as usize {
                let dy = y as f64 - s[1];
                for x in x0..=x1 as usize {
                    let dx = x as f64 - s[0];
                    buf[y * width + x] += SPLAT_AMPLITUDE * (-0.5 * (dx * dx + dy * dy)).exp();
                }
            }
        }
    }
    Ok((buf, total))
}

pub fn rasterize_strand_texture(uv_sets: &[StrandUVSet], width: usize, height: usize) -> Result<StrandTexture> {
    let (buf, _) = accumulate(uv_sets, width, height)?;
    Ok(StrandTexture { width, height, pixels: buf.into_iter().map(|p| p.min(1.0)).collect(), strands: uv_sets.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::card::{build_card, CardConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_card() -> (HairCard, Vec<Strand>, StrandCluster) {
        // two strands offset along x around a straight guide on the y axis
        let base: Vec<Vec3> = (0..30).map(|i| Vec3::new(0.0, i as f64 * 0.01, 0.0)).collect();
        let a = Strand::new(base.iter().map(|p| p + Vec3::new(0.01, 0.0, 0.0)).collect()).unwrap();
        let b = Strand::new(base.iter().map(|p| p - Vec3::new(0.01, 0.0, 0.0)).collect()).unwrap();
        let guide = Strand::new(base).unwrap();
        let cluster = StrandCluster { id: 0, members: vec![0, 1, 2], guide: guide.clone() };
        let strands = vec![a, b, guide];
        let card = build_card(&cluster, &strands, &CardConfig::default()).unwrap();
        (card, strands, cluster)
    }

    fn curved_card() -> (HairCard, Vec<Strand>, StrandCluster) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let strands: Vec<Strand> = (0..5)
            .map(|_| {
                let o = Vec3::new(rng.random_range(-0.01..0.01), 0.0, rng.random_range(-0.004..0.004));
                Strand::new(
                    (0..40)
                        .map(|i| {
                            let t = i as f64 / 39.0;
                            Vec3::new(0.04 * (2.0 * t).sin(), 0.25 * t, 0.03 * t * t) + o
                        })
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let mut mean = vec![Vec3::zeros(); 40];
        for s in &strands {
            for (m, p) in mean.iter_mut().zip(s.points()) {
                *m += p / 5.0;
            }
        }
        let cluster = StrandCluster { id: 0, members: (0..5).collect(), guide: Strand::new(mean).unwrap() };
        let card = build_card(&cluster, &strands, &CardConfig::default()).unwrap();
        (card, strands, cluster)
    }

    #[test]
    fn vertices_and_centroids_reconstruct_exactly() {
        let (card, _, _) = curved_card();
        for (i, uv) in card.mesh.uvs.iter().enumerate() {
            let (tri, bary) = locate(&card, *uv);
            let p = reconstruct_point(&card, tri, &bary, 0.0).unwrap();
            assert!((p - card.mesh.vertices[i]).norm() < 1e-12);
        }
        for (t, ids) in card.mesh.triangles.iter().enumerate() {
            let c = ids.iter().map(|&i| card.mesh.vertices[i]).sum::<Vec3>() / 3.0;
            let p = reconstruct_point(&card, t, &[1.0 / 3.0; 3], 0.0).unwrap();
            assert!((p - c).norm() < 1e-12);
        }
        assert_eq!(
            reconstruct_point(&card, card.mesh.triangles.len(), &[1.0, 0.0, 0.0], 0.0),
            Err(UvError::InvalidTriangleIndex(card.mesh.triangles.len()))
        );
    }

    #[test]
    fn displacement_on_planar_card_matches_plane_distance() {
        let (card, _, _) = flat_card();
        let n = card.normals[0];
        let origin = card.mesh.vertices[0];
        let (tri, bary) = locate(&card, [0.3, 0.42]);
        let p = reconstruct_point(&card, tri, &bary, 0.0025).unwrap();
        assert!(((p - origin).dot(&n) - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn barycentrics_are_valid_everywhere() {
        let (card, _, _) = curved_card();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let (_, b) = locate(&card, [rng.random(), rng.random()]);
            assert!(b.iter().all(|x| *x >= -1e-9));
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (card, _, _) = curved_card();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 200 {
            let x = [rng.random_range(0.05..0.95), rng.random_range(0.02..0.98), rng.random_range(-0.01..0.01)];
            let target = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(0.0..0.3), rng.random_range(-0.1..0.1));
            let h = 1e-7;
            // skip points whose stencil straddles a triangle edge
            let tri = locate(&card, [x[0], x[1]]).0;
            let stencil_ok = (0..2).all(|j| {
                let mut a = x;
                let mut b = x;
                a[j] -= h;
                b[j] += h;
                locate(&card, [a[0], a[1]]).0 == tri && locate(&card, [b[0], b[1]]).0 == tri
            });
            if !stencil_ok {
                continue;
            }
            let (_, g, _) = point_loss(&card, x, &target);
            for j in 0..3 {
                let mut a = x;
                let mut b = x;
                a[j] -= h;
                b[j] += h;
                let fd = (point_loss(&card, b, &target).0 - point_loss(&card, a, &target).0) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1e-6);
                assert!(rel < 1e-4, "param {j}: fd {fd} analytic {}", g[j]);
            }
            checked += 1;
        }
    }

    #[test]
    fn surface_strand_has_zero_residual() {
        let (card, _, _) = curved_card();
        let pts: Vec<Vec3> = (0..30)
            .map(|i| {
                let v = 0.01 + 0.98 * i as f64 / 29.0;
                let (tri, b) = locate(&card, [0.3 + 0.2 * v, v]);
                reconstruct_point(&card, tri, &b, 0.0).unwrap()
            })
            .collect();
        let set = optimize_strand_uv(&card, 0, &Strand::new(pts).unwrap(), DEFAULT_UV_ITERS, DEFAULT_UV_STEP);
        for (r, d) in set.residual.iter().zip(&set.delta) {
            assert!(*r < 1e-4 * card.width, "{r}");
            assert!(d.abs() < 1e-4 * card.width);
        }
    }

    #[test]
    fn constructed_displacement_recovered() {
        let (card, _, _) = curved_card();
        let h = 0.004;
        let pts: Vec<Vec3> = (0..30)
            .map(|i| {
                let v = 0.01 + 0.98 * i as f64 / 29.0;
                let (tri, b) = locate(&card, [0.6, v]);
                reconstruct_point(&card, tri, &b, h).unwrap()
            })
            .collect();
        let set = optimize_strand_uv(&card, 0, &Strand::new(pts).unwrap(), DEFAULT_UV_ITERS, DEFAULT_UV_STEP);
        for d in &set.delta {
            assert!((d - h).abs() < 1e-3 * h, "{d}");
        }
    }

    #[test]
    fn guide_maps_to_center_column_and_loss_never_increases() {
        let (card, strands, cluster) = flat_card();
        let sets = optimize_uv(&cluster, &strands, &card, DEFAULT_UV_ITERS, DEFAULT_UV_STEP).unwrap();
        let guide = &sets[2];
        assert!(guide.uv.iter().all(|uv| (uv[0] - 0.5).abs() < 0.05));
        for s in &sets {
            assert!(s.final_loss <= s.initial_loss);
            assert!(s.uv.iter().all(|uv| (0.0..=1.0).contains(&uv[0]) && (0.0..=1.0).contains(&uv[1])));
        }
    }

    fn vertical_set(u: f64) -> StrandUVSet {
        let n = 50;
        StrandUVSet {
            strand: 0,
            uv: (0..n).map(|i| [u, 0.1 + 0.8 * i as f64 / (n - 1) as f64]).collect(),
            delta: vec![0.0; n],
            triangle: vec![0; n],
            bary: vec![[1.0, 0.0, 0.0]; n],
            residual: vec![0.0; n],
            initial_loss: 0.0,
            final_loss: 0.0,
        }
    }

    #[test]
    fn empty_and_zero_resolution() {
        let t = rasterize_strand_texture(&[], 16, 8).unwrap();
        assert!(t.pixels.iter().all(|p| *p == 0.0));
        assert_eq!(rasterize_strand_texture(&[], 0, 8), Err(UvError::ZeroResolution));
    }

    #[test]
    fn vertical_strand_is_local() {
        let t = rasterize_strand_texture(&[vertical_set(0.5)], 64, 64).unwrap();
        let y = 32;
        let col = 32;
        let peak = (0..64).max_by(|a, b| t.get(*a, y).total_cmp(&t.get(*b, y))).unwrap();
        assert_eq!(peak, col);
        for x in 0..64usize {
            if x.abs_diff(col) > 3 {
                assert!(t.get(x, y) < 0.01);
            }
        }
        assert!(t.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn accumulated_mass_matches_footprints() {
        let sets = [vertical_set(0.5)];
        let (buf, samples) = accumulate(&sets, 64, 64).unwrap();
        let mass: f64 = buf.iter().sum();
        let expect = samples as f64 * footprint_mass();
        assert!((mass - expect).abs() / expect < 0.02);
    }

    #[test]
    fn amplitude_gives_unit_line_coverage() {
        let a = 1.0 / (4.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((SPLAT_AMPLITUDE - a).abs() < 1e-15);
    }

    #[test]
    fn pgm_header() {
        let t = rasterize_strand_texture(&[], 3, 2).unwrap();
        let mut out = Vec::new();
        t.write_pgm(&mut out).unwrap();
        assert_eq!(&out[..11], b"P5\n3 2\n255\n");
        assert_eq!(out.len(), 11 + 6);
    }
}
