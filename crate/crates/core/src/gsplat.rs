//! Cylindrical Gaussian strands and a forward-only CPU splat renderer.
//!
//! Every strand segment becomes one Gaussian centered at the segment
//! midpoint, scaled `(d, d, s/2)` in its local frame whose z axis follows the
//! segment. Rendering projects each Gaussian with the EWA approximation,
//! sorts by view depth and alpha-composites front to back.

use std::io::Write;

use nalgebra::{Matrix2, Matrix3, Matrix2x3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{sh_coeff_count, COLOR_OFFSET};
use crate::geom::{rotation_to, Vec3};
use crate::hairio::Strand;

#[derive(Debug, Error, PartialEq)]
pub enum GsplatError {
    #[error("segment {0} has zero length")]
    ZeroLengthSegment(usize),
    #[error("direction is not unit length")]
    BadDirection,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("{0} SH coefficients do not form a full degree")]
    BadShLength(usize),
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
}

pub type Result<T> = std::result::Result<T, GsplatError>;

/// Default cross-section scale in scene units.
pub const DEFAULT_THICKNESS: f64 = 1e-4;
/// Added to the diagonal of every projected covariance, in pixels squared.
pub const COV_DILATION: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Real SH basis values up to `degree` for a unit direction.
pub fn sh_basis(degree: usize, dir: &Vec3) -> Vec<f64> {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = vec![crate::codebook::SH_C0];
    if degree >= 1 {
        b.extend([-SH_C1 * y, SH_C1 * z, -SH_C1 * x]);
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b.extend([
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]);
    }
    b
}

pub fn sh_degree_of(len: usize) -> Option<usize> {
    (0..=3).find(|d| sh_coeff_count(*d) == len)
}

/// RGB color of interleaved coefficients (`basis * 3 + channel`) seen along
/// `dir`, offset by 0.5 and clamped at zero.
pub fn eval_sh(coeffs: &[f64], dir: &Vec3) -> Result<[f64; 3]> {
    if (dir.norm() - 1.0).abs() > 1e-6 {
        return Err(GsplatError::BadDirection);
    }
    let degree = sh_degree_of(coeffs.len()).ok_or(GsplatError::BadShLength(coeffs.len()))?;
    let basis = sh_basis(degree, dir);
    let mut rgb = [COLOR_OFFSET; 3];
    for (i, b) in basis.iter().enumerate() {
        for (ch, c) in rgb.iter_mut().enumerate() {
            *c += b * coeffs[i * 3 + ch];
        }
    }
    Ok(rgb.map(|c| c.max(0.0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    pub scale: Vec3,
    pub rotation: Matrix3<f64>,
    pub opacity: f64,
    pub sh: Vec<f64>,
}

impl Gaussian {
    pub fn covariance(&self) -> Matrix3<f64> {
        let s = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        self.rotation * s * self.rotation.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStrand {
    pub gaussians: Vec<Gaussian>,
}

/// One Gaussian per segment; `opacities` and `sh` hold one entry per segment.
pub fn strand_to_gaussians(s: &Strand, d: f64, opacities: &[f64], sh: &[Vec<f64>]) -> Result<GaussianStrand> {
    let pts = s.points();
    let g = pts.len() - 1;
    if opacities.len() != g {
        return Err(GsplatError::LengthMismatch { expected: g, got: opacities.len() });
    }
    if sh.len() != g {
        return Err(GsplatError::LengthMismatch { expected: g, got: sh.len() });
    }
    let gaussians = pts
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let seg = w[1] - w[0];
            let len = seg.norm();
            if len == 0.0 {
                return Err(GsplatError::ZeroLengthSegment(i));
            }
            Ok(Gaussian {
                mean: (w[0] + w[1]) * 0.5,
                scale: Vec3::new(d, d, len * 0.5),
                rotation: rotation_to(&(seg / len)),
                opacity: opacities[i],
                sh: sh[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianStrand { gaussians })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    /// Rows are the camera right, down and forward axes in world space.
    pub rotation: Matrix3<f64>,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

impl Camera {
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Result<Self> {
        let fwd = target - eye;
        if fwd.norm() == 0.0 {
            return Err(GsplatError::InvalidCamera("eye equals target"));
        }
        let fwd = fwd.normalize();
        let right = fwd.cross(&up);
        if right.norm() < 1e-12 {
            return Err(GsplatError::InvalidCamera("up parallel to view direction"));
        }
        let right = right.normalize();
        let down = fwd.cross(&right);
        let cam = Self {
            position: eye,
            rotation: Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]),
            fov_y,
            width,
            height,
            near: 1e-3,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(GsplatError::InvalidCamera("fov outside (0, pi)"));
        }
        if self.near <= 0.0 {
            return Err(GsplatError::InvalidCamera("near plane must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GsplatError::InvalidCamera("empty image"));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov_y).tan()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.to_rgb8())
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub index: usize,
    pub depth: f64,
    pub center: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    /// Pixel bounding box `[x0, y0, x1, y1]` (inclusive) of the 3-sigma
    /// ellipse.
    pub bbox: [i64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Treat every Gaussian as fully opaque.
    pub opaque: bool,
    pub tile: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: [0.0; 3], opaque: false, tile: 16 }
    }
}

/// Project one Gaussian; `None` when behind the near plane or degenerate.
pub fn project(g: &Gaussian, index: usize, cam: &Camera, opaque: bool) -> Result<Option<Splat>> {
    let pc = cam.rotation * (g.mean - cam.position);
    if pc.z < cam.near {
        return Ok(None);
    }
    let f = cam.focal();
    let (cx, cy) = (0.5 * cam.width as f64, 0.5 * cam.height as f64);
    let center = Vector2::new(f * pc.x / pc.z + cx, f * pc.y / pc.z + cy);
    let z2 = pc.z * pc.z;
    let j = Matrix2x3::new(f / pc.z, 0.0, -f * pc.x / z2, 0.0, f / pc.z, -f * pc.y / z2);
    let t = j * cam.rotation;
    let mut cov = t * g.covariance() * t.transpose();
    cov = (cov + cov.transpose()) * 0.5;
    cov[(0, 0)] += COV_DILATION;
    cov[(1, 1)] += COV_DILATION;
    let Some(conic) = cov.try_inverse() else {
        return Ok(None);
    };
    let rx = 3.0 * cov[(0, 0)].sqrt();
    let ry = 3.0 * cov[(1, 1)].sqrt();
    // pixel (i, j) has its center at (i + 0.5, j + 0.5)
    let bbox = [
        (center.x - rx - 0.5).ceil() as i64,
        (center.y - ry - 0.5).ceil() as i64,
        (center.x + rx - 0.5).floor() as i64,
        (center.y + ry - 0.5).floor() as i64,
    ];
    if bbox[2] < 0 || bbox[3] < 0 || bbox[0] >= cam.width as i64 || bbox[1] >= cam.height as i64 {
        return Ok(None);
    }
    let dir = (g.mean - cam.position).normalize();
    Ok(Some(Splat {
        index,
        depth: pc.z,
        center,
        cov,
        conic,
        bbox,
        opacity: if opaque { 1.0 } else { g.opacity },
        color: eval_sh(&g.sh, &dir)?,
    }))
}

/// Visible splats sorted front to back (ties by Gaussian index).
pub fn project_all(gaussians: &[Gaussian], cam: &Camera, opaque: bool) -> Result<Vec<Splat>> {
    let mut splats: Vec<Splat> = gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| project(g, i, cam, opaque))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    Ok(splats)
}

/// Composite one pixel; `trace` receives the transmittance after every
/// contributing splat.
pub fn composite_pixel(splats: &[&Splat], x: usize, y: usize, background: [f64; 3], mut trace: Option<&mut Vec<f64>>) -> [f64; 3] {
    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
    let (xi, yi) = (x as i64, y as i64);
    let mut c = [0.0; 3];
    let mut t = 1.0;
    for s in splats {
        if xi < s.bbox[0] || xi > s.bbox[2] || yi < s.bbox[1] || yi > s.bbox[3] {
            continue;
        }
        let d = p - s.center;
        let power = -0.5 * (d.transpose() * s.conic * d)[(0, 0)];
        let alpha = (s.opacity * power.exp()).clamp(0.0, ALPHA_MAX);
        for ch in 0..3 {
            c[ch] += t * alpha * s.color[ch];
        }
        t *= 1.0 - alpha;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(t);
        }
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for ch in 0..3 {
        c[ch] += t * background[ch];
    }
    c
}

pub fn render(gaussians: &[Gaussian], cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    cam.validate()?;
    let splats = project_all(gaussians, cam, opts.opaque)?;
    let tile = opts.tile.max(1);
    let (w, h) = (cam.width, cam.height);
    let tiles_x = w.div_ceil(tile);
    let tiles_y = h.div_ceil(tile);
    let tiles: Vec<Vec<(usize, [f64; 3])>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|ti| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let (x0, y0) = (tx * tile, ty * tile);
            let (x1, y1) = ((x0 + tile).min(w), (y0 + tile).min(h));
            let local: Vec<&Splat> = splats
                .iter()
                .filter(|s| s.bbox[2] >= x0 as i64 && s.bbox[0] < x1 as i64 && s.bbox[3] >= y0 as i64 && s.bbox[1] < y1 as i64)
                .collect();
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push((y * w + x, composite_pixel(&local, x, y, opts.background, None)));
                }
            }
            out
        })
        .collect();
    let mut pixels = vec![opts.background; w * h];
    for (i, c) in tiles.into_iter().flatten() {
        pixels[i] = c;
    }
    Ok(Image { width: w, height: h, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::SH_C0;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn solid(rgb: [f64; 3]) -> Vec<f64> {
        rgb.iter().map(|c| (c - 0.5) / SH_C0).collect()
    }

    fn blob(mean: Vec3, r: f64, rgb: [f64; 3]) -> Gaussian {
        Gaussian { mean, scale: Vec3::repeat(r), rotation: Matrix3::identity(), opacity: 1.0, sh: solid(rgb) }
    }

    fn cam(w: usize, h: usize) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::zeros(), Vec3::y(), 0.8, w, h).unwrap()
    }

    #[test]
    fn segment_gaussians() {
        let s = Strand::new((0..100).map(|i| Vec3::new(0.0, 0.0, i as f64 * 0.01)).collect()).unwrap();
        let gs = strand_to_gaussians(&s, 1e-4, &[1.0; 99], &vec![vec![0.0; 3]; 99]).unwrap();
        assert_eq!(gs.gaussians.len(), 99);
        let s = Strand::new(vec![Vec3::zeros(), Vec3::z()]).unwrap();
        let g = &strand_to_gaussians(&s, 0.2, &[1.0], &[vec![0.0; 3]]).unwrap().gaussians[0];
        assert_eq!(g.mean, Vec3::new(0.0, 0.0, 0.5));
        assert_eq!(g.scale, Vec3::new(0.2, 0.2, 0.5));
        assert_eq!(g.rotation, Matrix3::identity());
        let s = Strand::new(vec![Vec3::zeros(), Vec3::zeros(), Vec3::x()]).unwrap();
        assert_eq!(
            strand_to_gaussians(&s, 0.1, &[1.0; 2], &[vec![0.0; 3], vec![0.0; 3]]),
            Err(GsplatError::ZeroLengthSegment(0))
        );
    }

    #[test]
    fn random_segment_rotations_align_and_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let a = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = Strand::new(vec![a, b]).unwrap();
            let g = &strand_to_gaussians(&s, 0.1, &[1.0], &[vec![0.0; 3]]).unwrap().gaussians[0];
            assert!((g.rotation * Vec3::z() - (b - a).normalize()).norm() < 1e-9);
            let e = g.rotation.transpose() * g.rotation - Matrix3::identity();
            assert!(e.abs().max() < 1e-6);
            assert!((g.rotation.determinant() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sh_examples() {
        let dir = Vec3::new(0.3, -0.4, 0.5).normalize();
        let c = 0.21;
        let rgb = eval_sh(&[c / SH_C0; 3], &dir).unwrap();
        assert!(rgb.iter().all(|v| (v - (c + 0.5)).abs() < 1e-12));
        assert_eq!(eval_sh(&[0.0; 12], &dir).unwrap(), [0.5; 3]);
        assert_eq!(eval_sh(&[0.0; 3], &Vec3::new(1.0, 1.0, 0.0)), Err(GsplatError::BadDirection));
        assert_eq!(eval_sh(&[0.0; 5], &dir), Err(GsplatError::BadShLength(5)));
    }

    #[test]
    fn degree_one_matches_polynomials() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y00 = 0.5 / std::f64::consts::PI.sqrt();
        let y1 = (3.0 / (4.0 * std::f64::consts::PI)).sqrt();
        for _ in 0..200 {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let k: Vec<f64> = (0..12).map(|_| rng.random_range(-0.3..0.3)).collect();
            let got = eval_sh(&k, &d).unwrap();
            for ch in 0..3 {
                let v = 0.5 + y00 * k[ch] - y1 * d.y * k[3 + ch] + y1 * d.z * k[6 + ch] - y1 * d.x * k[9 + ch];
                assert!((got[ch] - v.max(0.0)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let opts = RenderOptions { background: [0.1, 0.2, 0.3], ..Default::default() };
        let img = render(&[], &cam(20, 10), &opts).unwrap();
        assert!(img.pixels.iter().all(|p| *p == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn single_splat_center_is_its_color() {
        let img = render(&[blob(Vec3::zeros(), 0.2, [1.0, 0.0, 0.0])], &cam(33, 33), &RenderOptions::default()).unwrap();
        let p = img.get(16, 16);
        assert!((p[0] - 1.0).abs() < 1.0 / 255.0 && p[1].abs() < 1.0 / 255.0 && p[2].abs() < 1.0 / 255.0);
    }

    #[test]
    fn front_splat_occludes() {
        let red = [1.0, 0.0, 0.0];
        let blue = [0.0, 0.0, 1.0];
        let c = cam(33, 33);
        let near = |rgb| blob(Vec3::new(0.0, 0.0, -0.5), 0.2, rgb);
        let far = |rgb| blob(Vec3::new(0.0, 0.0, 0.5), 0.2, rgb);
        let a = render(&[far(blue), near(red)], &c, &RenderOptions::default()).unwrap().get(16, 16);
        let b = render(&[far(red), near(blue)], &c, &RenderOptions::default()).unwrap().get(16, 16);
        // manual compositing: front alpha 0.999, back alpha 0.999 behind it
        let expect = |front: [f64; 3], back: [f64; 3]| -> [f64; 3] {
            std::array::from_fn(|i| 0.999 * front[i] + 0.001 * 0.999 * back[i])
        };
        let ea = expect(red, blue);
        let eb = expect(blue, red);
        for i in 0..3 {
            assert!((a[i] - ea[i]).abs() < 1e-9);
            assert!((b[i] - eb[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn transmittance_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gs: Vec<Gaussian> = (0..200)
            .map(|_| {
                let mut g = blob(
                    Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
                    rng.random_range(0.02..0.1),
                    [rng.random(), rng.random(), rng.random()],
                );
                g.opacity = rng.random();
                g
            })
            .collect();
        let c = cam(24, 24);
        let splats = project_all(&gs, &c, false).unwrap();
        let refs: Vec<&Splat> = splats.iter().collect();
        for y in 0..24 {
            for x in 0..24 {
                let mut tr = Vec::new();
                composite_pixel(&refs, x, y, [0.0; 3], Some(&mut tr));
                assert!(tr.windows(2).all(|w| w[1] <= w[0]));
                assert!(tr.iter().all(|t| *t <= 1.0 && *t >= 0.0));
            }
        }
        for s in &splats {
            assert_eq!(s.cov, s.cov.transpose());
            assert!(s.cov[(0, 0)] > 0.0 && s.cov.determinant() > 0.0);
        }
        let a = render(&gs, &c, &RenderOptions { tile: 16, ..Default::default() }).unwrap();
        let b = render(&gs, &c, &RenderOptions { tile: 5, ..Default::default() }).unwrap();
        assert_eq!(a.to_rgb8(), b.to_rgb8());
        assert_eq!(a, b);
    }

    #[test]
    fn camera_validation() {
        assert!(Camera::look_at(Vec3::zeros(), Vec3::z(), Vec3::z(), 0.8, 4, 4).is_err());
        assert!(Camera::look_at(Vec3::zeros(), Vec3::z(), Vec3::y(), 3.2, 4, 4).is_err());
        let mut c = cam(4, 4);
        c.near = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn ppm_header() {
        let img = Image { width: 2, height: 1, pixels: vec![[1.0, 0.0, 0.5]; 2] };
        let mut out = Vec::new();
        img.write_ppm(&mut out).unwrap();
        assert_eq!(&out[..11], b"P6\n2 1\n255\n");
        assert_eq!(&out[11..], &[255, 0, 128, 255, 0, 128]);
    }
}
