//! Small vector helpers shared by the geometry stages.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;

/// Right-handed orthonormal basis `(x, y, z)` with `z = dir`.
///
/// Branchless construction of Duff et al.; `dir = +z` yields the identity frame.
pub fn orthonormal_basis(dir: &Vec3) -> (Vec3, Vec3) {
    let sign = 1.0f64.copysign(dir.z);
    let a = -1.0 / (sign + dir.z);
    let b = dir.x * dir.y * a;
    let x = Vec3::new(1.0 + sign * dir.x * dir.x * a, sign * b, -sign * dir.x);
    let y = Vec3::new(b, sign + dir.y * dir.y * a, -dir.y);
    (x, y)
}

/// Rotation whose third column is `dir` (maps local +z onto `dir`).
pub fn rotation_to(dir: &Vec3) -> Matrix3<f64> {
    let (x, y) = orthonormal_basis(dir);
    Matrix3::from_columns(&[x, y, *dir])
}

/// Rotate `v` by the minimal rotation taking unit `from` to unit `to`.
pub fn transport(v: &Vec3, from: &Vec3, to: &Vec3) -> Vec3 {
    let axis = from.cross(to);
    let s = axis.norm();
    let c = from.dot(to);
    if s < 1e-12 {
        return if c > 0.0 { *v } else { -*v };
    }
    let k = axis / s;
    // Rodrigues
    v * c + k.cross(v) * s + k * k.dot(v) * (1.0 - c)
}

/// Polyline arc-length prefix sums; `out[0] = 0`.
pub fn cumulative_length(points: &[Vec3]) -> Vec<f64> {
    let mut acc = Vec::with_capacity(points.len());
    let mut total = 0.0;
    acc.push(0.0);
    for w in points.windows(2) {
        total += (w[1] - w[0]).norm();
        acc.push(total);
    }
    acc
}

/// Unit tangents: central differences inside, one-sided at the ends.
pub fn polyline_tangents(points: &[Vec3]) -> Vec<Vec3> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (points[0], points[1.min(n - 1)]),
                _ if i == n - 1 => (points[n - 2], points[n - 1]),
                _ => (points[i - 1], points[i + 1]),
            };
            (b - a).normalize()
        })
        .collect()
}

/// Closest point on segment `[a, b]` to `p` as a parameter in `[0, 1]`.
pub fn project_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 == 0.0 {
        return 0.0;
    }
    ((p - a).dot(&d) / len2).clamp(0.0, 1.0)
}

/// Arc-length parameter of the closest point on the polyline to `p`.
pub fn project_on_polyline(p: &Vec3, points: &[Vec3], arc: &[f64]) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for (i, w) in points.windows(2).enumerate() {
        let t = project_on_segment(p, &w[0], &w[1]);
        let q = w[0] + (w[1] - w[0]) * t;
        let d2 = (p - q).norm_squared();
        if d2 < best.0 {
            best = (d2, arc[i] + t * (arc[i + 1] - arc[i]));
        }
    }
    best.1
}

/// Discrete curvature per interior point: turning angle over mean adjacent
/// segment length. Endpoints get 0.
pub fn discrete_curvature(points: &[Vec3]) -> Vec<f64> {
    let n = points.len();
    let mut out = vec![0.0; n];
    for i in 1..n.saturating_sub(1) {
        let a = points[i] - points[i - 1];
        let b = points[i + 1] - points[i];
        let la = a.norm();
        let lb = b.norm();
        if la == 0.0 || lb == 0.0 {
            continue;
        }
        let angle = a.cross(&b).norm().atan2(a.dot(&b));
        out[i] = angle / (0.5 * (la + lb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_of_z_is_identity() {
        let r = rotation_to(&Vec3::z());
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn basis_is_right_handed_for_negative_z() {
        let d = -Vec3::z();
        let r = rotation_to(&d);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn transport_maps_from_to_to() {
        let from = Vec3::new(1.0, 2.0, 0.5).normalize();
        let to = Vec3::new(-0.3, 0.1, 1.0).normalize();
        assert!((transport(&from, &from, &to) - to).norm() < 1e-12);
    }

    #[test]
    fn circle_curvature_close_to_inverse_radius() {
        let r = 2.0;
        let pts: Vec<Vec3> = (0..50)
            .map(|i| {
                let a = i as f64 * 0.05;
                Vec3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect();
        let k = discrete_curvature(&pts);
        assert!((k[10] - 0.5).abs() < 1e-3);
    }
}
