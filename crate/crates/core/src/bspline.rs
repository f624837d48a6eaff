//! Clamped uniform cubic B-splines fitted by least squares.

use nalgebra::DMatrix;

const DEGREE: usize = 3;

/// A clamped uniform cubic B-spline over `[0, 1]` with `N`-dimensional
/// control points.
#[derive(Debug, Clone)]
pub struct CubicBSpline<const N: usize> {
    knots: Vec<f64>,
    ctrl: Vec<[f64; N]>,
}

fn clamped_knots(n_ctrl: usize) -> Vec<f64> {
    let inner = n_ctrl - DEGREE;
    let mut k = vec![0.0; DEGREE];
    for i in 0..=inner {
        k.push(i as f64 / inner as f64);
    }
    k.extend(std::iter::repeat_n(1.0, DEGREE));
    k
}

/// Index of the knot span containing `u` and the `DEGREE + 1` non-zero basis
/// values there (Cox-de Boor).
fn basis(knots: &[f64], n_ctrl: usize, u: f64) -> (usize, [f64; DEGREE + 1]) {
    let u = u.clamp(0.0, 1.0);
    let span = if u >= 1.0 {
        n_ctrl - 1
    } else {
        let mut s = DEGREE;
        while s + 1 < n_ctrl && knots[s + 1] <= u {
            s += 1;
        }
        s
    };
    let mut n = [0.0; DEGREE + 1];
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let tmp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    (span, n)
}

/// Normalized chord-length parameters in `[0, 1]`.
pub fn chord_parameters<const N: usize>(points: &[[f64; N]]) -> Vec<f64> {
    let mut acc = vec![0.0];
    let mut total = 0.0;
    for w in points.windows(2) {
        let d: f64 = (0..N).map(|i| (w[1][i] - w[0][i]).powi(2)).sum::<f64>().sqrt();
        total += d;
        acc.push(total);
    }
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    } else {
        let m = (points.len() - 1).max(1) as f64;
        acc.iter_mut().enumerate().for_each(|(i, a)| *a = i as f64 / m);
    }
    acc
}

impl<const N: usize> CubicBSpline<N> {
    /// Least-squares fit with `n_ctrl` control points at chord-length
    /// parameters. Requires `4 <= n_ctrl <= points.len()`.
    pub fn fit(points: &[[f64; N]], n_ctrl: usize) -> Self {
        assert!(n_ctrl > DEGREE && n_ctrl <= points.len(), "bad control point count");
        let params = chord_parameters(points);
        let knots = clamped_knots(n_ctrl);
        let m = points.len();
        let mut a = DMatrix::<f64>::zeros(m, n_ctrl);
        for (row, &u) in params.iter().enumerate() {
            let (span, vals) = basis(&knots, n_ctrl, u);
            for (j, v) in vals.iter().enumerate() {
                a[(row, span - DEGREE + j)] = *v;
            }
        }
        let b = DMatrix::from_fn(m, N, |r, c| points[r][c]);
        let svd = a.svd(true, true);
        let x = svd.solve(&b, 1e-12).expect("svd computed with u and v");
        let ctrl = (0..n_ctrl).map(|r| std::array::from_fn(|c| x[(r, c)])).collect();
        Self { knots, ctrl }
    }

    pub fn eval(&self, u: f64) -> [f64; N] {
        let (span, vals) = basis(&self.knots, self.ctrl.len(), u);
        let mut out = [0.0; N];
        for (j, v) in vals.iter().enumerate() {
            let c = &self.ctrl[span - DEGREE + j];
            for i in 0..N {
                out[i] += v * c[i];
            }
        }
        out
    }

    /// `count` points at uniform parameters from 0 to 1.
    pub fn sample(&self, count: usize) -> Vec<[f64; N]> {
        let denom = (count - 1).max(1) as f64;
        (0..count).map(|i| self.eval(i as f64 / denom)).collect()
    }

    pub fn control_points(&self) -> &[[f64; N]] {
        &self.ctrl
    }
}
