//! Seeded k-means (k-means++ seeding, Lloyd iterations) and strand clustering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geom::Vec3;
use crate::hairio::{Hairstyle, Strand};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k = {k} exceeds the number of samples ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("no samples (or k = 0)")]
    EmptyInput,
    #[error("sample {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("sample {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("strand {index} has {got} points, expected {expected}")]
    WrongPointCount { index: usize, expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia right after each assignment step.
    pub inertia_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
fn nearest(sample: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(sample, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(samples: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    samples.par_iter().map(|s| nearest(s, centroids)).collect()
}

fn plus_plus_init(samples: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = samples.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![samples[first].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| dist2(s, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            // all remaining samples coincide with a centroid
            chosen.iter().position(|c| !c).unwrap()
        };
        chosen[pick] = true;
        centroids.push(samples[pick].clone());
        let c = centroids.last().unwrap();
        d2.par_iter_mut()
            .zip(samples.par_iter())
            .for_each(|(d, s)| *d = d.min(dist2(s, c)));
    }
    centroids
}

/// Give every empty cluster the sample farthest from its current centroid.
fn repair_empty(assigned: &mut [(usize, f64)], samples: &[Vec<f64>], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for (a, _) in assigned.iter() {
            counts[*a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let mut far = None;
        for (i, (a, d)) in assigned.iter().enumerate() {
            if counts[*a] > 1 && far.is_none_or(|(_, best)| *d > best) {
                far = Some((i, *d));
            }
        }
        let Some((i, _)) = far else { return };
        centroids[empty] = samples[i].clone();
        assigned[i] = (empty, 0.0);
    }
}

fn update(samples: &[Vec<f64>], assigned: &[(usize, f64)], centroids: &mut [Vec<f64>]) -> f64 {
    let dim = samples[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    // ordered reduction keeps results independent of worker count
    for (s, (a, _)) in samples.iter().zip(assigned) {
        counts[*a] += 1;
        for (acc, x) in sums[*a].iter_mut().zip(s) {
            *acc += x;
        }
    }
    let mut shift: f64 = 0.0;
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let inv = 1.0 / counts[j] as f64;
        let new: Vec<f64> = sums[j].iter().map(|v| v * inv).collect();
        shift = shift.max(dist2(&new, &centroids[j]).sqrt());
        centroids[j] = new;
    }
    shift
}

/// Lloyd's k-means with k-means++ seeding from a seeded ChaCha RNG.
///
/// Iterates until the largest centroid move is below `tol` or `max_iter`
/// updates were made. The returned assignment is always a nearest-centroid
/// assignment for the returned centroids.
pub fn kmeans(
    samples: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if samples.is_empty() || k == 0 {
        return Err(ClusterError::EmptyInput);
    }
    if k > samples.len() {
        return Err(ClusterError::KTooLarge { k, n: samples.len() });
    }
    let dim = samples[0].len();
    for (index, s) in samples.iter().enumerate() {
        if s.len() != dim {
            return Err(ClusterError::DimensionMismatch { index, expected: dim, got: s.len() });
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(ClusterError::NonFinite(index));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(samples, k, &mut rng);
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut assigned;
    loop {
        assigned = assign(samples, &centroids);
        let counts_ok = {
            let mut seen = vec![false; k];
            assigned.iter().for_each(|(a, _)| seen[*a] = true);
            seen.iter().all(|s| *s)
        };
        if !counts_ok {
            repair_empty(&mut assigned, samples, &mut centroids);
        }
        trace.push(assigned.iter().map(|(_, d)| d).sum());
        if iterations >= max_iter && counts_ok {
            break;
        }
        let shift = update(samples, &assigned, &mut centroids);
        iterations += 1;
        if (shift < tol || iterations >= max_iter) && counts_ok {
            // final nearest-centroid pass against the moved centroids
            assigned = assign(samples, &centroids);
            let mut seen = vec![false; k];
            assigned.iter().for_each(|(a, _)| seen[*a] = true);
            if seen.iter().all(|s| *s) {
                trace.push(assigned.iter().map(|(_, d)| d).sum());
                break;
            }
        }
        if iterations >= max_iter + 16 {
            // empty clusters keep reappearing; settle for the repaired state
            break;
        }
    }
    let inertia = assigned.iter().map(|(_, d)| d).sum();
    Ok(KMeansResult {
        assignments: assigned.into_iter().map(|(a, _)| a).collect(),
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

/// Concatenated point coordinates `(x1, y1, z1, x2, ...)`.
pub fn strand_feature(s: &Strand, expected_points: usize) -> Result<Vec<f64>> {
    if s.len() != expected_points {
        return Err(ClusterError::WrongPointCount { index: 0, expected: expected_points, got: s.len() });
    }
    Ok(s.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect())
}

fn feature_to_strand(f: &[f64]) -> Strand {
    Strand::new(f.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
        .expect("centroid of valid strands is a valid strand")
}

/// A group of strands with the guide strand that represents them.
#[derive(Debug, Clone, PartialEq)]
pub struct StrandCluster {
    pub id: usize,
    /// Indices into the hairstyle's strand list, ascending.
    pub members: Vec<usize>,
    pub guide: Strand,
}

/// k-means over concatenated strand coordinates. Each cluster's guide is the
/// pointwise mean of its members, reshaped into a polyline.
pub fn cluster_strands(h: &Hairstyle, n_c: usize, seed: u64) -> Result<Vec<StrandCluster>> {
    let per = h.strands.first().map(Strand::len).ok_or(ClusterError::EmptyInput)?;
    let features = h
        .strands
        .iter()
        .enumerate()
        .map(|(index, s)| {
            strand_feature(s, per).map_err(|e| match e {
                ClusterError::WrongPointCount { expected, got, .. } => {
                    ClusterError::WrongPointCount { index, expected, got }
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let km = kmeans(&features, n_c, seed, 100, 1e-9)?;
    clusters_from_assignments(h, &km.assignments, n_c)
}

/// Rebuild clusters (member lists and mean guides) from per-strand cluster
/// labels; empty labels are skipped.
pub fn clusters_from_assignments(h: &Hairstyle, assignments: &[usize], n_c: usize) -> Result<Vec<StrandCluster>> {
    let per = h.strands.first().map(Strand::len).ok_or(ClusterError::EmptyInput)?;
    if assignments.len() != h.len() {
        return Err(ClusterError::DimensionMismatch { index: 0, expected: h.len(), got: assignments.len() });
    }
    let mut members = vec![Vec::new(); n_c];
    for (i, a) in assignments.iter().enumerate() {
        if *a >= n_c {
            return Err(ClusterError::KTooLarge { k: *a + 1, n: n_c });
        }
        members[*a].push(i);
    }
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(id, members)| {
            let mut mean = vec![0.0; per * 3];
            for &i in &members {
                let f = h.strands[i].points().iter().flat_map(|p| [p.x, p.y, p.z]);
                mean.iter_mut().zip(f).for_each(|(a, x)| *a += x);
            }
            let inv = 1.0 / members.len() as f64;
            mean.iter_mut().for_each(|a| *a *= inv);
            StrandCluster { id, members, guide: feature_to_strand(&mean) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn rand_samples(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let s = rand_samples(9, 4, 1);
        let r = kmeans(&s, 9, 3, 50, 0.0).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn k_one_is_the_mean() {
        let s = rand_samples(25, 3, 2);
        let r = kmeans(&s, 1, 0, 50, 0.0).unwrap();
        for d in 0..3 {
            let mean = s.iter().map(|v| v[d]).sum::<f64>() / 25.0;
            assert!((r.centroids[0][d] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_samples_with_k_n() {
        let s = vec![vec![1.0, 1.0]; 4];
        let r = kmeans(&s, 4, 0, 10, 0.0).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut a = r.assignments.clone();
        a.sort();
        a.dedup();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn errors() {
        let s = rand_samples(3, 2, 0);
        assert_eq!(kmeans(&s, 4, 0, 10, 0.0), Err(ClusterError::KTooLarge { k: 4, n: 3 }));
        assert_eq!(kmeans(&[], 1, 0, 10, 0.0), Err(ClusterError::EmptyInput));
        let bad = vec![vec![0.0, 1.0], vec![0.0]];
        assert!(matches!(kmeans(&bad, 1, 0, 10, 0.0), Err(ClusterError::DimensionMismatch { index: 1, .. })));
    }

    #[test]
    fn strand_feature_layout() {
        let s = Strand::new(vec![Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        assert_eq!(strand_feature(&s, 2).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(strand_feature(&s, 3), Err(ClusterError::WrongPointCount { .. })));
    }

    #[test]
    fn strand_feature_is_linear_in_translation() {
        let s = Strand::new(vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0, -2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]).unwrap();
        let t = Vec3::new(0.5, -1.5, 2.0);
        let a = strand_feature(&s, 3).unwrap();
        let b = strand_feature(&s.translated(&t), 3).unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            assert!((y - x - t[i % 3]).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_cluster_guide_is_the_strand() {
        let mk = |o: f64| Strand::new(vec![Vec3::new(o, 0.0, 0.0), Vec3::new(o, 1.0, 0.3), Vec3::new(o, 2.0, 0.1)]).unwrap();
        let h = Hairstyle::new(vec![mk(0.0), mk(0.01), mk(5.0)]);
        let clusters = cluster_strands(&h, 2, 7).unwrap();
        let single = clusters.iter().find(|c| c.members.len() == 1).unwrap();
        assert_eq!(single.guide, h.strands[single.members[0]]);
        let pair = clusters.iter().find(|c| c.members.len() == 2).unwrap();
        for (g, (a, b)) in pair.guide.points().iter().zip(h.strands[0].points().iter().zip(h.strands[1].points())) {
            assert!((g - (a + b) * 0.5).norm() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn lloyd_invariants(seed in 0u64..1000, n in 5usize..60, k in 1usize..6, dim in 1usize..5) {
            let k = k.min(n);
            let s = rand_samples(n, dim, seed);
            let r = kmeans(&s, k, seed, 100, 1e-12).unwrap();
            for w in r.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
            for (i, x) in s.iter().enumerate() {
                let own = dist2(x, &r.centroids[r.assignments[i]]);
                for c in &r.centroids {
                    prop_assert!(own <= dist2(x, c) + 1e-9);
                }
            }
            let again = kmeans(&s, k, seed, 100, 1e-12).unwrap();
            prop_assert_eq!(again, r);
        }
    }
}
