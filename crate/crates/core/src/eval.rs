//! Point-cloud evaluation: accuracy, completeness and F1 at a distance
//! threshold, with exact fixed-radius neighbor queries over a voxel index.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;

/// Bidirectional distance metrics at one threshold, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub completeness: f64,
    pub f1: f64,
}

/// Uniform voxel hash supporting exact "any point within r" queries.
struct VoxelIndex<'a> {
    cell: f64,
    points: &'a [Vector3<f64>],
    map: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> VoxelIndex<'a> {
    fn build(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let cell = if cell > 0.0 { cell } else { 1.0 };
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i as u32);
        }
        VoxelIndex { cell, points, map }
    }

    #[inline]
    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Exact: the query ball of radius `r ≤ cell` only intersects the 27
    /// neighboring voxels.
    fn any_within(&self, p: &Vector3<f64>, r: f64) -> bool {
        debug_assert!(r <= self.cell + 1e-12);
        let (kx, ky, kz) = Self::key(p, self.cell);
        let r2 = r * r;
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(bucket) = self.map.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in bucket {
                            if (self.points[i as usize] - p).norm_squared() <= r2 {
                                return true;
                            }
                        }
                    }
                }
            }
        }
        false
    }
}

fn percent_within(queries: &[Vector3<f64>], targets: &[Vector3<f64>], tau: f64) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    if targets.is_empty() {
        return 0.0;
    }
    let index = VoxelIndex::build(targets, tau);
    let hits = queries
        .par_iter()
        .filter(|q| index.any_within(q, tau))
        .count();
    100.0 * hits as f64 / queries.len() as f64
}

/// Evaluate a reconstructed cloud against ground truth at threshold `tau`.
///
/// Accuracy: percent of cloud points with a ground-truth point within `tau`.
/// Completeness: percent of ground-truth points with a cloud point within
/// `tau`. F1 is their harmonic mean.
pub fn evaluate(cloud: &[Vector3<f64>], gt: &[Vector3<f64>], tau: f64) -> EvalReport {
    let accuracy = percent_within(cloud, gt, tau);
    let completeness = percent_within(gt, cloud, tau);
    let f1 = if accuracy + completeness > 0.0 {
        2.0 * accuracy * completeness / (accuracy + completeness)
    } else {
        0.0
    };
    EvalReport {
        threshold: tau,
        accuracy,
        completeness,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_grid(n: usize) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    pts.push(Vector3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        pts
    }

    #[test]
    fn identical_clouds_score_perfectly() {
        let gt = unit_grid(6);
        let r = evaluate(&gt, &gt, 0.1);
        assert_eq!((r.accuracy, r.completeness, r.f1), (100.0, 100.0, 100.0));
    }

    #[test]
    fn translation_beyond_threshold_zeroes_accuracy() {
        let gt = unit_grid(5);
        let tau = 0.2;
        let moved: Vec<_> = gt
            .iter()
            .map(|p| p + Vector3::new(2.0 * tau, 0.0, 0.0))
            .collect();
        let r = evaluate(&moved, &gt, tau);
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.completeness, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn half_grid_scores_exact_f1() {
        let gt = unit_grid(10);
        let cloud: Vec<_> = gt.iter().step_by(2).cloned().collect();
        let r = evaluate(&cloud, &gt, 0.25);
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.completeness, 50.0);
        assert!((r.f1 - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn swap_exchanges_accuracy_and_completeness() {
        let gt = unit_grid(7);
        let cloud: Vec<_> = gt.iter().step_by(3).cloned().collect();
        let fwd = evaluate(&cloud, &gt, 0.4);
        let rev = evaluate(&gt, &cloud, 0.4);
        assert_eq!(fwd.accuracy, rev.completeness);
        assert_eq!(fwd.completeness, rev.accuracy);
    }

    #[test]
    fn metrics_are_monotone_in_threshold() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<_> = (0..500)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let cloud: Vec<_> = (0..400)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let mut last = (0.0, 0.0);
        for tau in [0.01, 0.03, 0.1, 0.3] {
            let r = evaluate(&cloud, &gt, tau);
            assert!(r.accuracy + 1e-9 >= last.0);
            assert!(r.completeness + 1e-9 >= last.1);
            last = (r.accuracy, r.completeness);
        }
    }
}
