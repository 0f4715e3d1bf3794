//! Seeded synthetic datasets for demos, tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{ClassId, Point, PointSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureSpec {
    pub points: usize,
    pub classes: usize,
    /// Gaussian components per class.
    pub components: usize,
    /// Class sizes fall off as `1 / (rank + 1)^skew`; 0 gives equal classes.
    pub skew: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(points: usize, classes: usize, seed: u64) -> Self {
        MixtureSpec {
            points,
            classes,
            components: 2,
            skew: 0.8,
            seed,
        }
    }
}

/// Per-class sizes summing to `points`, every class getting at least one
/// point when `points >= classes`.
fn class_sizes(points: usize, classes: usize, skew: f64) -> Vec<usize> {
    let w: Vec<f64> = (0..classes).map(|i| (i as f64 + 1.0).powf(-skew)).collect();
    let total: f64 = w.iter().sum();
    let floor = usize::from(points >= classes);
    let spare = points - floor * classes;
    let mut sizes: Vec<usize> = w.iter().map(|x| floor + (x / total * spare as f64) as usize).collect();
    let mut short = points - sizes.iter().sum::<usize>();
    let mut i = 0;
    while short > 0 {
        sizes[i % classes] += 1;
        short -= 1;
        i += 1;
    }
    sizes
}

/// Gaussian mixture in the unit square, points emitted class by class.
pub fn gaussian_mixture(spec: &MixtureSpec) -> Result<PointSet> {
    if spec.classes == 0 || spec.classes > u16::MAX as usize || spec.components == 0 {
        return Err(Error::Config(format!(
            "mixture needs 1..{} classes and at least one component",
            u16::MAX
        )));
    }
    if spec.points == 0 {
        return Err(Error::Config("mixture needs at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sizes = class_sizes(spec.points, spec.classes, spec.skew);
    let mut points = Vec::with_capacity(spec.points);
    for (c, &size) in sizes.iter().enumerate() {
        let comps: Vec<(f64, f64, f64)> = (0..spec.components)
            .map(|_| {
                (
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.01..0.08),
                )
            })
            .collect();
        for i in 0..size {
            let (cx, cy, s) = comps[i % comps.len()];
            let n = Normal::new(0.0, s).expect("positive sigma");
            points.push(Point::new(cx + n.sample(&mut rng), cy + n.sample(&mut rng), ClassId(c as u16)));
        }
    }
    PointSet::with_anonymous_classes(points, spec.classes)
}

/// High-dynamic-range fixture: a dense blob of class 0 (`dense` points), a
/// sparse blob of class 1 (`sparse` points) and `outliers` isolated points of
/// class 2 spread over the empty parts of the square.
pub fn hdr_fixture(dense: usize, sparse: usize, outliers: usize, seed: u64) -> Result<PointSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tight = Normal::new(0.0, 0.03).expect("positive sigma");
    let wide = Normal::new(0.0, 0.10).expect("positive sigma");
    let mut points = Vec::with_capacity(dense + sparse + outliers);
    for _ in 0..dense {
        points.push(Point::new(0.3 + tight.sample(&mut rng), 0.5 + tight.sample(&mut rng), ClassId(0)));
    }
    for _ in 0..sparse {
        points.push(Point::new(0.7 + wide.sample(&mut rng), 0.5 + wide.sample(&mut rng), ClassId(1)));
    }
    for i in 0..outliers {
        let a = i as f64 / outliers.max(1) as f64 * std::f64::consts::TAU;
        points.push(Point::new(0.5 + 0.45 * a.cos(), 0.5 + 0.45 * a.sin(), ClassId(2)));
    }
    // Pin the frame so normalization does not depend on the blob tails.
    points.push(Point::new(-0.05, -0.05, ClassId(1)));
    points.push(Point::new(1.05, 1.05, ClassId(1)));
    PointSet::with_anonymous_classes(points, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_sum_and_floor() {
        for (n, k) in [(10, 3), (1000, 100), (5, 5), (3, 7)] {
            let s = class_sizes(n, k, 0.8);
            assert_eq!(s.iter().sum::<usize>(), n);
            if n >= k {
                assert!(s.iter().all(|&v| v >= 1));
            }
        }
    }

    #[test]
    fn mixture_is_seeded() {
        let spec = MixtureSpec::new(2000, 5, 7);
        let a = gaussian_mixture(&spec).unwrap();
        let b = gaussian_mixture(&spec).unwrap();
        assert_eq!(a.points(), b.points());
        assert_eq!(a.len(), 2000);
        assert_eq!(a.class_count(), 5);
        let c = gaussian_mixture(&MixtureSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.points(), c.points());
    }

    #[test]
    fn hdr_counts() {
        let ps = hdr_fixture(1000, 100, 20, 1).unwrap();
        assert_eq!(ps.class_counts(), &[1000, 102, 20]);
    }
}
