//! Points, batches, the quadratic cost and the two planar test measures.
//!
//! The source measure is uniform on the closed unit disk. The target measure
//! is uniform on four disks of radius 1/2 centred at (±1, ±1), each carrying
//! a quarter of the mass.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the plane.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x0: f64,
    pub x1: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x0: 0.0, x1: 0.0 };

    pub const fn new(x0: f64, x1: f64) -> Self {
        Point2 { x0, x1 }
    }

    pub fn norm_sq(self) -> f64 {
        self.x0 * self.x0 + self.x1 * self.x1
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x0.is_finite() && self.x1.is_finite()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x0, self.x1]
    }
}

impl From<[f64; 2]> for Point2 {
    fn from(a: [f64; 2]) -> Self {
        Point2::new(a[0], a[1])
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x0 + o.x0, self.x1 + o.x1)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x0 - o.x0, self.x1 - o.x1)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x0 * s, self.x1 * s)
    }
}

/// Which cloud a batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Source,
    Target,
    Mapped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: Vec<Point2>,
    pub role: Role,
}

impl SampleBatch {
    pub fn new(points: Vec<Point2>, role: Role) -> Self {
        SampleBatch { points, role }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Coordinates laid out row by row, as consumed by [`crate::nn::Mlp`].
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x0, p.x1]).collect()
    }

    pub fn from_flat(flat: &[f64], role: Role) -> Self {
        let points = flat
            .chunks_exact(2)
            .map(|c| Point2::new(c[0], c[1]))
            .collect();
        SampleBatch { points, role }
    }

    pub fn ensure_non_empty(&self, what: &'static str) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyBatch(what))
        } else {
            Ok(())
        }
    }
}

/// Dense `rows × cols` matrix of pairwise costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn from_vec(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: entries.len(),
                context: "cost matrix entries",
            });
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter(
                "cost entries must be finite".into(),
            ));
        }
        Ok(CostMatrix {
            rows,
            cols,
            entries,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut entries = Vec::with_capacity(self.entries.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                entries.push(self.get(i, j));
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            entries,
        }
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }
}

/// ‖a − b‖².
#[inline]
pub fn squared_euclidean_cost(a: Point2, b: Point2) -> f64 {
    (a - b).norm_sq()
}

pub fn cost_matrix(xs: &SampleBatch, ys: &SampleBatch) -> Result<CostMatrix> {
    xs.ensure_non_empty("cost matrix source batch")?;
    ys.ensure_non_empty("cost matrix target batch")?;
    let mut entries = Vec::with_capacity(xs.len() * ys.len());
    for &x in &xs.points {
        entries.extend(ys.points.iter().map(|&y| squared_euclidean_cost(x, y)));
    }
    CostMatrix::from_vec(xs.len(), ys.len(), entries)
}

/// Uniform point in the closed disk of the given centre and radius.
fn sample_disk<R: Rng + ?Sized>(rng: &mut R, center: Point2, radius: f64) -> Point2 {
    let r = radius * rng.gen::<f64>().sqrt();
    let theta = 2.0 * PI * rng.gen::<f64>();
    Point2::new(center.x0 + r * theta.cos(), center.x1 + r * theta.sin())
}

/// `n` i.i.d. points of the source measure (uniform on the unit disk).
pub fn sample_unit_ball<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SampleBatch {
    let points = (0..n)
        .map(|_| sample_disk(rng, Point2::ORIGIN, 1.0))
        .collect();
    SampleBatch::new(points, Role::Source)
}

pub const BALL_CENTERS: [Point2; 4] = [
    Point2::new(1.0, 1.0),
    Point2::new(-1.0, 1.0),
    Point2::new(-1.0, -1.0),
    Point2::new(1.0, -1.0),
];

pub const BALL_RADIUS: f64 = 0.5;

/// `n` i.i.d. points of the target measure (four half-radius disks, equal weights).
pub fn sample_four_balls<R: Rng + ?Sized>(n: usize, rng: &mut R) -> SampleBatch {
    let points = (0..n)
        .map(|_| {
            let center = BALL_CENTERS[rng.gen_range(0..BALL_CENTERS.len())];
            sample_disk(rng, center, BALL_RADIUS)
        })
        .collect();
    SampleBatch::new(points, Role::Target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn squared_cost_examples() {
        let o = Point2::ORIGIN;
        assert_eq!(squared_euclidean_cost(o, o), 0.0);
        assert_eq!(squared_euclidean_cost(o, Point2::new(1.0, 1.0)), 2.0);
        assert_eq!(
            squared_euclidean_cost(Point2::new(1.0, 1.0), Point2::new(-1.0, -1.0)),
            8.0
        );
    }

    #[test]
    fn cost_matrix_small() {
        let x = SampleBatch::new(vec![Point2::ORIGIN], Role::Source);
        let c = cost_matrix(&x, &x).unwrap();
        assert_eq!(c.entries(), &[0.0]);

        let x = SampleBatch::new(vec![Point2::ORIGIN, Point2::new(1.0, 0.0)], Role::Source);
        let y = SampleBatch::new(vec![Point2::new(1.0, 0.0)], Role::Target);
        let c = cost_matrix(&x, &y).unwrap();
        assert_eq!((c.rows(), c.cols()), (2, 1));
        assert_eq!(c.entries(), &[1.0, 0.0]);
    }

    #[test]
    fn cost_matrix_matches_entrywise_loop() {
        let mut rng = seeded(3, 0);
        let x = sample_unit_ball(32, &mut rng);
        let y = sample_four_balls(48, &mut rng);
        let c = cost_matrix(&x, &y).unwrap();
        for i in 0..32 {
            for j in 0..48 {
                let dx = x.points[i].x0 - y.points[j].x0;
                let dy = x.points[i].x1 - y.points[j].x1;
                assert_eq!(c.get(i, j), dx * dx + dy * dy);
            }
        }
    }

    #[test]
    fn cost_matrix_rejects_empty() {
        let x = SampleBatch::new(vec![], Role::Source);
        let y = SampleBatch::new(vec![Point2::ORIGIN], Role::Target);
        assert!(matches!(cost_matrix(&x, &y), Err(Error::EmptyBatch(_))));
        assert!(matches!(cost_matrix(&y, &x), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn empty_samples() {
        let mut rng = seeded(0, 0);
        assert!(sample_unit_ball(0, &mut rng).is_empty());
        assert!(sample_four_balls(0, &mut rng).is_empty());
    }

    #[test]
    fn unit_ball_support_and_moments() {
        let n = 100_000;
        let mut rng = seeded(11, 0);
        let b = sample_unit_ball(n, &mut rng);
        assert_eq!(b.role, Role::Source);
        assert!(b.points.iter().all(|p| p.norm() <= 1.0));
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for p in &b.points {
            m0 += p.x0;
            m1 += p.x1;
            m2 += p.norm_sq();
        }
        let nf = n as f64;
        // Closed-form disk moments: mean 0, E‖p‖² = 1/2.
        assert!((m0 / nf).abs() < 0.02);
        assert!((m1 / nf).abs() < 0.02);
        assert!((m2 / nf - 0.5).abs() < 0.02);
    }

    #[test]
    fn four_balls_support_and_balance() {
        let n = 100_000;
        let mut rng = seeded(12, 0);
        let b = sample_four_balls(n, &mut rng);
        assert_eq!(b.role, Role::Target);
        let mut counts = [0usize; 4];
        for p in &b.points {
            let k = BALL_CENTERS
                .iter()
                .position(|&c| (*p - c).norm() <= BALL_RADIUS + 1e-12)
                .expect("point outside every ball");
            counts[k] += 1;
        }
        // Binomial(n, 1/4): sigma = sqrt(n * 1/4 * 3/4).
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!(
                (c as f64 - n as f64 / 4.0).abs() < 3.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let a = sample_four_balls(500, &mut seeded(5, 1));
        let b = sample_four_balls(500, &mut seeded(5, 1));
        assert_eq!(a, b);
        let c = sample_unit_ball(500, &mut seeded(5, 1));
        let d = sample_unit_ball(500, &mut seeded(5, 1));
        assert_eq!(c, d);
    }

    proptest! {
        #[test]
        fn cost_matrix_transpose_symmetry(seed in 0u64..1000, n in 1usize..12, m in 1usize..12) {
            let mut rng = seeded(seed, 0);
            let x = sample_unit_ball(n, &mut rng);
            let y = sample_four_balls(m, &mut rng);
            let cxy = cost_matrix(&x, &y).unwrap();
            let cyx = cost_matrix(&y, &x).unwrap();
            prop_assert_eq!(cxy.transpose(), cyx);
        }
    }
}
