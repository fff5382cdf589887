//! Reference drift fields.
//!
//! A [`ReferenceField`] is the prescribed motion the learned process is pulled
//! toward. Analytic variants serve the synthetic benchmarks; the k-NN kernel
//! builds a continuous field out of per-particle velocity observations; the
//! filtered and corrupted wrappers support robustness studies.
//!
//! Fields are immutable after construction and safe to evaluate concurrently.
//! Noise-bearing variants draw from a counter-based generator keyed on
//! `(seed, query point)`, so the draw at a point never depends on evaluation
//! order.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numkit::{dist, sigmoid, Matrix};
use crate::rng;

const EXACT_HIT_EPS: f64 = 1e-12;
/// Guard added to distances in the inverse-distance weighting.
const INV_DIST_EPS: f64 = 1e-9;

/// How k-NN neighbor velocities are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// Inverse-distance weights `1/(dᵢ + ε)`, normalized. Closer neighbors
    /// count more — the smoothing reading of the kernel.
    #[default]
    InverseDistance,
    /// Raw distance ratio `dᵢ / Σⱼ dⱼ`. Weights *far* neighbors more; kept
    /// behind this switch for comparison.
    DistanceRatio,
}

/// k nearest neighbors with attached velocities.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    points: Matrix,
    velocities: Matrix,
    k: usize,
}

impl KnnIndex {
    pub fn new(points: Matrix, velocities: Matrix, k: usize) -> Result<Self> {
        if velocities.rows() != points.rows() || velocities.cols() != points.cols() {
            return Err(Error::dimension(format!(
                "velocities {}x{} do not match points {}x{}",
                velocities.rows(),
                velocities.cols(),
                points.rows(),
                points.cols()
            )));
        }
        if k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if k > points.rows() {
            return Err(Error::config(
                "k",
                format!("k = {k} exceeds the {} reference points", points.rows()),
            ));
        }
        Ok(KnnIndex {
            points,
            velocities,
            k,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Indices and distances of the k nearest reference points, closest
    /// first; distance ties break by index.
    pub fn query(&self, x: &[f64]) -> Vec<(usize, f64)> {
        let n = self.points.rows();
        let mut all: Vec<(usize, f64)> = (0..n)
            .map(|i| (i, dist(self.points.row(i), x)))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0))
        };
        if self.k < n {
            all.select_nth_unstable_by(self.k - 1, cmp);
            all.truncate(self.k);
        }
        all.sort_by(cmp);
        all
    }

    /// Weighted combination of the k nearest neighbors' velocities.
    ///
    /// Weights are nonnegative and sum to one, so the estimate lies in the
    /// convex hull of the neighbor velocities. A query at distance ~0 from a
    /// reference point returns that point's velocity exactly.
    pub fn estimate(&self, x: &[f64], weighting: Weighting) -> Vec<f64> {
        let neighbors = self.query(x);
        let d = self.dim();
        let mut out = vec![0.0; d];

        let hits: Vec<usize> = neighbors
            .iter()
            .filter(|(_, dst)| *dst <= EXACT_HIT_EPS)
            .map(|(i, _)| *i)
            .collect();
        if !hits.is_empty() {
            for &i in &hits {
                for (o, v) in out.iter_mut().zip(self.velocities.row(i)) {
                    *o += v;
                }
            }
            let inv = 1.0 / hits.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
            return out;
        }

        let raw: Vec<f64> = match weighting {
            Weighting::InverseDistance => neighbors
                .iter()
                .map(|(_, dst)| 1.0 / (dst + INV_DIST_EPS))
                .collect(),
            Weighting::DistanceRatio => neighbors.iter().map(|(_, dst)| *dst).collect(),
        };
        let total: f64 = raw.iter().sum();
        for ((i, _), w) in neighbors.iter().zip(&raw) {
            let w = w / total;
            for (o, v) in out.iter_mut().zip(self.velocities.row(*i)) {
                *o += w * v;
            }
        }
        out
    }

    /// Mean distance to the k nearest neighbors; the gate input for
    /// [`ReferenceField::filtered`].
    pub fn mean_neighbor_distance(&self, x: &[f64]) -> f64 {
        let neighbors = self.query(x);
        neighbors.iter().map(|(_, d)| d).sum::<f64>() / neighbors.len() as f64
    }
}

/// The reference drift `f(x, t)`.
///
/// All built-in variants are autonomous (`f_t = f`); the interface still takes
/// `t` so time-varying fields can be plugged in later.
#[derive(Debug, Clone)]
pub enum ReferenceField {
    /// `f ≡ 0` in `R^dim`.
    Zero { dim: usize },
    /// Planar rotation `ω·(−x₂, x₁)`; divergence-free.
    Rotational2D { omega: f64 },
    /// Constant advection in the first coordinate plus a rigid rotation of
    /// coordinates 2–3: `(speed, ω·x₃, −ω·x₂, 0, …)`. Needs `dim ≥ 3`.
    Spiral { speed: f64, omega: f64, dim: usize },
    /// Kernel estimate from observed velocities.
    KnnKernel {
        index: KnnIndex,
        weighting: Weighting,
    },
    /// Sigmoid-gated blend of a k-NN field with Gaussian noise far from data.
    Filtered {
        inner: Box<ReferenceField>,
        gamma: f64,
        noise_var: f64,
        seed: u64,
    },
    /// `(1−β)·f + β·noise` for robustness ablations.
    Corrupted {
        inner: Box<ReferenceField>,
        beta: f64,
        seed: u64,
    },
}

impl ReferenceField {
    pub fn spiral(speed: f64, omega: f64, dim: usize) -> Result<Self> {
        if dim < 3 {
            return Err(Error::config(
                "dim",
                "spiral field rotates coordinates 2-3 and needs dim >= 3",
            ));
        }
        Ok(ReferenceField::Spiral { speed, omega, dim })
    }

    pub fn knn(
        points: Matrix,
        velocities: Option<Matrix>,
        k: usize,
        weighting: Weighting,
    ) -> Result<Self> {
        let velocities = velocities.ok_or_else(|| {
            Error::config("velocities", "k-NN reference field needs source velocities")
        })?;
        Ok(ReferenceField::KnnKernel {
            index: KnnIndex::new(points, velocities, k)?,
            weighting,
        })
    }

    /// Down-weight the kernel estimate far from the data: the result is
    /// `(1−w)·f + w·N(0, noise_var)` with `w = sigmoid(knn distance − γ)`.
    /// Only defined over a k-NN inner field.
    pub fn filtered(self, gamma: f64, noise_var: f64, seed: u64) -> Result<Self> {
        if !matches!(self, ReferenceField::KnnKernel { .. }) {
            return Err(Error::config(
                "inner",
                "velocity filtering applies to a k-NN kernel field",
            ));
        }
        Ok(ReferenceField::Filtered {
            inner: Box::new(self),
            gamma,
            noise_var,
            seed,
        })
    }

    /// Blend with seeded standard-Gaussian noise: `(1−β)·f + β·n(x)`.
    pub fn corrupted(self, beta: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("beta", "must lie in [0, 1]"));
        }
        Ok(ReferenceField::Corrupted {
            inner: Box::new(self),
            beta,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ReferenceField::Zero { dim } => *dim,
            ReferenceField::Rotational2D { .. } => 2,
            ReferenceField::Spiral { dim, .. } => *dim,
            ReferenceField::KnnKernel { index, .. } => index.dim(),
            ReferenceField::Filtered { inner, .. } | ReferenceField::Corrupted { inner, .. } => {
                inner.dim()
            }
        }
    }

    /// Evaluate the drift at a point. Total once constructed.
    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim());
        match self {
            ReferenceField::Zero { dim } => vec![0.0; *dim],
            ReferenceField::Rotational2D { omega } => vec![-omega * x[1], omega * x[0]],
            ReferenceField::Spiral { speed, omega, dim } => {
                let mut v = vec![0.0; *dim];
                v[0] = *speed;
                v[1] = omega * x[2];
                v[2] = -omega * x[1];
                v
            }
            ReferenceField::KnnKernel { index, weighting } => index.estimate(x, *weighting),
            ReferenceField::Filtered {
                inner,
                gamma,
                noise_var,
                seed,
            } => {
                let base = inner.eval(x, t);
                let index = match inner.as_ref() {
                    ReferenceField::KnnKernel { index, .. } => index,
                    _ => unreachable!("filtered wraps a k-NN field by construction"),
                };
                let w = sigmoid(index.mean_neighbor_distance(x) - gamma);
                let noise = seeded_noise(*seed, x, noise_var.sqrt());
                base.iter()
                    .zip(noise)
                    .map(|(f, n)| (1.0 - w) * f + w * n)
                    .collect()
            }
            ReferenceField::Corrupted { inner, beta, seed } => {
                let base = inner.eval(x, t);
                if *beta == 0.0 {
                    return base;
                }
                let noise = seeded_noise(*seed, x, 1.0);
                base.iter()
                    .zip(noise)
                    .map(|(f, n)| (1.0 - beta) * f + beta * n)
                    .collect()
            }
        }
    }

    /// Evaluate rows of a batch.
    pub fn eval_batch(&self, xs: &Matrix, ts: &[f64]) -> Result<Matrix> {
        if xs.cols() != self.dim() {
            return Err(Error::dimension(format!(
                "field over R^{} evaluated on {}-column batch",
                self.dim(),
                xs.cols()
            )));
        }
        let mut out = Matrix::zeros(xs.rows(), xs.cols());
        for r in 0..xs.rows() {
            let v = self.eval(xs.row(r), ts[r]);
            out.row_mut(r).copy_from_slice(&v);
        }
        Ok(out)
    }

    /// `(∂f/∂x)ᵀ · a` when the field is analytically differentiable in `x`;
    /// `None` for data-driven fields, whose kernel weights are treated as
    /// constants within a training step.
    pub fn jacobian_t_vec(&self, _x: &[f64], _t: f64, a: &[f64]) -> Option<Vec<f64>> {
        match self {
            ReferenceField::Zero { dim } => Some(vec![0.0; *dim]),
            ReferenceField::Rotational2D { omega } => Some(vec![omega * a[1], -omega * a[0]]),
            ReferenceField::Spiral { omega, dim, .. } => {
                let mut out = vec![0.0; *dim];
                out[1] = -omega * a[2];
                out[2] = omega * a[1];
                Some(out)
            }
            ReferenceField::KnnKernel { .. }
            | ReferenceField::Filtered { .. }
            | ReferenceField::Corrupted { .. } => None,
        }
    }
}

fn seeded_noise(seed: u64, x: &[f64], scale: f64) -> Vec<f64> {
    let mut rng = rng::point_keyed(seed, x);
    (0..x.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}
