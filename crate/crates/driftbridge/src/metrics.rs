//! Evaluation metrics: empirical transport distances, kernel two-sample
//! discrepancy, and drift-alignment measures along integrated trajectories.
//!
//! The transport distances pair equal-size empirical sets by exact assignment;
//! a larger set is first subsampled (seeded) down to the smaller. Alignment
//! metrics compare the learned drift against the reference field at every
//! recorded trajectory state, averaged over particles and steps.

use rand::seq::index::sample as index_sample;

use crate::coupling::{solve_assignment, CostMatrix, TimeSampling};
use crate::error::{Error, Result};
use crate::fields::ReferenceField;
use crate::matcher::BridgeModel;
use crate::numkit::{dist, dist_sq, norm, Matrix};
use crate::rng;
use crate::simulate::Trajectory;

/// Norm threshold below which a velocity pair is skipped in cosine distance.
const DEGENERATE_NORM: f64 = 1e-9;

fn equalize<'a>(
    a: &'a Matrix,
    b: &'a Matrix,
    seed: u64,
) -> Result<(std::borrow::Cow<'a, Matrix>, std::borrow::Cow<'a, Matrix>)> {
    use std::borrow::Cow;
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::config("sets", "empirical sets must be nonempty"));
    }
    if a.cols() != b.cols() {
        return Err(Error::dimension(format!(
            "point sets in R^{} and R^{}",
            a.cols(),
            b.cols()
        )));
    }
    let n = a.rows().min(b.rows());
    let shrink = |m: &Matrix, label: &str| -> Matrix {
        let mut stream = rng::stream(seed, label);
        let mut idx: Vec<usize> = index_sample(&mut stream, m.rows(), n).into_vec();
        idx.sort_unstable();
        m.select_rows(&idx)
    };
    let a_out = if a.rows() > n {
        Cow::Owned(shrink(a, "metrics/subsample-a"))
    } else {
        Cow::Borrowed(a)
    };
    let b_out = if b.rows() > n {
        Cow::Owned(shrink(b, "metrics/subsample-b"))
    } else {
        Cow::Borrowed(b)
    };
    Ok((a_out, b_out))
}

/// 2-Wasserstein distance between empirical sets:
/// `√( minimum over pairings of the mean squared distance )`.
pub fn wasserstein2(a: &Matrix, b: &Matrix, subsample_seed: u64) -> Result<f64> {
    let (a, b) = equalize(a, b, subsample_seed)?;
    let n = a.rows();
    let mut costs = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            costs.set(i, j, dist_sq(a.row(i), b.row(j)));
        }
    }
    let coupling = solve_assignment(&CostMatrix::from_matrix(costs, TimeSampling::default()))?;
    Ok((coupling.total_cost / n as f64).sqrt())
}

/// Earth mover's distance between equal-weight empiricals: the minimum over
/// pairings of the mean (unsquared) Euclidean distance.
pub fn emd(a: &Matrix, b: &Matrix, subsample_seed: u64) -> Result<f64> {
    let (a, b) = equalize(a, b, subsample_seed)?;
    let n = a.rows();
    let mut costs = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            costs.set(i, j, dist(a.row(i), b.row(j)));
        }
    }
    let coupling = solve_assignment(&CostMatrix::from_matrix(costs, TimeSampling::default()))?;
    Ok(coupling.total_cost / n as f64)
}

/// Gaussian-kernel bandwidth selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled sets.
    Median,
    Fixed(f64),
}

fn resolve_bandwidth(a: &Matrix, b: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    match bandwidth {
        Bandwidth::Fixed(h) => {
            if h <= 0.0 {
                return Err(Error::config("bandwidth", "must be positive"));
            }
            Ok(h)
        }
        Bandwidth::Median => {
            let mut pooled: Vec<&[f64]> = Vec::with_capacity(a.rows() + b.rows());
            pooled.extend((0..a.rows()).map(|i| a.row(i)));
            pooled.extend((0..b.rows()).map(|i| b.row(i)));
            let mut dists = Vec::new();
            for i in 0..pooled.len() {
                for j in (i + 1)..pooled.len() {
                    dists.push(dist(pooled[i], pooled[j]));
                }
            }
            dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let mid = dists.len() / 2;
            let h = if dists.len() % 2 == 0 {
                0.5 * (dists[mid - 1] + dists[mid])
            } else {
                dists[mid]
            };
            if h <= 0.0 {
                // all points coincide; any positive bandwidth gives MMD 0
                Ok(1.0)
            } else {
                Ok(h)
            }
        }
    }
}

fn gaussian_kernel(x: &[f64], y: &[f64], h: f64) -> f64 {
    (-dist_sq(x, y) / (2.0 * h * h)).exp()
}

/// Unbiased squared-MMD estimate with a Gaussian kernel, before clamping.
pub fn mmd_unclamped(a: &Matrix, b: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    let (n, m) = (a.rows(), b.rows());
    if n < 2 || m < 2 {
        return Err(Error::config(
            "sets",
            "the unbiased estimator needs at least two samples per set",
        ));
    }
    let h = resolve_bandwidth(a, b, bandwidth)?;
    let mut kaa = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kaa += gaussian_kernel(a.row(i), a.row(j), h);
            }
        }
    }
    kaa /= (n * (n - 1)) as f64;
    let mut kbb = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kbb += gaussian_kernel(b.row(i), b.row(j), h);
            }
        }
    }
    kbb /= (m * (m - 1)) as f64;
    let mut kab = 0.0;
    for i in 0..n {
        for j in 0..m {
            kab += gaussian_kernel(a.row(i), b.row(j), h);
        }
    }
    kab /= (n * m) as f64;
    Ok(kaa + kbb - 2.0 * kab)
}

/// Unbiased squared-MMD estimate, clamped at zero for reporting.
pub fn mmd(a: &Matrix, b: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    Ok(mmd_unclamped(a, b, bandwidth)?.max(0.0))
}

/// Alignment statistics of learned velocities against the reference drift.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentReport {
    pub value: f64,
    /// Pairs skipped because either velocity was numerically zero.
    pub skipped: usize,
    pub compared: usize,
}

fn recorded_velocities<'t>(traj: &'t Trajectory) -> Result<&'t [Matrix]> {
    traj.velocities.as_deref().ok_or_else(|| {
        Error::config(
            "trajectory",
            "no recorded velocities; re-evaluate the model along the states first",
        )
    })
}

/// Fill in model velocities for a trajectory that lacks them (e.g. one parsed
/// from CSV).
pub fn reeval_velocities(model: &BridgeModel, traj: &mut Trajectory) -> Result<()> {
    let mut velocities = Vec::with_capacity(traj.states.len().saturating_sub(1));
    for (k, state) in traj.states.iter().enumerate().take(traj.states.len() - 1) {
        let t_row = vec![traj.times[k]; state.rows()];
        velocities.push(model.drift_at(state, &t_row)?);
    }
    traj.velocities = Some(velocities);
    Ok(())
}

/// Mean cosine distance `1 − ⟨v, f⟩ / (‖v‖·‖f‖)` over (particle, step),
/// comparing recorded model velocities with the reference drift at the same
/// states. Degenerate pairs are skipped and counted; all-degenerate input is
/// an undefined-metric error.
pub fn cosine_distance_along(traj: &Trajectory, field: &ReferenceField) -> Result<AlignmentReport> {
    let velocities = recorded_velocities(traj)?;
    let mut total = 0.0;
    let mut compared = 0usize;
    let mut skipped = 0usize;
    for (k, v) in velocities.iter().enumerate() {
        let state = &traj.states[k];
        let t = traj.times[k];
        for p in 0..state.rows() {
            let f = field.eval(state.row(p), t);
            let vn = norm(v.row(p));
            let fn_ = norm(&f);
            if vn < DEGENERATE_NORM || fn_ < DEGENERATE_NORM {
                skipped += 1;
                continue;
            }
            let dot: f64 = v.row(p).iter().zip(&f).map(|(x, y)| x * y).sum();
            total += 1.0 - dot / (vn * fn_);
            compared += 1;
        }
    }
    if compared == 0 {
        return Err(Error::UndefinedMetric(
            "every velocity pair was degenerate".into(),
        ));
    }
    Ok(AlignmentReport {
        value: total / compared as f64,
        skipped,
        compared,
    })
}

/// Whether the L2 alignment cost averages `‖v − f‖²` (default) or `‖v − f‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum L2Mode {
    #[default]
    Squared,
    Unsquared,
}

/// Mean L2 cost between recorded model velocities and the reference drift.
pub fn l2_cost_along(traj: &Trajectory, field: &ReferenceField, mode: L2Mode) -> Result<f64> {
    let velocities = recorded_velocities(traj)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, v) in velocities.iter().enumerate() {
        let state = &traj.states[k];
        let t = traj.times[k];
        for p in 0..state.rows() {
            let f = field.eval(state.row(p), t);
            let sq = dist_sq(v.row(p), &f);
            total += match mode {
                L2Mode::Squared => sq,
                L2Mode::Unsquared => sq.sqrt(),
            };
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("empty trajectory".into()));
    }
    Ok(total / count as f64)
}

/// Mean squared Euclidean error between index-aligned predictions and ground
/// truth (the known-coupling protocol).
pub fn mse_known_coupling(predicted: &Matrix, truth: &Matrix) -> Result<f64> {
    if predicted.rows() != truth.rows() || predicted.cols() != truth.cols() {
        return Err(Error::dimension(format!(
            "predicted {}x{} vs truth {}x{}",
            predicted.rows(),
            predicted.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    if predicted.rows() == 0 {
        return Err(Error::config("sets", "empty prediction set"));
    }
    let n = predicted.rows();
    let total: f64 = (0..n)
        .map(|i| dist_sq(predicted.row(i), truth.row(i)))
        .sum();
    Ok(total / n as f64)
}

/// Fraction of particles whose true partner (same index) is among the `k`
/// ground-truth points nearest to the prediction. Distance ties break by
/// index.
pub fn precision_at_k(predicted: &Matrix, truth: &Matrix, k: usize) -> Result<f64> {
    if predicted.rows() != truth.rows() {
        return Err(Error::dimension("index-aligned sets required".to_string()));
    }
    let n = truth.rows();
    if k == 0 || k > n {
        return Err(Error::config(
            "k",
            format!("k = {k} outside 1..={n}"),
        ));
    }
    let mut hits = 0usize;
    for i in 0..n {
        let mut ranked: Vec<(usize, f64)> = (0..n)
            .map(|j| (j, dist_sq(predicted.row(i), truth.row(j))))
            .collect();
        ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        if ranked[..k].iter().any(|&(j, _)| j == i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// One evaluated metric value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub dataset: String,
    /// Index of the marginal the metric refers to, when marginal-specific.
    pub marginal: Option<usize>,
    pub metric: String,
    pub seed: u64,
    pub value: f64,
}

/// A collection of metric rows with CSV emitters matching the run artifacts.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Per-seed rows: `method,dataset,marginal,metric,seed,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,dataset,marginal,metric,seed,value\n");
        for r in &self.rows {
            let marginal = r
                .marginal
                .map(|m| m.to_string())
                .unwrap_or_else(|| "all".into());
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.dataset, marginal, r.metric, r.seed, r.value
            ));
        }
        out
    }

    /// Mean ± std over seeds: `method,marginal,metric,mean,std`. Rows appear
    /// in first-encounter order.
    pub fn aggregate_csv(&self) -> String {
        let mut keys: Vec<(String, Option<usize>, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.marginal, r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let mut out = String::from("method,marginal,metric,mean,std\n");
        for (method, marginal, metric) in keys {
            let values: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.method == method && r.marginal == marginal && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / (values.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            let marginal = marginal.map(|m| m.to_string()).unwrap_or_else(|| "all".into());
            out.push_str(&format!("{method},{marginal},{metric},{mean},{std}\n"));
        }
        out
    }
}
