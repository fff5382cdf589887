//! Inference-time integration of a trained bridge model.
//!
//! Deterministic flow: explicit Euler on `dx/dt = v(x, t)`, optionally
//! carrying the log-density alongside via `d(log p)/dt = −∇·v`. Stochastic
//! flow: Euler–Maruyama on
//!
//! ```text
//! dx = [ v(x, t) + (σ²/2)·s(x, t) ]·dt + σ·dB ,
//! ```
//!
//! scaling the calibrated score estimate `s ≈ ∇log p` by the
//! diffusion-consistent `σ²/2`. Because the training weight bakes a `σ²/2`
//! into the raw score network (see
//! [`BridgeModel::score_at`](crate::matcher::BridgeModel::score_at)), this
//! default composition coincides with summing the two networks' raw outputs.
//! The unweighted `v + s` composition sits behind a switch.
//!
//! Particles are independent; each carries its own counter-based noise stream
//! keyed on `(seed, particle)`, so results do not depend on batch layout.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::BridgeModel;
use crate::numkit::{Matrix, Mlp};
use crate::rng;

/// Divergence tracking evaluates the network `dim` extra times per step; above
/// this dimension the cost balloons and tracking refuses.
pub const LOG_DENSITY_DIM_CAP: usize = 64;

/// How the score network enters the SDE drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreComposition {
    /// `v + (σ²/2)·s` — probability-flow-consistent weighting (default).
    #[default]
    Scaled,
    /// `v + s` — the raw sum, for replication.
    RawSum,
}

/// Particle paths sampled on a shared time grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Strictly increasing grid `t₀ … t_N`.
    pub times: Vec<f64>,
    /// One `n_particles × dim` state matrix per grid point.
    pub states: Vec<Matrix>,
    /// Per-particle log-density trace, present when tracking was requested.
    pub log_density: Option<Vec<Vec<f64>>>,
    /// Drift evaluations at each recorded state (except the last), when kept.
    pub velocities: Option<Vec<Matrix>>,
}

impl Trajectory {
    pub fn particles(&self) -> usize {
        self.states.first().map_or(0, Matrix::rows)
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Matrix::cols)
    }

    pub fn terminal(&self) -> &Matrix {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Write as CSV rows `particle,step,t,x1..xd`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("particle,step,t");
        for c in 1..=d {
            out.push_str(&format!(",x{c}"));
        }
        out.push('\n');
        for p in 0..self.particles() {
            for (s, state) in self.states.iter().enumerate() {
                out.push_str(&format!("{p},{s},{}", self.times[s]));
                for c in 0..d {
                    out.push_str(&format!(",{}", state.get(p, c)));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Parse a trajectory from the CSV layout written by [`Trajectory::to_csv`].
/// Velocities are not stored in the CSV; re-evaluate them against a model if
/// an alignment metric needs them.
pub fn parse_trajectory_csv(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "empty trajectory file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "particle" || cols[1] != "step" || cols[2] != "t" {
        return Err(Error::Parse {
            line: 1,
            reason: format!("unexpected trajectory header `{header}`"),
        });
    }
    let d = cols.len() - 3;

    let mut times: Vec<f64> = Vec::new();
    let mut rows: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut max_particle = 0usize;
    let mut max_step = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                reason: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let parse_usize = |s: &str| -> Result<usize> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("invalid index `{s}`"),
            })
        };
        let parse_f64 = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                reason: format!("invalid float `{s}`"),
            })
        };
        let particle = parse_usize(fields[0])?;
        let step = parse_usize(fields[1])?;
        let t = parse_f64(fields[2])?;
        let point: Result<Vec<f64>> = fields[3..].iter().map(|s| parse_f64(s)).collect();
        max_particle = max_particle.max(particle);
        max_step = max_step.max(step);
        if step >= times.len() {
            times.resize(step + 1, f64::NAN);
        }
        times[step] = t;
        rows.push((particle, step, point?));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            reason: "no data rows".into(),
        });
    }
    let n = max_particle + 1;
    let mut states = vec![Matrix::zeros(n, d); max_step + 1];
    for (particle, step, point) in rows {
        states[step].row_mut(particle).copy_from_slice(&point);
    }
    Ok(Trajectory {
        times,
        states,
        log_density: None,
        velocities: None,
    })
}

fn uniform_grid(span: (f64, f64), steps: usize) -> Vec<f64> {
    let (t0, t1) = span;
    let dt = (t1 - t0) / steps as f64;
    let mut grid: Vec<f64> = (0..=steps).map(|k| t0 + k as f64 * dt).collect();
    grid[steps] = t1;
    grid
}

fn check_start(model: &BridgeModel, x0: &Matrix, steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(Error::config("steps", "need at least one step"));
    }
    if x0.cols() != model.dim() {
        return Err(Error::dimension(format!(
            "start batch has {} columns; model dimension is {}",
            x0.cols(),
            model.dim()
        )));
    }
    Ok(())
}

/// Explicit Euler on the deterministic flow `dx/dt = v(x, t)` over `span`,
/// recording every grid state and the drift along the way.
pub fn integrate_ode(
    model: &BridgeModel,
    x0: &Matrix,
    steps: usize,
    span: (f64, f64),
) -> Result<Trajectory> {
    check_start(model, x0, steps)?;
    let times = uniform_grid(span, steps);
    let n = x0.rows();
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps);
    let mut x = x0.clone();
    states.push(x.clone());
    for k in 0..steps {
        let dt = times[k + 1] - times[k];
        let t_row = vec![times[k]; n];
        let v = model.drift_at(&x, &t_row)?;
        for i in 0..x.as_slice().len() {
            x.as_mut_slice()[i] += dt * v.as_slice()[i];
        }
        if !x.is_finite() {
            return Err(Error::Integration { step: k });
        }
        velocities.push(v);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        log_density: None,
        velocities: Some(velocities),
    })
}

/// Euler–Maruyama on the learned SDE. Needs `σ > 0` and a score network.
pub fn integrate_sde(
    model: &BridgeModel,
    x0: &Matrix,
    steps: usize,
    span: (f64, f64),
    composition: ScoreComposition,
    seed: u64,
) -> Result<Trajectory> {
    check_start(model, x0, steps)?;
    let sigma = model.sigma();
    if sigma <= 0.0 {
        return Err(Error::config("sigma", "SDE sampling needs sigma > 0"));
    }
    if model.score_net().is_none() {
        return Err(Error::config("score", "SDE sampling needs a score network"));
    }
    let times = uniform_grid(span, steps);
    let n = x0.rows();
    let d = model.dim();
    let score_weight = match composition {
        ScoreComposition::Scaled => 0.5 * sigma * sigma,
        ScoreComposition::RawSum => 1.0,
    };

    let mut particle_noise: Vec<_> = (0..n)
        .map(|p| rng::point_keyed(seed, &[p as f64]))
        .collect();

    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps);
    let mut x = x0.clone();
    states.push(x.clone());
    for k in 0..steps {
        let dt = times[k + 1] - times[k];
        let root_dt = dt.sqrt();
        let t_row = vec![times[k]; n];
        let v = model.drift_at(&x, &t_row)?;
        let s = model.score_at(&x, &t_row)?;
        for p in 0..n {
            for c in 0..d {
                let drift = v.get(p, c) + score_weight * s.get(p, c);
                let noise: f64 = StandardNormal.sample(&mut particle_noise[p]);
                let cur = x.get(p, c);
                x.set(p, c, cur + drift * dt + sigma * root_dt * noise);
            }
        }
        if !x.is_finite() {
            return Err(Error::Integration { step: k });
        }
        velocities.push(v);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        log_density: None,
        velocities: Some(velocities),
    })
}

/// Divergence `∇·v` at each row via `dim` forward-mode passes, one per
/// coordinate.
fn divergence(net: &Mlp, x: &Matrix, t_row: &[f64]) -> Result<Vec<f64>> {
    let n = x.rows();
    let d = x.cols();
    let mut div = vec![0.0; n];
    // tangent seeded on coordinate c: reuse the dual pass by augmenting the
    // input so the chosen coordinate plays the "time" role of the dual API.
    // Simpler: finite machinery is avoided by evaluating the Jacobian column
    // exactly with a dual pass per coordinate.
    for c in 0..d {
        let tangents = net.coordinate_derivative(x, t_row, c)?;
        for r in 0..n {
            div[r] += tangents.get(r, c);
        }
    }
    Ok(div)
}

/// Deterministic flow with log-density tracking:
/// `d(log p)/dt = −∇·v` along each path. Only defined for the `σ = 0` route.
pub fn track_log_density(
    model: &BridgeModel,
    x0: &Matrix,
    log_p0: &[f64],
    steps: usize,
    span: (f64, f64),
) -> Result<Trajectory> {
    check_start(model, x0, steps)?;
    if model.sigma() > 0.0 {
        return Err(Error::config(
            "sigma",
            "log-density tracking follows the deterministic flow; use sigma = 0",
        ));
    }
    let d = model.dim();
    if d > LOG_DENSITY_DIM_CAP {
        return Err(Error::config(
            "dim",
            format!(
                "divergence tracking needs {d} network passes per step (cap {LOG_DENSITY_DIM_CAP}); \
                 disable tracking for high-dimensional runs"
            ),
        ));
    }
    let n = x0.rows();
    if log_p0.len() != n {
        return Err(Error::dimension(format!(
            "{} initial log-densities for {n} particles",
            log_p0.len()
        )));
    }
    let times = uniform_grid(span, steps);
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps);
    let mut x = x0.clone();
    let mut logp = log_p0.to_vec();
    let mut trace: Vec<Vec<f64>> = (0..n).map(|p| vec![logp[p]]).collect();
    states.push(x.clone());
    for k in 0..steps {
        let dt = times[k + 1] - times[k];
        let t_row = vec![times[k]; n];
        let v = model.drift_at(&x, &t_row)?;
        let div = divergence(model.drift_net(), &x, &t_row)?;
        for p in 0..n {
            for c in 0..d {
                let cur = x.get(p, c);
                x.set(p, c, cur + dt * v.get(p, c));
            }
            logp[p] -= dt * div[p];
            trace[p].push(logp[p]);
        }
        if !x.is_finite() {
            return Err(Error::Integration { step: k });
        }
        velocities.push(v);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        log_density: Some(trace),
        velocities: Some(velocities),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Activation;

    /// A model whose drift net is hand-built; score absent.
    fn model_with_drift(drift: Mlp) -> BridgeModel {
        let dim = drift.output_dim();
        BridgeModel::from_parts(drift, None, 0.0, dim, vec![0.0, 1.0])
    }

    fn zero_drift_model(dim: usize) -> BridgeModel {
        model_with_drift(Mlp::zeroed(dim + 1, &[4], dim).unwrap())
    }

    /// drift v(x) = −x via a linear layer: w = −I on the x block.
    fn decay_model() -> BridgeModel {
        let mut net = Mlp::zeroed(2, &[], 1).unwrap();
        net.params_mut()[0] = -1.0;
        model_with_drift(net)
    }

    /// drift v(x) = c constant.
    fn constant_model(c: &[f64]) -> BridgeModel {
        let dim = c.len();
        let mut net = Mlp::zeroed(dim + 1, &[], dim).unwrap();
        let np = net.param_count();
        net.params_mut()[np - dim..].copy_from_slice(c);
        model_with_drift(net)
    }

    #[test]
    fn zero_drift_keeps_particles_fixed() {
        let model = zero_drift_model(2);
        let x0 = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let traj = integrate_ode(&model, &x0, 20, (0.0, 1.0)).unwrap();
        for state in &traj.states {
            assert_eq!(state.as_slice(), x0.as_slice());
        }
    }

    #[test]
    fn constant_drift_is_exact_under_euler() {
        let model = constant_model(&[0.5, -2.0]);
        let x0 = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let traj = integrate_ode(&model, &x0, 7, (0.0, 1.0)).unwrap();
        let end = traj.terminal();
        assert!((end.get(0, 0) - 1.5).abs() < 1e-12);
        assert!((end.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_decay_approaches_exponential() {
        let model = decay_model();
        let x0 = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let traj = integrate_ode(&model, &x0, 10_000, (0.0, 1.0)).unwrap();
        let expected = (-1.0_f64).exp();
        assert!(
            (traj.terminal().get(0, 0) - expected).abs() < 1e-3,
            "endpoint {} vs e^-1 {expected}",
            traj.terminal().get(0, 0)
        );
    }

    #[test]
    fn euler_is_first_order() {
        // halving Δt should roughly halve the endpoint error
        let model = decay_model();
        let x0 = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let reference = integrate_ode(&model, &x0, 100_000, (0.0, 1.0))
            .unwrap()
            .terminal()
            .get(0, 0);
        let coarse = integrate_ode(&model, &x0, 100, (0.0, 1.0))
            .unwrap()
            .terminal()
            .get(0, 0);
        let fine = integrate_ode(&model, &x0, 200, (0.0, 1.0))
            .unwrap()
            .terminal()
            .get(0, 0);
        let ratio = (coarse - reference).abs() / (fine - reference).abs();
        assert!(
            (1.7..=2.3).contains(&ratio),
            "error ratio {ratio} not first-order"
        );
    }

    #[test]
    fn sde_brownian_motion_variance() {
        // v ≡ 0, s ≡ 0, σ = 1: endpoint is a standard Brownian point
        let drift = Mlp::zeroed(2, &[4], 1).unwrap();
        let score = Mlp::zeroed(2, &[4], 1).unwrap();
        let model = BridgeModel::from_parts(drift, Some(score), 1.0, 1, vec![0.0, 1.0]);
        let n = 100_000;
        let x0 = Matrix::zeros(n, 1);
        let traj = integrate_sde(&model, &x0, 50, (0.0, 1.0), ScoreComposition::Scaled, 7).unwrap();
        let end = traj.terminal();
        let mean: f64 = end.as_slice().iter().sum::<f64>() / n as f64;
        let var: f64 =
            end.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - 1.0).abs() < 3.0 * se, "variance {var}");
    }

    #[test]
    fn sde_at_vanishing_sigma_matches_ode() {
        let mut drift = Mlp::zeroed(2, &[], 1).unwrap();
        drift.params_mut()[0] = -0.5;
        let score = Mlp::zeroed(2, &[4], 1).unwrap();
        let model =
            BridgeModel::from_parts(drift.clone(), Some(score), 1e-8, 1, vec![0.0, 1.0]);
        let ode_model = model_with_drift(drift);
        let x0 = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let sde = integrate_sde(&model, &x0, 200, (0.0, 1.0), ScoreComposition::Scaled, 3).unwrap();
        let ode = integrate_ode(&ode_model, &x0, 200, (0.0, 1.0)).unwrap();
        assert!((sde.terminal().get(0, 0) - ode.terminal().get(0, 0)).abs() < 1e-6);
    }

    #[test]
    fn sde_replays_under_seed() {
        let drift = Mlp::zeroed(3, &[4], 2).unwrap();
        let score = Mlp::zeroed(3, &[4], 2).unwrap();
        let model = BridgeModel::from_parts(drift, Some(score), 0.5, 2, vec![0.0, 1.0]);
        let x0 = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, -1.0]]).unwrap();
        let a = integrate_sde(&model, &x0, 30, (0.0, 1.0), ScoreComposition::Scaled, 42).unwrap();
        let b = integrate_sde(&model, &x0, 30, (0.0, 1.0), ScoreComposition::Scaled, 42).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            assert_eq!(sa.as_slice(), sb.as_slice());
        }
    }

    #[test]
    fn sde_requires_score_and_positive_sigma() {
        let model = zero_drift_model(1);
        let x0 = Matrix::zeros(1, 1);
        assert!(integrate_sde(&model, &x0, 5, (0.0, 1.0), ScoreComposition::Scaled, 0).is_err());
    }

    #[test]
    fn log_density_constant_under_zero_drift() {
        let model = zero_drift_model(2);
        let x0 = Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let traj = track_log_density(&model, &x0, &[-1.5], 10, (0.0, 1.0)).unwrap();
        let trace = traj.log_density.unwrap();
        assert!(trace[0].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn log_density_linear_field_divergence() {
        // v(x) = x in 2-D: ∇·v = 2, so log p decreases by 2·span
        let mut net = Mlp::zeroed(3, &[], 2).unwrap();
        net.params_mut()[0] = 1.0; // w00
        net.params_mut()[4] = 1.0; // w11
        let model = model_with_drift(net);
        let x0 = Matrix::from_rows(&[vec![0.3, -0.4]]).unwrap();
        let traj = track_log_density(&model, &x0, &[0.0], 100, (0.0, 1.0)).unwrap();
        let trace = traj.log_density.unwrap();
        let end = *trace[0].last().unwrap();
        assert!((end + 2.0).abs() < 1e-9, "log density end {end}");
    }

    #[test]
    fn divergence_matches_finite_differences_on_random_net() {
        let net = Mlp::new(3, &[10, 10], 2, Activation::Silu, 33).unwrap();
        let x = Matrix::from_rows(&[vec![0.4, -0.7], vec![1.2, 0.3]]).unwrap();
        let t = [0.25, 0.6];
        let div = divergence(&net, &x, &t).unwrap();
        let h = 1e-5;
        for r in 0..2 {
            let mut fd = 0.0;
            for c in 0..2 {
                let mut xp = x.clone();
                xp.set(r, c, x.get(r, c) + h);
                let mut xm = x.clone();
                xm.set(r, c, x.get(r, c) - h);
                let vp = net.forward(&xp, &t).unwrap();
                let vm = net.forward(&xm, &t).unwrap();
                fd += (vp.get(r, c) - vm.get(r, c)) / (2.0 * h);
            }
            let rel = (div[r] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "row {r}: ad {} fd {fd}", div[r]);
        }
    }

    #[test]
    fn csv_export_has_one_row_per_particle_step() {
        let model = zero_drift_model(2);
        let x0 = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let traj = integrate_ode(&model, &x0, 3, (0.0, 1.0)).unwrap();
        let csv = traj.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "particle,step,t,x1,x2");
        assert_eq!(lines.len(), 1 + 2 * 4);
    }

    #[test]
    fn csv_round_trips_states_and_times() {
        let model = constant_model(&[0.3, -0.7]);
        let x0 = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.0]]).unwrap();
        let traj = integrate_ode(&model, &x0, 5, (0.25, 1.5)).unwrap();
        let parsed = parse_trajectory_csv(&traj.to_csv()).unwrap();
        assert_eq!(parsed.times, traj.times);
        for (a, b) in parsed.states.iter().zip(&traj.states) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
    }
}
