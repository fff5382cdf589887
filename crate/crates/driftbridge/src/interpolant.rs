//! Neural path interpolants and their training loop (stage one).
//!
//! The interpolant between a pair of endpoints is the endpoint-pinned curve
//!
//! ```text
//! μ_t = t·x1 + (1−t)·x0 + t(1−t)·φ(x0, x1, t̂)
//! ```
//!
//! with `t ∈ [0,1]` local to a marginal segment and `t̂` the global time fed to
//! the network. The `t(1−t)` factor pins `μ_0 = x0` and `μ_1 = x1` for *any*
//! parameters, so training only shapes the interior of the path. Stage one
//! fits `φ` by regressing the path velocity onto a reference drift:
//!
//! ```text
//! L(η) = E ‖ dμ/dt̂ − f(μ_t) ‖²,   (x0, x1, t) ~ ρ0 ⊗ ρ1 ⊗ U(0,1)
//! ```
//!
//! sampling endpoints independently — couplings only enter in stage two. The
//! velocity is taken with respect to global time, so on a segment of width `Δ`
//!
//! ```text
//! dμ/dt̂ = (x1 − x0)/Δ + (1−2t)/Δ·φ + t(1−t)·∂φ/∂t̂ ,
//! ```
//!
//! which reduces to the familiar unit-interval expression when `Δ = 1`. The
//! `∂φ/∂t̂` term is computed by forward-mode propagation, and its parameter
//! gradient flows through the reverse-over-forward pass in
//! [`numkit`](crate::numkit).

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fields::ReferenceField;
use crate::numkit::{
    load_checkpoint, save_checkpoint, Activation, AdamState, Matrix, Mlp, MlpGradients,
};
use crate::rng;

/// Endpoint-pinned neural path over an ordered list of marginal times.
#[derive(Debug, Clone)]
pub struct PathInterpolant {
    phi: Mlp,
    dim: usize,
    marginal_times: Vec<f64>,
}

impl PathInterpolant {
    pub fn new(phi: Mlp, dim: usize, marginal_times: Vec<f64>) -> Result<Self> {
        if phi.input_dim() != 2 * dim + 1 {
            return Err(Error::dimension(format!(
                "phi expects {} inputs; need 2·{dim} + 1 for (x0, x1, t)",
                phi.input_dim()
            )));
        }
        if phi.output_dim() != dim {
            return Err(Error::dimension(format!(
                "phi produces {} outputs; need {dim}",
                phi.output_dim()
            )));
        }
        if marginal_times.len() < 2 {
            return Err(Error::config("marginal_times", "need at least two marginals"));
        }
        if marginal_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                "marginal_times",
                "times must be strictly increasing",
            ));
        }
        Ok(PathInterpolant {
            phi,
            dim,
            marginal_times,
        })
    }

    /// Fresh interpolant with seeded weights.
    pub fn seeded(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
        marginal_times: Vec<f64>,
    ) -> Result<Self> {
        let phi = Mlp::new(2 * dim + 1, hidden, dim, activation, seed)?;
        PathInterpolant::new(phi, dim, marginal_times)
    }

    /// Interpolant with `φ ≡ 0`: straight lines. This is the degenerate
    /// configuration used by the zero-drift baselines.
    pub fn straight(dim: usize, hidden: &[usize], marginal_times: Vec<f64>) -> Result<Self> {
        let phi = Mlp::zeroed(2 * dim + 1, hidden, dim)?;
        PathInterpolant::new(phi, dim, marginal_times)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn phi(&self) -> &Mlp {
        &self.phi
    }

    pub fn phi_mut(&mut self) -> &mut Mlp {
        &mut self.phi
    }

    pub fn marginal_times(&self) -> &[f64] {
        &self.marginal_times
    }

    /// Number of segments between consecutive marginals.
    pub fn segments(&self) -> usize {
        self.marginal_times.len() - 1
    }

    /// Global time `t̂ = tᵢ + t_local·(tᵢ₊₁ − tᵢ)`.
    pub fn global_time(&self, segment: usize, t_local: f64) -> Result<f64> {
        if segment >= self.segments() {
            return Err(Error::config(
                "segment",
                format!("index {segment} out of {} segments", self.segments()),
            ));
        }
        check_unit_time(t_local)?;
        let lo = self.marginal_times[segment];
        let hi = self.marginal_times[segment + 1];
        Ok(lo + t_local * (hi - lo))
    }

    pub fn segment_width(&self, segment: usize) -> f64 {
        self.marginal_times[segment + 1] - self.marginal_times[segment]
    }

    /// `μ_t` for one pair on segment 0; see [`mu_batch`](Self::mu_batch).
    pub fn mu(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
        let m = self.mu_batch(0, &Matrix::row_vector(x0), &Matrix::row_vector(x1), &[t])?;
        Ok(m.row(0).to_vec())
    }

    /// `dμ/dt̂` for one pair on segment 0.
    pub fn mu_dot(&self, x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
        let (_, d) =
            self.mu_and_dot_batch(0, &Matrix::row_vector(x0), &Matrix::row_vector(x1), &[t])?;
        Ok(d.row(0).to_vec())
    }

    fn check_pair_batch(&self, segment: usize, x0: &Matrix, x1: &Matrix, t: &[f64]) -> Result<()> {
        if segment >= self.segments() {
            return Err(Error::config(
                "segment",
                format!("index {segment} out of {} segments", self.segments()),
            ));
        }
        if x0.cols() != self.dim || x1.cols() != self.dim {
            return Err(Error::dimension(format!(
                "endpoint batches have {} / {} columns; interpolant dim is {}",
                x0.cols(),
                x1.cols(),
                self.dim
            )));
        }
        if x0.rows() != x1.rows() || t.len() != x0.rows() {
            return Err(Error::dimension(format!(
                "batch sizes disagree: {} x0 rows, {} x1 rows, {} times",
                x0.rows(),
                x1.rows(),
                t.len()
            )));
        }
        for &ti in t {
            check_unit_time(ti)?;
        }
        Ok(())
    }

    /// Stack `[x0 | x1]` with the global time per row — the φ input layout.
    fn phi_inputs(
        &self,
        segment: usize,
        x0: &Matrix,
        x1: &Matrix,
        t: &[f64],
    ) -> (Matrix, Vec<f64>) {
        let n = x0.rows();
        let mut z = Matrix::zeros(n, 2 * self.dim);
        for r in 0..n {
            z.row_mut(r)[..self.dim].copy_from_slice(x0.row(r));
            z.row_mut(r)[self.dim..].copy_from_slice(x1.row(r));
        }
        let lo = self.marginal_times[segment];
        let width = self.segment_width(segment);
        let t_hat: Vec<f64> = t.iter().map(|&ti| lo + ti * width).collect();
        (z, t_hat)
    }

    /// Batched interpolant positions on a segment.
    pub fn mu_batch(&self, segment: usize, x0: &Matrix, x1: &Matrix, t: &[f64]) -> Result<Matrix> {
        self.check_pair_batch(segment, x0, x1, t)?;
        let (z, t_hat) = self.phi_inputs(segment, x0, x1, t);
        let phi = self.phi.forward(&z, &t_hat)?;
        let mut mu = Matrix::zeros(x0.rows(), self.dim);
        for r in 0..x0.rows() {
            let ti = t[r];
            let pin = ti * (1.0 - ti);
            let (a, b, p) = (x0.row(r), x1.row(r), phi.row(r));
            let m = mu.row_mut(r);
            for c in 0..self.dim {
                m[c] = ti * b[c] + (1.0 - ti) * a[c] + pin * p[c];
            }
        }
        Ok(mu)
    }

    /// Batched `(μ, dμ/dt̂)` on a segment.
    pub fn mu_and_dot_batch(
        &self,
        segment: usize,
        x0: &Matrix,
        x1: &Matrix,
        t: &[f64],
    ) -> Result<(Matrix, Matrix)> {
        self.check_pair_batch(segment, x0, x1, t)?;
        let width = self.segment_width(segment);
        let (z, t_hat) = self.phi_inputs(segment, x0, x1, t);
        let (phi_v, phi_d) = self.phi.forward_dual(&z, &t_hat, 1.0)?;
        Ok(self.assemble_mu_dot(x0, x1, t, width, &phi_v, &phi_d))
    }

    fn assemble_mu_dot(
        &self,
        x0: &Matrix,
        x1: &Matrix,
        t: &[f64],
        width: f64,
        phi_v: &Matrix,
        phi_d: &Matrix,
    ) -> (Matrix, Matrix) {
        let n = x0.rows();
        let mut mu = Matrix::zeros(n, self.dim);
        let mut dot = Matrix::zeros(n, self.dim);
        for r in 0..n {
            let ti = t[r];
            let pin = ti * (1.0 - ti);
            let ramp = 1.0 - 2.0 * ti;
            let (a, b) = (x0.row(r), x1.row(r));
            let (pv, pd) = (phi_v.row(r), phi_d.row(r));
            for c in 0..self.dim {
                mu.row_mut(r)[c] = ti * b[c] + (1.0 - ti) * a[c] + pin * pv[c];
                dot.row_mut(r)[c] = (b[c] - a[c] + ramp * pv[c]) / width + pin * pd[c];
            }
        }
        (mu, dot)
    }

    /// Loss and parameter gradient of the stage-one objective on a batch.
    ///
    /// The loss is the batch mean of `‖dμ/dt̂ − f(μ_t)‖²`. For analytically
    /// differentiable fields the gradient flows through `f(μ)`; data-driven
    /// kernels are treated as constants within the step.
    pub fn loss_and_grad(
        &self,
        segment: usize,
        x0: &Matrix,
        x1: &Matrix,
        t: &[f64],
        field: &ReferenceField,
        grads: &mut MlpGradients,
    ) -> Result<f64> {
        self.check_pair_batch(segment, x0, x1, t)?;
        if field.dim() != self.dim {
            return Err(Error::dimension(format!(
                "field over R^{} paired with interpolant over R^{}",
                field.dim(),
                self.dim
            )));
        }
        let n = x0.rows();
        let width = self.segment_width(segment);
        let (z, t_hat) = self.phi_inputs(segment, x0, x1, t);
        let (phi_v, phi_d, trace) = self.phi.forward_dual_recorded(&z, &t_hat, 1.0)?;
        let (mu, dot) = self.assemble_mu_dot(x0, x1, t, width, &phi_v, &phi_d);

        let f_vals = field.eval_batch(&mu, &t_hat)?;
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        let mut adj_v = Matrix::zeros(n, self.dim);
        let mut adj_d = Matrix::zeros(n, self.dim);
        for r in 0..n {
            let ti = t[r];
            let pin = ti * (1.0 - ti);
            let ramp = (1.0 - 2.0 * ti) / width;
            let residual: Vec<f64> = (0..self.dim)
                .map(|c| dot.get(r, c) - f_vals.get(r, c))
                .collect();
            let sq: f64 = residual.iter().map(|v| v * v).sum();
            if !sq.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite interpolant residual in batch row {r}"
                )));
            }
            loss += sq * inv_n;

            // dL/dφv = 2/n · [ (1−2t)/Δ · r − t(1−t) · Jᵀ r ]
            // dL/dφd = 2/n · t(1−t) · r
            let jt_r = field.jacobian_t_vec(mu.row(r), t_hat[r], &residual);
            for c in 0..self.dim {
                let mut gv = ramp * residual[c];
                if let Some(jr) = &jt_r {
                    gv -= pin * jr[c];
                }
                adj_v.set(r, c, 2.0 * inv_n * gv);
                adj_d.set(r, c, 2.0 * inv_n * pin * residual[c]);
            }
        }
        self.phi.backward_dual(&trace, &adj_v, &adj_d, grads);
        Ok(loss)
    }

    /// Loss only, no gradient. Convenience for monitoring and tests.
    pub fn loss(
        &self,
        segment: usize,
        x0: &Matrix,
        x1: &Matrix,
        t: &[f64],
        field: &ReferenceField,
    ) -> Result<f64> {
        let (mu, dot) = self.mu_and_dot_batch(segment, x0, x1, t)?;
        let lo = self.marginal_times[segment];
        let width = self.segment_width(segment);
        let t_hat: Vec<f64> = t.iter().map(|&ti| lo + ti * width).collect();
        let f_vals = field.eval_batch(&mu, &t_hat)?;
        let n = x0.rows();
        let mut loss = 0.0;
        for r in 0..n {
            for c in 0..self.dim {
                let rv = dot.get(r, c) - f_vals.get(r, c);
                loss += rv * rv;
            }
        }
        Ok(loss / n as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.phi, path)?;
        let meta = serde_json::json!({
            "dim": self.dim,
            "marginal_times": self.marginal_times,
        });
        std::fs::write(meta_path(path), meta.to_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let phi = load_checkpoint(path)?;
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let dim = meta["dim"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing dim".into()))? as usize;
        let times: Vec<f64> = meta["marginal_times"]
            .as_array()
            .ok_or_else(|| Error::Checkpoint("missing marginal_times".into()))?
            .iter()
            .filter_map(|v| v.as_f64())
            .collect();
        PathInterpolant::new(phi, dim, times)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    std::path::PathBuf::from(p)
}

fn check_unit_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config("t", format!("local time {t} outside [0, 1]")));
    }
    Ok(())
}

/// Stage-one training configuration.
#[derive(Debug, Clone)]
pub struct InterpolantTrainConfig {
    /// Optimizer steps; each step draws one fresh minibatch.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for InterpolantTrainConfig {
    fn default() -> Self {
        InterpolantTrainConfig {
            steps: 500,
            batch_size: 64,
            lr: 1e-4,
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            seed: 0,
        }
    }
}

/// Train a path interpolant against a reference field.
///
/// `marginals` are `(time, positions)` snapshots in increasing time order. Each
/// step draws a segment uniformly, endpoints independently from the adjacent
/// marginals, and `t ~ U(0,1)`; the Adam update follows. Returns the trained
/// interpolant and the per-step loss curve.
pub fn train_interpolant(
    config: &InterpolantTrainConfig,
    marginals: &[(f64, &Matrix)],
    field: &ReferenceField,
) -> Result<(PathInterpolant, Vec<(usize, f64)>)> {
    if marginals.len() < 2 {
        return Err(Error::config("marginals", "need at least two snapshots"));
    }
    let dim = marginals[0].1.cols();
    let times: Vec<f64> = marginals.iter().map(|(t, _)| *t).collect();
    let mut interp = PathInterpolant::seeded(
        dim,
        &config.hidden,
        config.activation,
        rng::derive_seed(config.seed, "interp/init"),
        times,
    )?;

    let mut sampler = rng::stream(config.seed, "interp/sample");
    let mut adam = AdamState::for_net(interp.phi(), config.lr);
    let mut grads = MlpGradients::zeros_like(interp.phi());
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let seg = if interp.segments() == 1 {
            0
        } else {
            sampler.random_range(0..interp.segments())
        };
        let (src, dst) = (marginals[seg].1, marginals[seg + 1].1);
        let idx0: Vec<usize> = (0..config.batch_size)
            .map(|_| sampler.random_range(0..src.rows()))
            .collect();
        let idx1: Vec<usize> = (0..config.batch_size)
            .map(|_| sampler.random_range(0..dst.rows()))
            .collect();
        let x0 = src.select_rows(&idx0);
        let x1 = dst.select_rows(&idx1);
        let t: Vec<f64> = (0..config.batch_size)
            .map(|_| sampler.random_range(0.0..1.0))
            .collect();

        grads.zero();
        let loss = interp.loss_and_grad(seg, &x0, &x1, &t, field, &mut grads)?;
        adam.step(interp.phi_mut(), &grads)?;
        curve.push((step, loss));
    }
    Ok((interp, curve))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_times() -> Vec<f64> {
        vec![0.0, 1.0]
    }

    #[test]
    fn straight_interpolant_is_a_line() {
        let interp = PathInterpolant::straight(2, &[8], toy_times()).unwrap();
        let mu = interp.mu(&[0.0, 0.0], &[2.0, 0.0], 0.25).unwrap();
        assert_eq!(mu, vec![0.5, 0.0]);
    }

    #[test]
    fn endpoints_are_pinned_exactly() {
        let interp =
            PathInterpolant::seeded(3, &[16, 16], Activation::Silu, 5, toy_times()).unwrap();
        let x0 = [0.3, -1.2, 0.7];
        let x1 = [-0.5, 2.2, 1.9];
        let m0 = interp.mu(&x0, &x1, 0.0).unwrap();
        let m1 = interp.mu(&x0, &x1, 1.0).unwrap();
        for c in 0..3 {
            assert_eq!(m0[c], x0[c]);
            assert_eq!(m1[c], x1[c]);
        }
    }

    #[test]
    fn constant_phi_algebra() {
        // with φ ≡ c: μ(0.5) = midpoint + 0.25 c, μ̇(0.5) = x1 − x0
        let mut interp = PathInterpolant::straight(1, &[], toy_times()).unwrap();
        // linear layer mapping all inputs to 0, bias c
        let c = 0.8;
        let np = interp.phi().param_count();
        interp.phi_mut().params_mut()[np - 1] = c;
        let mu = interp.mu(&[0.0], &[1.0], 0.5).unwrap();
        assert!((mu[0] - (0.5 + 0.25 * c)).abs() < 1e-15);
        let dot = interp.mu_dot(&[0.0], &[1.0], 0.5).unwrap();
        assert!((dot[0] - 1.0).abs() < 1e-15);
        // at t = 0.25: μ̇ = x1 − x0 + (1 − 2t)·c
        let dot = interp.mu_dot(&[0.0], &[1.0], 0.25).unwrap();
        assert!((dot[0] - (1.0 + 0.5 * c)).abs() < 1e-15);
    }

    #[test]
    fn zero_phi_velocity_is_displacement() {
        let interp = PathInterpolant::straight(2, &[4], toy_times()).unwrap();
        for t in [0.0, 0.3, 0.77, 1.0] {
            let dot = interp.mu_dot(&[1.0, 2.0], &[4.0, -2.0], t).unwrap();
            assert_eq!(dot, vec![3.0, -4.0]);
        }
    }

    #[test]
    fn mu_dot_matches_finite_differences() {
        let interp =
            PathInterpolant::seeded(2, &[12, 12], Activation::Silu, 11, toy_times()).unwrap();
        let x0 = [0.4, -0.6];
        let x1 = [-1.1, 0.9];
        let h = 1e-4;
        for t in [0.2, 0.5, 0.83] {
            let dot = interp.mu_dot(&x0, &x1, t).unwrap();
            let mp = interp.mu(&x0, &x1, t + h).unwrap();
            let mm = interp.mu(&x0, &x1, t - h).unwrap();
            for c in 0..2 {
                let fd = (mp[c] - mm[c]) / (2.0 * h);
                let rel = (dot[c] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "t={t} c={c}: ad {} fd {fd}", dot[c]);
            }
        }
    }

    #[test]
    fn t_outside_unit_interval_is_rejected() {
        let interp = PathInterpolant::straight(1, &[], toy_times()).unwrap();
        assert!(interp.mu(&[0.0], &[1.0], -0.1).is_err());
        assert!(interp.mu(&[0.0], &[1.0], 1.1).is_err());
    }

    #[test]
    fn global_time_interpolates_marginal_times() {
        let interp = PathInterpolant::straight(1, &[], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(interp.global_time(1, 0.5).unwrap(), 1.5);
        assert_eq!(interp.global_time(2, 0.0).unwrap(), 2.0);
        assert_eq!(interp.global_time(2, 1.0).unwrap(), 3.0);
        assert!(interp.global_time(3, 0.5).is_err());
    }

    #[test]
    fn global_time_scales_nonunit_segments() {
        let interp = PathInterpolant::straight(1, &[], vec![0.0, 0.5, 2.0]).unwrap();
        assert_eq!(interp.global_time(0, 0.5).unwrap(), 0.25);
        assert_eq!(interp.global_time(1, 0.5).unwrap(), 1.25);
    }

    #[test]
    fn segments_agree_at_shared_marginals() {
        let interp =
            PathInterpolant::seeded(2, &[8], Activation::Silu, 3, vec![0.0, 1.0, 2.0]).unwrap();
        let a = [0.1, 0.2];
        let b = [0.9, -0.3];
        let c = [1.5, 0.5];
        let end_seg0 = interp
            .mu_batch(0, &Matrix::row_vector(&a), &Matrix::row_vector(&b), &[1.0])
            .unwrap();
        let start_seg1 = interp
            .mu_batch(1, &Matrix::row_vector(&b), &Matrix::row_vector(&c), &[0.0])
            .unwrap();
        assert_eq!(end_seg0.row(0), start_seg1.row(0));
        assert_eq!(end_seg0.row(0), &b);
    }

    #[test]
    fn matched_pairs_under_zero_field_have_zero_loss_at_zero_phi() {
        let interp = PathInterpolant::straight(2, &[4], toy_times()).unwrap();
        let field = ReferenceField::Zero { dim: 2 };
        // x0 = x1 ⇒ μ̇ ≡ 0 with φ ≡ 0, matching f ≡ 0
        let x = Matrix::from_rows(&[vec![0.3, 0.4], vec![-1.0, 0.2]]).unwrap();
        let loss = interp.loss(0, &x, &x, &[0.3, 0.8], &field).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_matches_hand_computation() {
        // single pair, fixed t grid, zero φ, zero field:
        // residual = x1 − x0, loss = ‖x1 − x0‖²
        let interp = PathInterpolant::straight(2, &[4], toy_times()).unwrap();
        let field = ReferenceField::Zero { dim: 2 };
        let x0 = Matrix::row_vector(&[0.0, 0.0]);
        let x1 = Matrix::row_vector(&[2.0, 0.0]);
        for t in [0.1, 0.5, 0.9] {
            let loss = interp.loss(0, &x0, &x1, &[t], &field).unwrap();
            assert!((loss - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences_analytic_field() {
        // rotational field exercises the Jacobian path through f(μ)
        let mut interp =
            PathInterpolant::seeded(2, &[6, 6], Activation::Silu, 21, toy_times()).unwrap();
        let field = ReferenceField::Rotational2D { omega: 1.3 };
        let x0 = Matrix::from_rows(&[vec![0.5, 0.1], vec![-0.4, 0.8]]).unwrap();
        let x1 = Matrix::from_rows(&[vec![-0.2, 0.9], vec![0.3, -0.5]]).unwrap();
        let t = [0.35, 0.7];

        let mut grads = MlpGradients::zeros_like(interp.phi());
        interp
            .loss_and_grad(0, &x0, &x1, &t, &field, &mut grads)
            .unwrap();

        let h = 1e-4;
        for idx in (0..interp.phi().param_count()).step_by(9) {
            let orig = interp.phi().params()[idx];
            interp.phi_mut().params_mut()[idx] = orig + h;
            let lp = interp.loss(0, &x0, &x1, &t, &field).unwrap();
            interp.phi_mut().params_mut()[idx] = orig - h;
            let lm = interp.loss(0, &x0, &x1, &t, &field).unwrap();
            interp.phi_mut().params_mut()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let ad = grads.as_slice()[idx];
            let rel = (ad - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-4, "param {idx}: ad {ad} fd {fd}");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = InterpolantTrainConfig {
            steps: 5,
            batch_size: 8,
            lr: 1e-3,
            hidden: vec![8],
            activation: Activation::Silu,
            seed: 13,
        };
        let field = ReferenceField::Zero { dim: 2 };
        let src = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let dst = Matrix::from_rows(&[vec![0.5, 0.5], vec![1.5, 0.0], vec![0.0, 2.0]]).unwrap();
        let marginals = [(0.0, &src), (1.0, &dst)];
        let (a, curve_a) = train_interpolant(&cfg, &marginals, &field).unwrap();
        let (b, curve_b) = train_interpolant(&cfg, &marginals, &field).unwrap();
        assert_eq!(a.phi().params(), b.phi().params());
        assert_eq!(curve_a, curve_b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let interp =
            PathInterpolant::seeded(2, &[8], Activation::Tanh, 77, vec![0.0, 0.5, 1.0]).unwrap();
        let dir = std::env::temp_dir().join("driftbridge-interp-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("phi.json");
        interp.save(&path).unwrap();
        let restored = PathInterpolant::load(&path).unwrap();
        assert_eq!(interp.phi().params(), restored.phi().params());
        assert_eq!(interp.marginal_times(), restored.marginal_times());
    }
}
