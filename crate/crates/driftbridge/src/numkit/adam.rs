//! Adaptive-moment optimizer with bias correction.

use crate::error::{Error, Result};

use super::mlp::{Mlp, MlpGradients};

/// Adam state over a flat parameter vector.
///
/// Defaults are the customary `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8` with
/// learning rate `1e-4`.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn for_net(net: &Mlp, lr: f64) -> Self {
        AdamState::new(net.param_count(), lr)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over a raw parameter slice. `name_of` labels a parameter
    /// index in the error raised for non-finite gradients.
    pub fn step_slice(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        name_of: impl Fn(usize) -> String,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dimension(format!(
                "adam state sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter {}",
                name_of(bad)
            )));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One update on a network from its gradient buffer. Non-finite gradients
    /// are reported with the structured parameter name (`layerN.weight[k]`).
    pub fn step(&mut self, net: &mut Mlp, grads: &MlpGradients) -> Result<()> {
        if let Some(bad) = grads.as_slice().iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient for parameter {}",
                net.param_name(bad)
            )));
        }
        self.step_slice(net.params_mut(), grads.as_slice(), |idx| {
            format!("param[{idx}]")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut st = AdamState::new(3, 1e-2);
        let mut p = [1.0, -2.0, 0.5];
        st.step_slice(&mut p, &[0.0; 3], |i| i.to_string()).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_is_signed_lr_to_first_order() {
        // after bias correction: Δ = -lr · g / (|g| + ε)
        let mut st = AdamState::new(2, 1e-3);
        let mut p = [0.0, 0.0];
        let g = [0.5, -2.0];
        st.step_slice(&mut p, &g, |i| i.to_string()).unwrap();
        for i in 0..2 {
            let expected = -st.lr * g[i] / (g[i].abs() + st.eps);
            assert!((p[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut st = AdamState::new(2, 1e-3);
        let mut p = [0.0, 0.0];
        let err = st
            .step_slice(&mut p, &[0.0, f64::NAN], |i| format!("theta[{i}]"))
            .unwrap_err();
        assert!(err.to_string().contains("theta[1]"));
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // minimize 0.5‖p - c‖²; 200 steps must cut the loss by ≥ 100×
        let c = [3.0, -1.0, 0.5, 2.0];
        let mut p = [0.0; 4];
        let loss =
            |p: &[f64]| -> f64 { p.iter().zip(&c).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum() };
        let initial = loss(&p);
        let mut st = AdamState::new(4, 0.1);
        for _ in 0..200 {
            let g: Vec<f64> = p.iter().zip(&c).map(|(a, b)| a - b).collect();
            st.step_slice(&mut p, &g, |i| i.to_string()).unwrap();
        }
        assert!(loss(&p) < initial / 100.0, "final {}", loss(&p));
    }
}
