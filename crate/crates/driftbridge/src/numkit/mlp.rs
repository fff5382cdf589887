//! Small dense multilayer perceptrons over `(x, t)` inputs.
//!
//! Time enters as one extra input coordinate appended after `x`, so a network
//! advertising `input_dim = d + 1` is evaluated as `net([x, t])`. Hidden
//! layers share one smooth activation; the output layer is linear.
//!
//! Three evaluation modes:
//!
//! - [`Mlp::forward`] — plain batched evaluation;
//! - [`Mlp::forward_dual`] — forward-mode propagation of a tangent seeded on
//!   the time coordinate, returning `(value, ∂value/∂t)`;
//! - recorded variants ([`Trace`], [`DualTrace`]) that keep the per-layer
//!   intermediates needed by the reverse passes. [`Mlp::backward_dual`] is a
//!   reverse-over-forward sweep: it differentiates losses that mention both
//!   the network output and its time derivative, which is exactly the shape
//!   of the path-interpolant objective.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::activation::Activation;
use super::matrix::Matrix;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_off: usize,
    b_off: usize,
    in_dim: usize,
    out_dim: usize,
}

/// A feed-forward network with flat parameter storage.
#[derive(Debug, Clone)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    layers: Vec<LayerSpec>,
    seed: u64,
}

/// Recorded intermediates of one plain forward pass.
pub struct Trace {
    /// Input including the appended time column, `n × d_in`.
    input: Matrix,
    /// Pre-activations per layer.
    pre: Vec<Matrix>,
    /// Post-activation outputs per hidden layer (layer inputs for l ≥ 1).
    act: Vec<Matrix>,
}

/// Recorded intermediates of one dual (value + time-tangent) forward pass.
pub struct DualTrace {
    input_v: Matrix,
    input_d: Matrix,
    pre_v: Vec<Matrix>,
    pre_d: Vec<Matrix>,
    act_v: Vec<Matrix>,
    act_d: Vec<Matrix>,
}

/// Parameter gradients, laid out exactly like [`Mlp`] parameters.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    data: Vec<f64>,
}

impl MlpGradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGradients {
            data: vec![0.0; net.params.len()],
        }
    }

    pub fn zero(&mut self) {
        self.data.fill(0.0);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            *g *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

fn layout(dims: &[usize]) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(dims.len() - 1);
    let mut off = 0;
    for w in dims.windows(2) {
        let (in_dim, out_dim) = (w[0], w[1]);
        layers.push(LayerSpec {
            w_off: off,
            b_off: off + in_dim * out_dim,
            in_dim,
            out_dim,
        });
        off += in_dim * out_dim + out_dim;
    }
    layers
}

impl Mlp {
    /// Build a network `input_dim -> hidden... -> output_dim` with
    /// Xavier-uniform weights drawn from a seeded stream and zero biases.
    ///
    /// `input_dim` counts the time slot: a field over `R^d` uses
    /// `input_dim = d + 1`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::config("widths", "layer widths must be positive"));
        }
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden);
        dims.push(output_dim);

        let layers = layout(&dims);
        let n_params = layers
            .last()
            .map_or(0, |l| l.b_off + l.out_dim);
        let mut params = vec![0.0; n_params];

        let mut rng = ChaCha8Rng::seed_from_u64(rng::derive_seed(seed, "mlp-init"));
        for l in &layers {
            let a = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            for w in &mut params[l.w_off..l.w_off + l.in_dim * l.out_dim] {
                *w = rng.random_range(-a..a);
            }
            // biases stay zero
        }

        Ok(Mlp {
            dims,
            activation,
            params,
            layers,
            seed,
        })
    }

    /// All-zero parameters; `net(x, t) ≡ 0`. Used to pin `φ ≡ 0`.
    pub fn zeroed(input_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self> {
        let mut net = Mlp::new(input_dim, hidden, output_dim, Activation::Silu, 0)?;
        net.params.fill(0.0);
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::dimension(format!(
                "parameter vector length {} != {}",
                p.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Human-readable name of the parameter at a flat index, e.g.
    /// `layer1.weight[12]`. Used by optimizer diagnostics.
    pub fn param_name(&self, idx: usize) -> String {
        for (l, spec) in self.layers.iter().enumerate() {
            if idx < spec.b_off {
                if idx >= spec.w_off {
                    return format!("layer{l}.weight[{}]", idx - spec.w_off);
                }
            } else if idx < spec.b_off + spec.out_dim {
                return format!("layer{l}.bias[{}]", idx - spec.b_off);
            }
        }
        format!("param[{idx}]")
    }

    fn weight_row(&self, l: &LayerSpec, o: usize) -> &[f64] {
        let start = l.w_off + o * l.in_dim;
        &self.params[start..start + l.in_dim]
    }

    fn bias(&self, l: &LayerSpec) -> &[f64] {
        &self.params[l.b_off..l.b_off + l.out_dim]
    }

    fn check_shapes(&self, x: &Matrix, t: &[f64]) -> Result<()> {
        if x.cols() + 1 != self.input_dim() {
            return Err(Error::dimension(format!(
                "input has {} columns; network expects {} plus the time slot",
                x.cols(),
                self.input_dim() - 1
            )));
        }
        if t.len() != x.rows() {
            return Err(Error::dimension(format!(
                "{} time values for {} rows",
                t.len(),
                x.rows()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::dimension("non-finite time input"));
        }
        Ok(())
    }

    fn with_time(&self, x: &Matrix, t: &[f64]) -> Matrix {
        let n = x.rows();
        let d_in = self.input_dim();
        let mut input = Matrix::zeros(n, d_in);
        for r in 0..n {
            let row = input.row_mut(r);
            row[..d_in - 1].copy_from_slice(x.row(r));
            row[d_in - 1] = t[r];
        }
        input
    }

    fn affine(&self, l: &LayerSpec, input: &Matrix) -> Matrix {
        let n = input.rows();
        let mut pre = Matrix::zeros(n, l.out_dim);
        for r in 0..n {
            let u = input.row(r);
            let out = pre.row_mut(r);
            for o in 0..l.out_dim {
                let w = self.weight_row(l, o);
                let mut acc = self.bias(l)[o];
                for k in 0..l.in_dim {
                    acc += w[k] * u[k];
                }
                out[o] = acc;
            }
        }
        pre
    }

    /// Like [`affine`](Self::affine) without the bias — tangents are linear.
    fn affine_nobias(&self, l: &LayerSpec, input: &Matrix) -> Matrix {
        let n = input.rows();
        let mut pre = Matrix::zeros(n, l.out_dim);
        for r in 0..n {
            let u = input.row(r);
            let out = pre.row_mut(r);
            for o in 0..l.out_dim {
                let w = self.weight_row(l, o);
                let mut acc = 0.0;
                for k in 0..l.in_dim {
                    acc += w[k] * u[k];
                }
                out[o] = acc;
            }
        }
        pre
    }

    /// Batched evaluation: `net([x_r, t_r])` per row.
    pub fn forward(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
        self.check_shapes(x, t)?;
        let mut cur = self.with_time(x, t);
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let mut pre = self.affine(l, &cur);
            if li < last {
                for v in pre.as_mut_slice() {
                    *v = self.activation.f(*v);
                }
            }
            cur = pre;
        }
        Ok(cur)
    }

    /// Forward pass that records intermediates for [`Mlp::backward`].
    pub fn forward_recorded(&self, x: &Matrix, t: &[f64]) -> Result<(Matrix, Trace)> {
        self.check_shapes(x, t)?;
        let input = self.with_time(x, t);
        let last = self.layers.len() - 1;
        let mut pre_all = Vec::with_capacity(self.layers.len());
        let mut act_all = Vec::with_capacity(last);
        let mut cur = input.clone();
        for (li, l) in self.layers.iter().enumerate() {
            let pre = self.affine(l, &cur);
            pre_all.push(pre.clone());
            if li < last {
                let mut act = pre;
                for v in act.as_mut_slice() {
                    *v = self.activation.f(*v);
                }
                act_all.push(act.clone());
                cur = act;
            } else {
                cur = pre;
            }
        }
        Ok((
            cur,
            Trace {
                input,
                pre: pre_all,
                act: act_all,
            },
        ))
    }

    /// Reverse pass: accumulate `∂L/∂params` into `grads` given the adjoint
    /// `∂L/∂output` of the recorded forward pass.
    pub fn backward(&self, trace: &Trace, out_adjoint: &Matrix, grads: &mut MlpGradients) {
        let last = self.layers.len() - 1;
        let mut adj = out_adjoint.clone();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            // adjoint of the pre-activation
            let mut padj = adj;
            if li < last {
                let pre = &trace.pre[li];
                for (p, &z) in padj.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *p *= self.activation.df(z);
                }
            }
            let input = if li == 0 {
                &trace.input
            } else {
                &trace.act[li - 1]
            };
            self.accumulate_affine_grads(l, input, &padj, grads);
            if li > 0 {
                adj = self.input_adjoint(l, &padj);
            } else {
                adj = padj; // consumed; loop ends
            }
        }
    }

    fn accumulate_affine_grads(
        &self,
        l: &LayerSpec,
        input: &Matrix,
        padj: &Matrix,
        grads: &mut MlpGradients,
    ) {
        let n = input.rows();
        for r in 0..n {
            let u = input.row(r);
            let p = padj.row(r);
            for o in 0..l.out_dim {
                let po = p[o];
                if po == 0.0 {
                    continue;
                }
                let w_start = l.w_off + o * l.in_dim;
                let gw = &mut grads.data[w_start..w_start + l.in_dim];
                for k in 0..l.in_dim {
                    gw[k] += po * u[k];
                }
            }
            for o in 0..l.out_dim {
                grads.data[l.b_off + o] += p[o];
            }
        }
    }

    fn input_adjoint(&self, l: &LayerSpec, padj: &Matrix) -> Matrix {
        let n = padj.rows();
        let mut adj = Matrix::zeros(n, l.in_dim);
        for r in 0..n {
            let p = padj.row(r);
            let a = adj.row_mut(r);
            for o in 0..l.out_dim {
                let po = p[o];
                if po == 0.0 {
                    continue;
                }
                let w = self.weight_row(l, o);
                for k in 0..l.in_dim {
                    a[k] += po * w[k];
                }
            }
        }
        adj
    }

    /// Forward-mode evaluation: returns `(value, tangent)` where the tangent
    /// is `∂ net([x, t(s)]) / ∂s` with `dt/ds = t_scale` and `x` constant.
    ///
    /// With `t_scale = 1` this is the plain time derivative. The activation is
    /// smooth by construction, so the pass is total.
    pub fn forward_dual(&self, x: &Matrix, t: &[f64], t_scale: f64) -> Result<(Matrix, Matrix)> {
        let (v, d, _) = self.dual_pass(x, t, self.input_dim() - 1, t_scale, false)?;
        Ok((v, d))
    }

    /// `∂ net([x, t]) / ∂t` holding `x` fixed.
    pub fn time_derivative(&self, x: &Matrix, t: &[f64]) -> Result<Matrix> {
        Ok(self.forward_dual(x, t, 1.0)?.1)
    }

    /// `∂ net([x, t]) / ∂x_coord` holding the other inputs fixed: the same
    /// forward-mode pass with the tangent seeded on one spatial coordinate.
    pub fn coordinate_derivative(&self, x: &Matrix, t: &[f64], coord: usize) -> Result<Matrix> {
        if coord + 1 >= self.input_dim() {
            return Err(Error::dimension(format!(
                "coordinate {coord} out of {} spatial inputs",
                self.input_dim() - 1
            )));
        }
        let (_, d, _) = self.dual_pass(x, t, coord, 1.0, false)?;
        Ok(d)
    }

    /// Dual forward pass that records intermediates for [`Mlp::backward_dual`].
    pub fn forward_dual_recorded(
        &self,
        x: &Matrix,
        t: &[f64],
        t_scale: f64,
    ) -> Result<(Matrix, Matrix, DualTrace)> {
        let (v, d, trace) = self.dual_pass(x, t, self.input_dim() - 1, t_scale, true)?;
        Ok((v, d, trace.expect("recorded pass keeps its trace")))
    }

    fn dual_pass(
        &self,
        x: &Matrix,
        t: &[f64],
        seed_col: usize,
        seed_scale: f64,
        record: bool,
    ) -> Result<(Matrix, Matrix, Option<DualTrace>)> {
        self.check_shapes(x, t)?;
        let n = x.rows();
        let d_in = self.input_dim();
        let input_v = self.with_time(x, t);
        let mut input_d = Matrix::zeros(n, d_in);
        for r in 0..n {
            input_d.set(r, seed_col, seed_scale);
        }

        let last = self.layers.len() - 1;
        let mut pre_v_all = Vec::new();
        let mut pre_d_all = Vec::new();
        let mut act_v_all = Vec::new();
        let mut act_d_all = Vec::new();

        let mut cur_v = input_v.clone();
        let mut cur_d = input_d.clone();
        for (li, l) in self.layers.iter().enumerate() {
            let pre_v = self.affine(l, &cur_v);
            let pre_d = self.affine_nobias(l, &cur_d);
            if record {
                pre_v_all.push(pre_v.clone());
                pre_d_all.push(pre_d.clone());
            }
            if li < last {
                let mut act_v = pre_v;
                let mut act_d = pre_d;
                for (av, ad) in act_v
                    .as_mut_slice()
                    .iter_mut()
                    .zip(act_d.as_mut_slice().iter_mut())
                {
                    let z = *av;
                    *av = self.activation.f(z);
                    *ad *= self.activation.df(z);
                }
                if record {
                    act_v_all.push(act_v.clone());
                    act_d_all.push(act_d.clone());
                }
                cur_v = act_v;
                cur_d = act_d;
            } else {
                cur_v = pre_v;
                cur_d = pre_d;
            }
        }

        let trace = record.then_some(DualTrace {
            input_v,
            input_d,
            pre_v: pre_v_all,
            pre_d: pre_d_all,
            act_v: act_v_all,
            act_d: act_d_all,
        });
        Ok((cur_v, cur_d, trace))
    }

    /// Reverse-over-forward pass.
    ///
    /// Given adjoints of a scalar loss with respect to both dual components of
    /// the output — `adj_value = ∂L/∂value`, `adj_tangent = ∂L/∂tangent` —
    /// accumulate `∂L/∂params` into `grads`. This yields exact gradients for
    /// losses containing the network's time derivative; the mixed term pulls
    /// in the activation's second derivative.
    pub fn backward_dual(
        &self,
        trace: &DualTrace,
        adj_value: &Matrix,
        adj_tangent: &Matrix,
        grads: &mut MlpGradients,
    ) {
        let last = self.layers.len() - 1;
        let mut adj_v = adj_value.clone();
        let mut adj_d = adj_tangent.clone();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let (mut pv, mut pd) = (adj_v, adj_d);
            if li < last {
                // out.v = σ(pre.v); out.d = σ'(pre.v) ⊙ pre.d
                let pre_v = &trace.pre_v[li];
                let pre_d = &trace.pre_d[li];
                for i in 0..pv.as_slice().len() {
                    let z = pre_v.as_slice()[i];
                    let zd = pre_d.as_slice()[i];
                    let ov = pv.as_slice()[i];
                    let od = pd.as_slice()[i];
                    pv.as_mut_slice()[i] =
                        ov * self.activation.df(z) + od * self.activation.ddf(z) * zd;
                    pd.as_mut_slice()[i] = od * self.activation.df(z);
                }
            }
            let (in_v, in_d) = if li == 0 {
                (&trace.input_v, &trace.input_d)
            } else {
                (&trace.act_v[li - 1], &trace.act_d[li - 1])
            };
            // pre.v = in.v · Wᵀ + b ; pre.d = in.d · Wᵀ
            self.accumulate_affine_grads(l, in_v, &pv, grads);
            self.accumulate_dual_weight_grads(l, in_d, &pd, grads);
            if li > 0 {
                adj_v = self.input_adjoint(l, &pv);
                adj_d = self.input_adjoint(l, &pd);
            } else {
                adj_v = pv;
                adj_d = pd;
            }
        }
    }

    fn accumulate_dual_weight_grads(
        &self,
        l: &LayerSpec,
        in_d: &Matrix,
        pd: &Matrix,
        grads: &mut MlpGradients,
    ) {
        let n = in_d.rows();
        for r in 0..n {
            let u = in_d.row(r);
            let p = pd.row(r);
            for o in 0..l.out_dim {
                let po = p[o];
                if po == 0.0 {
                    continue;
                }
                let w_start = l.w_off + o * l.in_dim;
                let gw = &mut grads.data[w_start..w_start + l.in_dim];
                for k in 0..l.in_dim {
                    gw[k] += po * u[k];
                }
            }
            // bias does not enter the tangent path
        }
    }
}
