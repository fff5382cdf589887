//! Stage-two training: marginal flow matching with detached interpolant
//! velocity targets, plus conditional score matching when `σ > 0`.
//!
//! Each step couples a fresh minibatch (by kinetic-energy assignment, plain
//! squared-Euclidean assignment, or independently, depending on the method),
//! perturbs the interpolant position into the bridge sample
//!
//! ```text
//! x_t = μ_t + σ·√(t(1−t))·ε ,   ε ~ N(0, I) ,
//! ```
//!
//! and regresses the drift network on the frozen path velocity:
//!
//! ```text
//! L_flow = ½ E ‖ v(x_t, t̂) − target ‖² ,   target = (dμ/dt̂) detached.
//! ```
//!
//! The target is a constant of the optimization — no gradient reaches the
//! interpolant parameters, which stage two never updates. With `σ > 0` a
//! score network trains alongside on `L_score = ½ E ‖ λ_t·s(x_t, t̂) + ε ‖²`
//! with `λ_t = 2√(t(1−t))/σ`, and the combined loss is their sum. Note the
//! optimal drift need not equal the reference drift: the learned process must
//! hit the endpoint marginals, which the reference process need not.
//!
//! The zero-drift baselines are degenerate configurations of the same loop:
//! `cfm` pairs endpoints independently and `otcfm` by squared-Euclidean
//! assignment, both along straight paths (`φ ≡ 0`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::coupling::{
    cost_matrix, independent_coupling, solve_assignment, solve_sinkhorn, squared_euclid_matrix,
    Coupling, TimeSampling,
};
use crate::error::{Error, Result};
use crate::fields::ReferenceField;
use crate::interpolant::PathInterpolant;
use crate::numkit::{
    load_checkpoint, save_checkpoint, Activation, AdamState, Matrix, Mlp, MlpGradients,
};
use crate::rng;

/// Rows with `t(1−t)σ²` below this are excluded from the score term.
const SCORE_VARIANCE_FLOOR: f64 = 1e-12;

/// Training method. Determines the coupling and whether the trained
/// interpolant shapes the conditional paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Kinetic-energy path-cost coupling along the trained interpolant.
    Curly,
    /// Independent coupling, straight paths.
    Cfm,
    /// Squared-Euclidean assignment coupling, straight paths.
    OtCfm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Curly => "curly",
            Method::Cfm => "cfm",
            Method::OtCfm => "otcfm",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curly" => Ok(Method::Curly),
            "cfm" => Ok(Method::Cfm),
            "otcfm" => Ok(Method::OtCfm),
            other => Err(Error::config(
                "method",
                format!("unknown method `{other}` (expected curly, cfm, or otcfm)"),
            )),
        }
    }
}

/// Plan solver for the assignment-based methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlanSolver {
    Exact,
    Sinkhorn { eps: f64 },
}

impl Default for PlanSolver {
    fn default() -> Self {
        PlanSolver::Exact
    }
}

/// Whether stage two solves for a coupling or pairs batches independently.
/// `Independent` is the "without coupling" ablation: interpolant targets stay,
/// the transport plan is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairMode {
    #[default]
    Solve,
    Independent,
}

/// Drift (and optional score) networks over `(x, t̂)`.
#[derive(Debug, Clone)]
pub struct BridgeModel {
    drift: Mlp,
    score: Option<Mlp>,
    sigma: f64,
    dim: usize,
    marginal_times: Vec<f64>,
    trained: bool,
}

impl BridgeModel {
    pub fn new(
        dim: usize,
        hidden: &[usize],
        activation: Activation,
        sigma: f64,
        seed: u64,
        marginal_times: Vec<f64>,
    ) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::config("sigma", "diffusion level must be nonnegative"));
        }
        let drift = Mlp::new(dim + 1, hidden, dim, activation, rng::derive_seed(seed, "drift"))?;
        let score = if sigma > 0.0 {
            Some(Mlp::new(
                dim + 1,
                hidden,
                dim,
                activation,
                rng::derive_seed(seed, "score"),
            )?)
        } else {
            None
        };
        Ok(BridgeModel {
            drift,
            score,
            sigma,
            dim,
            marginal_times,
            trained: false,
        })
    }

    /// Assemble a model from prebuilt networks. The score network must be
    /// present exactly when `σ > 0`.
    pub fn from_parts(
        drift: Mlp,
        score: Option<Mlp>,
        sigma: f64,
        dim: usize,
        marginal_times: Vec<f64>,
    ) -> Self {
        assert_eq!(
            score.is_some(),
            sigma > 0.0,
            "score network present iff sigma > 0"
        );
        BridgeModel {
            drift,
            score,
            sigma,
            dim,
            marginal_times,
            trained: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn marginal_times(&self) -> &[f64] {
        &self.marginal_times
    }

    pub fn drift_net(&self) -> &Mlp {
        &self.drift
    }

    pub fn score_net(&self) -> Option<&Mlp> {
        self.score.as_ref()
    }

    /// `v(x, t̂)` batched over rows.
    pub fn drift_at(&self, x: &Matrix, t_hat: &[f64]) -> Result<Matrix> {
        self.drift.forward(x, t_hat)
    }

    /// Calibrated score estimate `∇log p_t(x)`, batched over rows.
    ///
    /// The network itself is trained against the `λ_t = 2√(t(1−t))/σ`
    /// weighting, whose pointwise minimizer is `(σ²/2)·∇log p` — the raw
    /// output already carries the diffusion scaling. This accessor divides it
    /// back out, so callers get the plain score and the SDE composition
    /// `v + (σ²/2)·score` reproduces the raw-sum arithmetic of the trained
    /// networks. Configuration error when `σ = 0`.
    pub fn score_at(&self, x: &Matrix, t_hat: &[f64]) -> Result<Matrix> {
        match &self.score {
            Some(net) => {
                let mut out = net.forward(x, t_hat)?;
                let calibration = 2.0 / (self.sigma * self.sigma);
                for v in out.as_mut_slice() {
                    *v *= calibration;
                }
                Ok(out)
            }
            None => Err(Error::config(
                "score",
                "model was built with sigma = 0 and carries no score network",
            )),
        }
    }

    /// Raw score-network output `≈ (σ²/2)·∇log p`, without calibration.
    pub fn score_net_raw_at(&self, x: &Matrix, t_hat: &[f64]) -> Result<Matrix> {
        match &self.score {
            Some(net) => net.forward(x, t_hat),
            None => Err(Error::config(
                "score",
                "model was built with sigma = 0 and carries no score network",
            )),
        }
    }

    pub fn save(&self, drift_path: &std::path::Path) -> Result<()> {
        save_checkpoint(&self.drift, drift_path)?;
        if let Some(score) = &self.score {
            save_checkpoint(score, &score_path(drift_path))?;
        }
        Ok(())
    }

    pub fn load(
        drift_path: &std::path::Path,
        sigma: f64,
        marginal_times: Vec<f64>,
    ) -> Result<Self> {
        let drift = load_checkpoint(drift_path)?;
        let dim = drift.output_dim();
        let score = if sigma > 0.0 {
            Some(load_checkpoint(&score_path(drift_path))?)
        } else {
            None
        };
        Ok(BridgeModel {
            drift,
            score,
            sigma,
            dim,
            marginal_times,
            trained: true,
        })
    }
}

fn score_path(drift_path: &std::path::Path) -> std::path::PathBuf {
    let mut p = drift_path.as_os_str().to_owned();
    p.push(".score");
    std::path::PathBuf::from(p)
}

/// Bridge perturbation `x_t = μ + σ·√(t(1−t))·ε` with `ε` drawn from `rng`.
/// Returns `(x_t, ε)`; `σ = 0` returns `μ` with the (unused) draw recorded.
pub fn noisy_bridge_sample(
    mu: &[f64],
    t: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..mu.len()).map(|_| StandardNormal.sample(rng)).collect();
    let scale = sigma * (t * (1.0 - t)).max(0.0).sqrt();
    let x = mu.iter().zip(&eps).map(|(m, e)| m + scale * e).collect();
    (x, eps)
}

/// Score-loss weight `λ_t = 2√(t(1−t))/σ`.
///
/// Undefined at `σ = 0` (the score path is disabled there); returns 0 at the
/// endpoints, where the training loop must skip the score term.
pub fn lambda_t(t: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::config(
            "sigma",
            "lambda_t is undefined at sigma = 0; the score path is disabled",
        ));
    }
    Ok(2.0 * (t * (1.0 - t)).max(0.0).sqrt() / sigma)
}

/// Flow-matching loss `½·mean‖v(x_t, t̂) − target‖²` and its gradient for the
/// drift network. `target` is a constant of the optimization.
pub fn flow_loss(
    drift: &Mlp,
    x_t: &Matrix,
    t_hat: &[f64],
    target: &Matrix,
    grads: &mut MlpGradients,
) -> Result<f64> {
    let n = x_t.rows();
    let (v, trace) = drift.forward_recorded(x_t, t_hat)?;
    let mut adj = Matrix::zeros(n, v.cols());
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..v.as_slice().len() {
        let r = v.as_slice()[i] - target.as_slice()[i];
        loss += 0.5 * r * r * inv_n;
        adj.as_mut_slice()[i] = r * inv_n;
    }
    if !loss.is_finite() {
        return Err(Error::Training("non-finite flow loss".into()));
    }
    drift.backward(&trace, &adj, grads);
    Ok(loss)
}

/// Conditional score-matching loss `½·mean‖λ_t·s(x_t, t̂) + ε‖²` and its
/// gradient. Rows must already be filtered to `λ_t > 0`.
pub fn score_loss(
    score: &Mlp,
    x_t: &Matrix,
    t_hat: &[f64],
    eps: &Matrix,
    lambda: &[f64],
    grads: &mut MlpGradients,
) -> Result<f64> {
    let n = x_t.rows();
    let d = eps.cols();
    let (s, trace) = score.forward_recorded(x_t, t_hat)?;
    let mut adj = Matrix::zeros(n, d);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let lam = lambda[r];
        for c in 0..d {
            let residual = lam * s.get(r, c) + eps.get(r, c);
            loss += 0.5 * residual * residual * inv_n;
            adj.set(r, c, lam * residual * inv_n);
        }
    }
    if !loss.is_finite() {
        return Err(Error::Training("non-finite score loss".into()));
    }
    score.backward(&trace, &adj, grads);
    Ok(loss)
}

/// Stage-two training configuration.
#[derive(Debug, Clone)]
pub struct BridgeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma: f64,
    pub method: Method,
    pub solver: PlanSolver,
    pub pair_mode: PairMode,
    pub time_sampling: TimeSampling,
    pub seed: u64,
}

impl Default for BridgeTrainConfig {
    fn default() -> Self {
        BridgeTrainConfig {
            steps: 500,
            batch_size: 64,
            lr: 1e-4,
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
            sigma: 0.0,
            method: Method::Curly,
            solver: PlanSolver::Exact,
            pair_mode: PairMode::default(),
            time_sampling: TimeSampling::default(),
            seed: 0,
        }
    }
}

/// Per-step training log record.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeStepLog {
    pub step: usize,
    pub flow_loss: f64,
    pub score_loss: f64,
    pub coupling_cost: f64,
}

/// Train the drift (and score) networks per the configured method.
///
/// `interp` must be a trained interpolant for [`Method::Curly`]; the baseline
/// methods pin `φ ≡ 0` internally and ignore it. The interpolant is never
/// mutated — its parameters receive no gradient.
pub fn train_bridge(
    config: &BridgeTrainConfig,
    interp: Option<&PathInterpolant>,
    marginals: &[(f64, &Matrix)],
    field: &ReferenceField,
) -> Result<(BridgeModel, Vec<BridgeStepLog>)> {
    if marginals.len() < 2 {
        return Err(Error::config("marginals", "need at least two snapshots"));
    }
    let dim = marginals[0].1.cols();
    let times: Vec<f64> = marginals.iter().map(|(t, _)| *t).collect();

    let straight;
    let paths: &PathInterpolant = match config.method {
        Method::Curly => interp.ok_or_else(|| {
            Error::Staging(
                "curly training needs a trained path interpolant; run stage one first".into(),
            )
        })?,
        Method::Cfm | Method::OtCfm => {
            straight = PathInterpolant::straight(dim, &config.hidden, times.clone())?;
            &straight
        }
    };
    if paths.dim() != dim {
        return Err(Error::dimension(format!(
            "interpolant over R^{} used with {dim}-dimensional marginals",
            paths.dim()
        )));
    }

    let mut model = BridgeModel::new(
        dim,
        &config.hidden,
        config.activation,
        config.sigma,
        rng::derive_seed(config.seed, "bridge/init"),
        times,
    )?;

    let mut batch_rng = rng::stream(config.seed, "bridge/batch");
    let mut loss_rng = rng::stream(config.seed, "bridge/loss");
    let mut plan_rng = rng::stream(config.seed, "bridge/plan");
    let cost_seed = rng::derive_seed(config.seed, "bridge/cost");

    let mut drift_adam = AdamState::for_net(&model.drift, config.lr);
    let mut drift_grads = MlpGradients::zeros_like(&model.drift);
    let mut score_state = model
        .score
        .as_ref()
        .map(|net| (AdamState::for_net(net, config.lr), MlpGradients::zeros_like(net)));

    let mut logs = Vec::with_capacity(config.steps);
    let b = config.batch_size;

    for step in 0..config.steps {
        let seg = if paths.segments() == 1 {
            0
        } else {
            batch_rng.random_range(0..paths.segments())
        };
        let (src, dst) = (marginals[seg].1, marginals[seg + 1].1);
        let idx0: Vec<usize> = (0..b).map(|_| batch_rng.random_range(0..src.rows())).collect();
        let idx1: Vec<usize> = (0..b).map(|_| batch_rng.random_range(0..dst.rows())).collect();
        let x0 = src.select_rows(&idx0);
        let x1 = dst.select_rows(&idx1);

        let (coupling, coupling_cost) = couple_batch(config, paths, field, seg, &x0, &x1, cost_seed, step)?;
        let pairs = coupling.draw_pairs(b, &mut plan_rng);
        let paired0: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
        let paired1: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
        let x0p = x0.select_rows(&paired0);
        let x1p = x1.select_rows(&paired1);

        // fresh loss-time and noise draws, independent of the cost draws
        let t: Vec<f64> = (0..b).map(|_| loss_rng.random_range(0.0..1.0)).collect();
        let (mu, mu_dot) = paths.mu_and_dot_batch(seg, &x0p, &x1p, &t)?;
        let t_hat: Vec<f64> = t
            .iter()
            .map(|&ti| paths.global_time(seg, ti))
            .collect::<Result<_>>()?;

        let mut x_t = mu.clone();
        let mut eps = Matrix::zeros(b, dim);
        if config.sigma > 0.0 {
            for r in 0..b {
                let scale = config.sigma * (t[r] * (1.0 - t[r])).sqrt();
                for c in 0..dim {
                    let e: f64 = StandardNormal.sample(&mut loss_rng);
                    eps.set(r, c, e);
                    x_t.set(r, c, mu.get(r, c) + scale * e);
                }
            }
        }

        drift_grads.zero();
        let fl = flow_loss(&model.drift, &x_t, &t_hat, &mu_dot, &mut drift_grads)?;
        drift_adam.step(&mut model.drift, &drift_grads)?;

        let mut sl = 0.0;
        if let (Some(score_net), Some((adam, grads))) = (&mut model.score, &mut score_state) {
            let keep: Vec<usize> = (0..b)
                .filter(|&r| t[r] * (1.0 - t[r]) * config.sigma * config.sigma >= SCORE_VARIANCE_FLOOR)
                .collect();
            if !keep.is_empty() {
                let xk = x_t.select_rows(&keep);
                let tk: Vec<f64> = keep.iter().map(|&r| t_hat[r]).collect();
                let ek = eps.select_rows(&keep);
                let lam: Vec<f64> = keep
                    .iter()
                    .map(|&r| lambda_t(t[r], config.sigma))
                    .collect::<Result<_>>()?;
                grads.zero();
                sl = score_loss(score_net, &xk, &tk, &ek, &lam, grads)?;
                adam.step(score_net, grads)?;
            }
        }

        logs.push(BridgeStepLog {
            step,
            flow_loss: fl,
            score_loss: sl,
            coupling_cost,
        });
    }

    model.trained = true;
    Ok((model, logs))
}

#[allow(clippy::too_many_arguments)]
fn couple_batch(
    config: &BridgeTrainConfig,
    paths: &PathInterpolant,
    field: &ReferenceField,
    seg: usize,
    x0: &Matrix,
    x1: &Matrix,
    cost_seed: u64,
    step: usize,
) -> Result<(Coupling, f64)> {
    if config.pair_mode == PairMode::Independent {
        return Ok((independent_coupling(x0.rows(), x1.rows())?, 0.0));
    }
    match config.method {
        Method::Cfm => {
            let coupling = independent_coupling(x0.rows(), x1.rows())?;
            Ok((coupling, 0.0))
        }
        Method::Curly | Method::OtCfm => {
            let c = if config.method == Method::Curly {
                let step_seed = rng::derive_seed(cost_seed, &step.to_string());
                cost_matrix(paths, field, seg, x0, x1, config.time_sampling, step_seed)?
            } else {
                squared_euclid_matrix(x0, x1)?
            };
            let coupling = match config.solver {
                PlanSolver::Exact => solve_assignment(&c)?,
                PlanSolver::Sinkhorn { eps } => solve_sinkhorn(&c, eps)?,
            };
            let cost = coupling.cost_under(&c);
            Ok((coupling, cost))
        }
    }
}
