//! End-to-end experiment driver: configuration, staged pipelines, artifact
//! emission, and the reproducibility manifest.
//!
//! A run walks the full pipeline per seed — build the dataset, construct the
//! training field, fit the path interpolant (stage one, skipped for the
//! zero-drift baselines), fit the bridge (stage two), integrate trajectories,
//! and score them — writing checkpoints, loss curves, a trajectory CSV/SVG,
//! and per-seed metric rows along the way. The manifest records the resolved
//! configuration and a hash of it; replaying a manifest reproduces every
//! metric bitwise, because all randomness flows from per-purpose streams
//! derived from `(seed, label)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{
    gen_asymmetric_circles, gen_gaussian_spiral, ingest_csv, rollout_dataset, MultiMarginalDataset,
    Snapshot,
};
use crate::error::{Error, Result};
use crate::fields::{ReferenceField, Weighting};
use crate::interpolant::{train_interpolant, InterpolantTrainConfig, PathInterpolant};
use crate::matcher::{train_bridge, BridgeModel, BridgeTrainConfig, Method, PairMode, PlanSolver};
use crate::metrics::{
    cosine_distance_along, emd, l2_cost_along, mmd, mse_known_coupling, precision_at_k,
    wasserstein2, Bandwidth, L2Mode, MetricReport, MetricRow,
};
use crate::numkit::{Activation, Matrix};
use crate::rng;
use crate::simulate::{integrate_ode, integrate_sde, ScoreComposition, Trajectory};

/// Ground-truth field description for synthetic datasets.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldSpec {
    Zero { dim: usize },
    Rotational { omega: f64 },
    Spiral { speed: f64, omega: f64, dim: usize },
}

impl FieldSpec {
    pub fn build(&self) -> Result<ReferenceField> {
        match self {
            FieldSpec::Zero { dim } => Ok(ReferenceField::Zero { dim: *dim }),
            FieldSpec::Rotational { omega } => Ok(ReferenceField::Rotational2D { omega: *omega }),
            FieldSpec::Spiral { speed, omega, dim } => {
                ReferenceField::spiral(*speed, *omega, *dim)
            }
        }
    }
}

/// Dataset construction recipe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    GaussianSpiral {
        n: usize,
        dim: usize,
        #[serde(default = "default_unit")]
        sigma_marginals: f64,
    },
    Circles {
        n: usize,
        radii: (f64, f64),
        skew: f64,
        noise: f64,
    },
    Rollout {
        field: FieldSpec,
        n: usize,
        marginal_times: Vec<f64>,
        #[serde(default = "default_dt")]
        dt_solver: f64,
        init_center: Vec<f64>,
        init_radius: f64,
        #[serde(default)]
        held_out: Vec<usize>,
    },
    Csv {
        paths: Vec<PathBuf>,
        #[serde(default)]
        held_out: Vec<usize>,
    },
}

fn default_unit() -> f64 {
    1.0
}

fn default_dt() -> f64 {
    1e-3
}

/// Which drift supervises training.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FieldChoice {
    /// The dataset's analytic ground-truth field (synthetic datasets only).
    Analytic,
    /// k-NN kernel over the training snapshots' velocities.
    Knn {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        literal_ratio_weights: bool,
    },
}

fn default_k() -> usize {
    20
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "solver", rename_all = "kebab-case")]
pub enum CouplingChoice {
    Exact,
    /// Entropic plan. Omitting `eps` uses `2σ²`, the regularization weight
    /// the zero-drift entropic problem carries.
    Sinkhorn {
        #[serde(default)]
        eps: Option<f64>,
    },
    Independent,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TimeSamplingSpec {
    Uniform {
        #[serde(default = "default_one")]
        k: usize,
    },
    Equispaced { n: usize },
}

fn default_one() -> usize {
    1
}

impl TimeSamplingSpec {
    fn build(&self) -> crate::coupling::TimeSampling {
        match self {
            TimeSamplingSpec::Uniform { k } => crate::coupling::TimeSampling::UniformRandom { k: *k },
            TimeSamplingSpec::Equispaced { n } => crate::coupling::TimeSampling::Equispaced { n: *n },
        }
    }
}

/// Ablation axis values; only the swept axis needs to be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AblationValues {
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub beta_noise: Vec<f64>,
    #[serde(default)]
    pub coupling: Vec<CouplingChoice>,
    #[serde(default)]
    pub n_times: Vec<usize>,
}

/// Full description of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    /// `curly`, `cfm`, or `otcfm`.
    pub method: String,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_field_choice")]
    pub field: FieldChoice,
    /// Blend the training field with noise: `(1−β)·f + β·n`.
    #[serde(default)]
    pub beta_noise: f64,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Stage-one optimizer steps (one minibatch per step).
    #[serde(default = "default_epochs")]
    pub interp_epochs: usize,
    /// Stage-two optimizer steps.
    #[serde(default = "default_epochs")]
    pub bridge_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_coupling")]
    pub coupling: CouplingChoice,
    #[serde(default = "default_time_sampling")]
    pub time_sampling: TimeSamplingSpec,
    #[serde(default = "default_steps")]
    pub integration_steps: usize,
    #[serde(default)]
    pub score_composition: ScoreComposition,
    /// Cap on particles used in set-distance evaluation (seeded subsample).
    #[serde(default = "default_eval_subsample")]
    pub eval_subsample: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed for dataset generation, separate from run seeds so that every
    /// seed trains on the same data.
    #[serde(default)]
    pub dataset_seed: u64,
    /// Skip stage one and load this interpolant checkpoint instead.
    #[serde(default)]
    pub interp_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub ablate: AblationValues,
}

fn default_field_choice() -> FieldChoice {
    FieldChoice::Analytic
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64, 64]
}

fn default_activation() -> Activation {
    Activation::Silu
}

fn default_epochs() -> usize {
    500
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    1e-4
}

fn default_coupling() -> CouplingChoice {
    CouplingChoice::Exact
}

fn default_time_sampling() -> TimeSamplingSpec {
    TimeSamplingSpec::Uniform { k: 1 }
}

fn default_steps() -> usize {
    100
}

fn default_eval_subsample() -> usize {
    1024
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("config", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        // a manifest embeds the resolved config under "config"
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
            if value.get("config_hash").is_some() {
                if let Some(config) = value.get("config") {
                    return ExperimentConfig::from_json(&config.to_string());
                }
            }
        }
        ExperimentConfig::from_json(&text)
    }

    pub fn method(&self) -> Result<Method> {
        self.method.parse()
    }

    /// Validate every field, naming the offender.
    pub fn validate(&self) -> Result<()> {
        self.method()?;
        if self.sigma < 0.0 {
            return Err(Error::config("sigma", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.beta_noise) {
            return Err(Error::config("beta_noise", "must lie in [0, 1]"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if self.integration_steps == 0 {
            return Err(Error::config("integration_steps", "must be positive"));
        }
        if self.eval_subsample == 0 {
            return Err(Error::config("eval_subsample", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        match &self.coupling {
            CouplingChoice::Sinkhorn { eps: Some(e) } if *e <= 0.0 => {
                return Err(Error::config("coupling.eps", "must be positive"));
            }
            CouplingChoice::Sinkhorn { eps: None } if self.sigma == 0.0 => {
                return Err(Error::config(
                    "coupling.eps",
                    "no eps given and sigma = 0; the 2σ² default degenerates",
                ));
            }
            _ => {}
        }
        match &self.time_sampling {
            TimeSamplingSpec::Uniform { k } if *k == 0 => {
                return Err(Error::config("time_sampling.k", "must be positive"));
            }
            TimeSamplingSpec::Equispaced { n } if *n == 0 => {
                return Err(Error::config("time_sampling.n", "must be positive"));
            }
            _ => {}
        }
        match &self.dataset {
            DatasetSpec::GaussianSpiral { n, dim, sigma_marginals } => {
                if *n == 0 {
                    return Err(Error::config("dataset.n", "must be positive"));
                }
                if *dim < 3 {
                    return Err(Error::config("dataset.dim", "spiral dataset needs dim >= 3"));
                }
                if *sigma_marginals <= 0.0 {
                    return Err(Error::config("dataset.sigma_marginals", "must be positive"));
                }
            }
            DatasetSpec::Circles { n, radii, skew, noise } => {
                if *n == 0 {
                    return Err(Error::config("dataset.n", "must be positive"));
                }
                if radii.0 <= 0.0 || radii.1 <= 0.0 {
                    return Err(Error::config("dataset.radii", "must be positive"));
                }
                if *skew < 0.0 {
                    return Err(Error::config("dataset.skew", "must be nonnegative"));
                }
                if *noise < 0.0 {
                    return Err(Error::config("dataset.noise", "must be nonnegative"));
                }
            }
            DatasetSpec::Rollout { n, marginal_times, dt_solver, init_radius, .. } => {
                if *n == 0 {
                    return Err(Error::config("dataset.n", "must be positive"));
                }
                if marginal_times.len() < 2 {
                    return Err(Error::config("dataset.marginal_times", "need at least two"));
                }
                if marginal_times.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::config(
                        "dataset.marginal_times",
                        "must be strictly increasing",
                    ));
                }
                if *dt_solver <= 0.0 {
                    return Err(Error::config("dataset.dt_solver", "must be positive"));
                }
                if *init_radius < 0.0 {
                    return Err(Error::config("dataset.init_radius", "must be nonnegative"));
                }
            }
            DatasetSpec::Csv { paths, .. } => {
                if paths.len() < 2 {
                    return Err(Error::config("dataset.paths", "need at least two snapshots"));
                }
            }
        }
        if let FieldChoice::Knn { k, .. } = &self.field {
            if *k == 0 {
                return Err(Error::config("field.k", "must be positive"));
            }
        }
        Ok(())
    }

    /// Stable content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }
}

/// A materialized dataset plus its ground-truth field, when one exists.
pub struct BuiltDataset {
    pub data: MultiMarginalDataset,
    pub analytic_field: Option<ReferenceField>,
}

/// Construct the dataset named by the config.
pub fn build_dataset(config: &ExperimentConfig) -> Result<BuiltDataset> {
    let seed = config.dataset_seed;
    match &config.dataset {
        DatasetSpec::GaussianSpiral { n, dim, sigma_marginals } => {
            let (src, tgt, field) = gen_gaussian_spiral(*n, *dim, *sigma_marginals, seed)?;
            let data = MultiMarginalDataset::new(vec![src, tgt], vec![])?;
            Ok(BuiltDataset {
                data,
                analytic_field: Some(field),
            })
        }
        DatasetSpec::Circles { n, radii, skew, noise } => {
            let (src, tgt, field) = gen_asymmetric_circles(*n, *radii, *skew, *noise, seed)?;
            let data = MultiMarginalDataset::new(vec![src, tgt], vec![])?;
            Ok(BuiltDataset {
                data,
                analytic_field: Some(field),
            })
        }
        DatasetSpec::Rollout {
            field,
            n,
            marginal_times,
            dt_solver,
            init_center,
            init_radius,
            held_out,
        } => {
            let reference = field.build()?;
            let data = rollout_dataset(
                &reference,
                *n,
                marginal_times,
                *dt_solver,
                init_center,
                *init_radius,
                held_out.clone(),
                seed,
            )?;
            Ok(BuiltDataset {
                data,
                analytic_field: Some(reference),
            })
        }
        DatasetSpec::Csv { paths, held_out } => {
            let snapshots: Result<Vec<Snapshot>> = paths.iter().map(|p| ingest_csv(p)).collect();
            let data = MultiMarginalDataset::new(snapshots?, held_out.clone())?;
            Ok(BuiltDataset {
                data,
                analytic_field: None,
            })
        }
    }
}

fn knn_weighting(literal: bool) -> Weighting {
    if literal {
        Weighting::DistanceRatio
    } else {
        Weighting::InverseDistance
    }
}

/// The drift that supervises training, including the β-noise corruption.
pub fn training_field(config: &ExperimentConfig, built: &BuiltDataset) -> Result<ReferenceField> {
    let base = match &config.field {
        FieldChoice::Analytic => built.analytic_field.clone().ok_or_else(|| {
            Error::config(
                "field",
                "analytic field requested but the dataset has no ground-truth field; use knn",
            )
        })?,
        FieldChoice::Knn { k, literal_ratio_weights } => built
            .data
            .pooled_reference_field(*k, knn_weighting(*literal_ratio_weights))?,
    };
    if config.beta_noise > 0.0 {
        base.corrupted(config.beta_noise, rng::derive_seed(config.dataset_seed, "beta-noise"))
    } else {
        Ok(base)
    }
}

/// The clean drift used for evaluation.
pub fn evaluation_field(config: &ExperimentConfig, built: &BuiltDataset) -> Result<ReferenceField> {
    match (&built.analytic_field, &config.field) {
        (Some(f), _) => Ok(f.clone()),
        (None, FieldChoice::Knn { k, literal_ratio_weights }) => built
            .data
            .pooled_reference_field(*k, knn_weighting(*literal_ratio_weights)),
        (None, FieldChoice::Analytic) => Err(Error::config(
            "field",
            "no analytic field available for evaluation",
        )),
    }
}

/// Wall-clock record of one pipeline stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    #[serde(default)]
    pub artifact: Option<String>,
}

/// Output of one seed's full pipeline.
pub struct SeedRunOutput {
    pub rows: Vec<MetricRow>,
    pub stages: Vec<StageRecord>,
    pub trajectory: Trajectory,
    pub marginal_grid: Vec<usize>,
}

/// Reproducibility record written at the end of a run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub stages: Vec<StageRecord>,
    pub metrics_csv: String,
    pub aggregate_csv: String,
    pub trajectory_csvs: Vec<String>,
}

/// Prefix errors with the pipeline stage they came from, so a failed run
/// exits naming its stage.
fn in_stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| Error::Staging(format!("{name} stage failed: {e}")))
}

/// Train, simulate, and evaluate one seed, writing artifacts under `out_dir`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<SeedRunOutput> {
    fs::create_dir_all(out_dir)?;
    let method = config.method()?;
    let built = in_stage("dataset", build_dataset(config))?;
    let train_field = in_stage("dataset", training_field(config, &built))?;
    let eval_field = in_stage("dataset", evaluation_field(config, &built))?;
    let marginals = built.data.training_marginals();
    let mut stages = Vec::new();

    // stage one: path interpolant (curly only)
    let interp: Option<PathInterpolant> = if method == Method::Curly {
        let start = Instant::now();
        let interp = match &config.interp_checkpoint {
            Some(path) => in_stage("interpolant", PathInterpolant::load(path))?,
            None => {
                let interp_cfg = InterpolantTrainConfig {
                    steps: config.interp_epochs,
                    batch_size: config.batch_size,
                    lr: config.lr,
                    hidden: config.hidden.clone(),
                    activation: config.activation,
                    seed: rng::derive_seed(seed, "stage1"),
                };
                let (interp, curve) =
                    in_stage("interpolant", train_interpolant(&interp_cfg, &marginals, &train_field))?;
                let mut csv = String::from("step,loss\n");
                for (step, loss) in &curve {
                    let _ = writeln!(csv, "{step},{loss}");
                }
                fs::write(out_dir.join("interp_loss.csv"), csv)?;
                interp
            }
        };
        let ckpt = out_dir.join("interpolant.json");
        interp.save(&ckpt)?;
        stages.push(StageRecord {
            stage: "interpolant".into(),
            seconds: start.elapsed().as_secs_f64(),
            artifact: Some(ckpt.display().to_string()),
        });
        Some(interp)
    } else {
        None
    };

    // stage two: bridge training
    let start = Instant::now();
    let (solver, pair_mode) = match config.coupling {
        CouplingChoice::Exact => (PlanSolver::Exact, PairMode::Solve),
        CouplingChoice::Sinkhorn { eps } => {
            let eps = eps.unwrap_or(2.0 * config.sigma * config.sigma);
            (PlanSolver::Sinkhorn { eps }, PairMode::Solve)
        }
        CouplingChoice::Independent => (PlanSolver::Exact, PairMode::Independent),
    };
    let bridge_cfg = BridgeTrainConfig {
        steps: config.bridge_epochs,
        batch_size: config.batch_size,
        lr: config.lr,
        hidden: config.hidden.clone(),
        activation: config.activation,
        sigma: config.sigma,
        method,
        solver,
        pair_mode,
        time_sampling: config.time_sampling.build(),
        seed: rng::derive_seed(seed, "stage2"),
    };
    let (model, logs) =
        in_stage("bridge", train_bridge(&bridge_cfg, interp.as_ref(), &marginals, &train_field))?;
    let mut csv = String::from("step,flow_loss,score_loss,coupling_cost\n");
    for log in &logs {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            log.step, log.flow_loss, log.score_loss, log.coupling_cost
        );
    }
    fs::write(out_dir.join("bridge_log.csv"), csv)?;
    let drift_ckpt = out_dir.join("drift.json");
    model.save(&drift_ckpt)?;
    stages.push(StageRecord {
        stage: "bridge".into(),
        seconds: start.elapsed().as_secs_f64(),
        artifact: Some(drift_ckpt.display().to_string()),
    });

    // simulate from the first marginal across every dataset marginal time
    let start = Instant::now();
    let (x0, eval_rows) = evaluation_start(config, &built, seed);
    let all_times: Vec<f64> = built.data.snapshots().iter().map(|s| s.time).collect();
    let (trajectory, marginal_grid) = in_stage(
        "simulate",
        simulate_through_marginals(
            &model,
            &x0,
            &all_times,
            config.integration_steps,
            config.score_composition,
            rng::derive_seed(seed, "simulate"),
        ),
    )?;
    let traj_csv = out_dir.join("trajectory.csv");
    fs::write(&traj_csv, trajectory.to_csv())?;
    if trajectory.dim() >= 2 {
        fs::write(out_dir.join("trajectory.svg"), trajectory_svg(&trajectory, 200))?;
    }
    stages.push(StageRecord {
        stage: "simulate".into(),
        seconds: start.elapsed().as_secs_f64(),
        artifact: Some(traj_csv.display().to_string()),
    });

    // evaluate
    let start = Instant::now();
    let rows = in_stage(
        "evaluate",
        evaluate(
            config,
            &built,
            &eval_field,
            &model,
            &trajectory,
            &marginal_grid,
            &eval_rows,
            seed,
        ),
    )?;
    stages.push(StageRecord {
        stage: "evaluate".into(),
        seconds: start.elapsed().as_secs_f64(),
        artifact: None,
    });

    Ok(SeedRunOutput {
        rows,
        stages,
        trajectory,
        marginal_grid,
    })
}

/// Starting particles (rows of marginal 0) capped at `eval_subsample` with a
/// seeded, sorted index choice; the indices apply to every aligned marginal.
fn evaluation_start(config: &ExperimentConfig, built: &BuiltDataset, seed: u64) -> (Matrix, Vec<usize>) {
    let first = built.data.snapshot(0).positions();
    let n = first.rows();
    if n <= config.eval_subsample {
        return (first.clone(), (0..n).collect());
    }
    let mut stream = rng::stream(seed, "eval/subsample");
    let mut idx: Vec<usize> =
        rand::seq::index::sample(&mut stream, n, config.eval_subsample).into_vec();
    idx.sort_unstable();
    (first.select_rows(&idx), idx)
}

/// Integrate piecewise so that every marginal time is an exact grid point.
/// Returns the trajectory and the grid index of each marginal.
pub fn simulate_through_marginals(
    model: &BridgeModel,
    x0: &Matrix,
    marginal_times: &[f64],
    total_steps: usize,
    composition: ScoreComposition,
    seed: u64,
) -> Result<(Trajectory, Vec<usize>)> {
    let total_width: f64 = marginal_times.last().unwrap() - marginal_times[0];
    let mut times = vec![marginal_times[0]];
    let mut states = Vec::new();
    let mut velocities = Vec::new();
    let mut marginal_grid = vec![0usize];
    let mut x = x0.clone();
    states.push(x.clone());

    for (i, w) in marginal_times.windows(2).enumerate() {
        let width = w[1] - w[0];
        let frac = width / total_width;
        let steps = ((total_steps as f64 * frac).round() as usize).max(1);
        let piece = if model.sigma() > 0.0 {
            integrate_sde(
                model,
                &x,
                steps,
                (w[0], w[1]),
                composition,
                rng::derive_seed(seed, &format!("segment/{i}")),
            )?
        } else {
            integrate_ode(model, &x, steps, (w[0], w[1]))?
        };
        // skip the duplicated boundary state
        times.extend_from_slice(&piece.times[1..]);
        states.extend(piece.states[1..].iter().cloned());
        velocities.extend(piece.velocities.unwrap_or_default());
        x = piece.states.last().unwrap().clone();
        marginal_grid.push(states.len() - 1);
    }
    Ok((
        Trajectory {
            times,
            states,
            log_density: None,
            velocities: Some(velocities),
        },
        marginal_grid,
    ))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    config: &ExperimentConfig,
    built: &BuiltDataset,
    eval_field: &ReferenceField,
    model: &BridgeModel,
    trajectory: &Trajectory,
    marginal_grid: &[usize],
    eval_rows: &[usize],
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let method = config.method.clone();
    let dataset = config.name.clone();
    let mut rows = Vec::new();
    let mut push = |marginal: Option<usize>, metric: &str, value: f64| {
        rows.push(MetricRow {
            method: method.clone(),
            dataset: dataset.clone(),
            marginal,
            metric: metric.into(),
            seed,
            value,
        });
    };

    let cos = cosine_distance_along(trajectory, eval_field)?;
    push(None, "cos_dist", cos.value);
    push(None, "l2_cost", l2_cost_along(trajectory, eval_field, L2Mode::Squared)?);

    let sub_seed = rng::derive_seed(seed, "eval/setdist");
    for (m, snapshot) in built.data.snapshots().iter().enumerate().skip(1) {
        let predicted = &trajectory.states[marginal_grid[m]];
        let truth_all = snapshot.positions();
        push(Some(m), "w2", wasserstein2(predicted, truth_all, sub_seed)?);
        push(Some(m), "emd", emd(predicted, truth_all, sub_seed)?);
        if predicted.rows() >= 2 && truth_all.rows() >= 2 {
            push(Some(m), "mmd", mmd(predicted, truth_all, Bandwidth::Median)?);
        }
    }

    // known-coupling metrics are one-marginal-ahead: start each prediction at
    // the last preceding *training* marginal's true particle positions
    if built.data.aligned {
        let held_out = built.data.held_out_indices();
        for (m, snapshot) in built.data.snapshots().iter().enumerate().skip(1) {
            let mut p = m - 1;
            while held_out.contains(&p) {
                p -= 1; // marginal 0 is never held out, so this terminates
            }
            let start_snap = built.data.snapshot(p);
            let start = start_snap.positions().select_rows(eval_rows);
            let span = (start_snap.time, snapshot.time);
            let frac = (span.1 - span.0)
                / (built.data.snapshots().last().unwrap().time - built.data.snapshot(0).time);
            let steps = ((config.integration_steps as f64 * frac).round() as usize).max(4);
            let piece = if model.sigma() > 0.0 {
                integrate_sde(
                    model,
                    &start,
                    steps,
                    span,
                    config.score_composition,
                    rng::derive_seed(seed, &format!("eval/ahead/{m}")),
                )?
            } else {
                integrate_ode(model, &start, steps, span)?
            };
            let predicted = piece.terminal();
            let truth = snapshot.positions().select_rows(eval_rows);
            push(Some(m), "mse", mse_known_coupling(predicted, &truth)?);
            for k in [5usize, 10] {
                if k <= truth.rows() {
                    push(
                        Some(m),
                        &format!("precision_at_{k}"),
                        precision_at_k(predicted, &truth, k)?,
                    );
                }
            }
        }
    }
    Ok(rows)
}

/// Outcome of a full (all seeds) run.
pub struct RunOutput {
    pub report: MetricReport,
    pub manifest_path: PathBuf,
    pub metrics_csv_path: PathBuf,
}

/// Execute the configured run for every seed, writing artifacts under
/// `out_root/<name>/`.
pub fn run(config: &ExperimentConfig, out_root: &Path) -> Result<RunOutput> {
    config.validate()?;
    let run_dir = out_root.join(&config.name);
    fs::create_dir_all(&run_dir)?;

    let mut report = MetricReport::default();
    let mut stages = Vec::new();
    let mut trajectory_csvs = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = run_dir.join(format!("seed_{seed}"));
        let output = run_seed(config, seed, &seed_dir)?;
        for row in output.rows {
            report.push(row);
        }
        for mut stage in output.stages {
            stage.stage = format!("seed_{seed}/{}", stage.stage);
            stages.push(stage);
        }
        trajectory_csvs.push(seed_dir.join("trajectory.csv").display().to_string());
    }

    let metrics_csv_path = run_dir.join("metrics.csv");
    fs::write(&metrics_csv_path, report.to_csv())?;
    let aggregate_csv_path = run_dir.join("aggregate.csv");
    fs::write(&aggregate_csv_path, report.aggregate_csv())?;

    let manifest = RunManifest {
        config_hash: config.hash(),
        config: config.clone(),
        seeds: config.seeds.clone(),
        stages,
        metrics_csv: metrics_csv_path.display().to_string(),
        aggregate_csv: aggregate_csv_path.display().to_string(),
        trajectory_csvs,
    };
    let manifest_path = run_dir.join("manifest.json");
    write_atomic(
        &manifest_path,
        &serde_json::to_string_pretty(&manifest).map_err(|e| Error::config("manifest", e.to_string()))?,
    )?;
    Ok(RunOutput {
        report,
        manifest_path,
        metrics_csv_path,
    })
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Ablation axes mirroring the study tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Sigma,
    BetaNoise,
    Coupling,
    NTimes,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(AblationAxis::Sigma),
            "beta-noise" => Ok(AblationAxis::BetaNoise),
            "coupling" => Ok(AblationAxis::Coupling),
            "n-times" => Ok(AblationAxis::NTimes),
            other => Err(Error::config(
                "axis",
                format!("unknown axis `{other}` (expected sigma, beta-noise, coupling, n-times)"),
            )),
        }
    }
}

/// One full run per axis value per seed; per-value artifacts land under
/// `out_root/<name>-<axis>-<value>/` and a combined summary at
/// `out_root/<name>-ablate-<axis>.csv`.
pub fn ablate(config: &ExperimentConfig, axis: AblationAxis, out_root: &Path) -> Result<PathBuf> {
    config.validate()?;
    let mut variants: Vec<(String, ExperimentConfig)> = Vec::new();
    match axis {
        AblationAxis::Sigma => {
            if config.ablate.sigma.is_empty() {
                return Err(Error::config("ablate.sigma", "no values listed"));
            }
            for &sigma in &config.ablate.sigma {
                let mut c = config.clone();
                c.sigma = sigma;
                variants.push((format!("sigma-{sigma}"), c));
            }
        }
        AblationAxis::BetaNoise => {
            if config.ablate.beta_noise.is_empty() {
                return Err(Error::config("ablate.beta_noise", "no values listed"));
            }
            for &beta in &config.ablate.beta_noise {
                let mut c = config.clone();
                c.beta_noise = beta;
                variants.push((format!("beta-{beta}"), c));
            }
        }
        AblationAxis::Coupling => {
            if config.ablate.coupling.is_empty() {
                return Err(Error::config("ablate.coupling", "no values listed"));
            }
            for &choice in &config.ablate.coupling {
                let mut c = config.clone();
                c.coupling = choice;
                let label = match choice {
                    CouplingChoice::Exact => "exact".to_string(),
                    CouplingChoice::Sinkhorn { eps } => match eps {
                        Some(e) => format!("sinkhorn-{e}"),
                        None => "sinkhorn-2sigma2".to_string(),
                    },
                    CouplingChoice::Independent => "independent".to_string(),
                };
                variants.push((format!("coupling-{label}"), c));
            }
        }
        AblationAxis::NTimes => {
            if config.ablate.n_times.is_empty() {
                return Err(Error::config("ablate.n_times", "no values listed"));
            }
            for &n in &config.ablate.n_times {
                let mut c = config.clone();
                c.time_sampling = if n == 1 {
                    TimeSamplingSpec::Uniform { k: 1 }
                } else {
                    TimeSamplingSpec::Equispaced { n }
                };
                variants.push((format!("n-times-{n}"), c));
            }
        }
    }

    let mut combined = String::from("variant,method,marginal,metric,mean,std\n");
    for (label, mut variant) in variants {
        variant.name = format!("{}-{label}", config.name);
        let output = run(&variant, out_root)?;
        for line in output.report.aggregate_csv().lines().skip(1) {
            let _ = writeln!(combined, "{label},{line}");
        }
    }
    let summary = out_root.join(format!("{}-ablate-{}.csv", config.name, axis_name(axis)));
    fs::write(&summary, combined)?;
    Ok(summary)
}

fn axis_name(axis: AblationAxis) -> &'static str {
    match axis {
        AblationAxis::Sigma => "sigma",
        AblationAxis::BetaNoise => "beta-noise",
        AblationAxis::Coupling => "coupling",
        AblationAxis::NTimes => "n-times",
    }
}

/// SVG polyline plot of up to `max_particles` trajectories, projected onto
/// the first two coordinates. Deterministic output.
pub fn trajectory_svg(traj: &Trajectory, max_particles: usize) -> String {
    let n = traj.particles().min(max_particles);
    let (w, h) = (640.0, 640.0);
    let (min, max) = svg_bounds(traj, n);
    let pad = 0.05 * ((max.0 - min.0).max(max.1 - min.1)).max(1e-9);
    let sx = (w - 20.0) / (max.0 - min.0 + 2.0 * pad);
    let sy = (h - 20.0) / (max.1 - min.1 + 2.0 * pad);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            10.0 + (x - min.0 + pad) * sx,
            h - 10.0 - (y - min.1 + pad) * sy,
        )
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for p in 0..n {
        let mut path = String::from("<polyline fill=\"none\" stroke=\"#4477aa\" stroke-width=\"0.8\" opacity=\"0.55\" points=\"");
        for state in &traj.states {
            let (px, py) = to_px(state.get(p, 0), state.get(p, 1));
            let _ = write!(path, "{px:.2},{py:.2} ");
        }
        path.push_str("\"/>\n");
        svg.push_str(&path);
        let (sx0, sy0) = to_px(traj.states[0].get(p, 0), traj.states[0].get(p, 1));
        let last = traj.states.last().unwrap();
        let (ex, ey) = to_px(last.get(p, 0), last.get(p, 1));
        let _ = write!(
            svg,
            "<circle cx=\"{sx0:.2}\" cy=\"{sy0:.2}\" r=\"1.6\" fill=\"#228833\"/>\n<circle cx=\"{ex:.2}\" cy=\"{ey:.2}\" r=\"1.6\" fill=\"#ee6677\"/>\n"
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn svg_bounds(traj: &Trajectory, n: usize) -> ((f64, f64), (f64, f64)) {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for state in &traj.states {
        for p in 0..n {
            let (x, y) = (state.get(p, 0), state.get(p, 1));
            min.0 = min.0.min(x);
            min.1 = min.1.min(y);
            max.0 = max.0.max(x);
            max.1 = max.1.max(y);
        }
    }
    (min, max)
}

/// SVG quiver plot of a 2-D slice of the field on a `grid × grid` lattice
/// over `[lo, hi]²`. Arrows are drawn in the first two coordinates; higher
/// coordinates are evaluated at zero.
pub fn field_quiver_svg(field: &ReferenceField, lo: f64, hi: f64, grid: usize) -> String {
    let (w, h) = (640.0, 640.0);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            10.0 + (x - lo) / (hi - lo) * (w - 20.0),
            h - 10.0 - (y - lo) / (hi - lo) * (h - 20.0),
        )
    };
    let dim = field.dim();
    let mut max_mag: f64 = 1e-12;
    let mut arrows = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            let x = lo + (hi - lo) * (i as f64 + 0.5) / grid as f64;
            let y = lo + (hi - lo) * (j as f64 + 0.5) / grid as f64;
            let mut point = vec![0.0; dim];
            point[0] = x;
            if dim > 1 {
                point[1] = y;
            }
            let v = field.eval(&point, 0.0);
            let (vx, vy) = (v[0], if dim > 1 { v[1] } else { 0.0 });
            max_mag = max_mag.max((vx * vx + vy * vy).sqrt());
            arrows.push((x, y, vx, vy));
        }
    }
    let cell = (hi - lo) / grid as f64;
    let scale = 0.45 * cell / max_mag;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for (x, y, vx, vy) in arrows {
        let (x0, y0) = to_px(x, y);
        let (x1, y1) = to_px(x + vx * scale, y + vy * scale);
        let _ = write!(
            svg,
            "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y1:.2}\" stroke=\"#222222\" stroke-width=\"1\"/>\n<circle cx=\"{x1:.2}\" cy=\"{y1:.2}\" r=\"1.2\" fill=\"#bb5566\"/>\n"
        );
    }
    svg.push_str("</svg>\n");
    svg
}
