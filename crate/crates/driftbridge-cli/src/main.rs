//! Experiment driver for the driftbridge toolkit.
//!
//! Subcommands: `run` (staged pipeline per the config), `ablate` (axis
//! sweeps), `plot` (trajectory and field SVGs), `simulate` (integrate a saved
//! model), and `evaluate` (score a trajectory CSV). The output root resolves
//! from `--out`, then the `DRIFTBRIDGE_OUT` environment variable, then
//! `./runs`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use driftbridge::datasets::ingest_csv;
use driftbridge::experiment::{self, AblationAxis, ExperimentConfig, FieldSpec, RunOutput};
use driftbridge::matcher::BridgeModel;
use driftbridge::metrics::{
    cosine_distance_along, emd, l2_cost_along, mmd, reeval_velocities, wasserstein2, Bandwidth,
    L2Mode,
};
use driftbridge::simulate::{integrate_ode, integrate_sde, parse_trajectory_csv, ScoreComposition};

#[derive(Parser)]
#[command(name = "driftbridge", version, about = "Trajectory inference under a reference drift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output root; falls back to $DRIFTBRIDGE_OUT, then ./runs
    #[arg(long)]
    out: Option<PathBuf>,
}

impl OutArg {
    fn resolve(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("DRIFTBRIDGE_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute the staged pipeline described by a config (or manifest) file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list with a single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's method (curly, cfm, otcfm).
        #[arg(long)]
        method: Option<String>,
        /// Skip stage one, loading this interpolant checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Run one full pipeline per value of an ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: sigma, beta-noise, coupling, n-times.
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        out: OutArg,
    },
    /// Render a trajectory CSV (and optionally a field) to SVG.
    Plot {
        #[arg(long)]
        trajectory: PathBuf,
        /// Inline field spec JSON, e.g. {"kind":"rotational","omega":3.14}
        #[arg(long)]
        field: Option<String>,
        /// Quiver bounds as lo,hi
        #[arg(long, default_value = "-2,2")]
        bounds: String,
        /// Quiver lattice size
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Integrate a saved drift checkpoint from a snapshot CSV.
    Simulate {
        /// Drift checkpoint (a sibling `.score` file is loaded when σ > 0).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Starting particles.
        #[arg(long)]
        start: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        /// Integration span as t0,t1
        #[arg(long, default_value = "0,1")]
        span: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the raw v + s drift composition instead of v + (σ²/2)s.
        #[arg(long)]
        raw_score_sum: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a trajectory CSV against a truth snapshot (and optionally a
    /// reference field, re-evaluating a drift checkpoint along the states).
    Evaluate {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> driftbridge::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            method,
            checkpoint,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seeds = vec![seed];
            }
            if let Some(method) = method {
                cfg.method = method;
            }
            if let Some(checkpoint) = checkpoint {
                cfg.interp_checkpoint = Some(checkpoint);
            }
            cfg.validate()?;
            let RunOutput {
                manifest_path,
                metrics_csv_path,
                ..
            } = experiment::run(&cfg, &out.resolve())?;
            println!("metrics: {}", metrics_csv_path.display());
            println!("manifest: {}", manifest_path.display());
            Ok(())
        }
        Command::Ablate { config, axis, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let axis: AblationAxis = axis.parse()?;
            let summary = experiment::ablate(&cfg, axis, &out.resolve())?;
            println!("summary: {}", summary.display());
            Ok(())
        }
        Command::Plot {
            trajectory,
            field,
            bounds,
            grid,
            out,
        } => {
            let out_dir = out.resolve();
            std::fs::create_dir_all(&out_dir)?;
            let text = std::fs::read_to_string(&trajectory)?;
            let traj = parse_trajectory_csv(&text)?;
            if traj.dim() < 2 {
                return Err(driftbridge::Error::config(
                    "trajectory",
                    "plotting needs at least two coordinates",
                ));
            }
            let svg = experiment::trajectory_svg(&traj, 200);
            let traj_svg = out_dir.join("trajectory.svg");
            std::fs::write(&traj_svg, svg)?;
            println!("wrote {}", traj_svg.display());
            if let Some(spec_text) = field {
                let spec: FieldSpec = serde_json::from_str(&spec_text)
                    .map_err(|e| driftbridge::Error::config("field", e.to_string()))?;
                let (lo, hi) = parse_pair(&bounds, "bounds")?;
                let svg = experiment::field_quiver_svg(&spec.build()?, lo, hi, grid);
                let field_svg = out_dir.join("field.svg");
                std::fs::write(&field_svg, svg)?;
                println!("wrote {}", field_svg.display());
            }
            Ok(())
        }
        Command::Simulate {
            checkpoint,
            start,
            sigma,
            steps,
            span,
            seed,
            raw_score_sum,
            out,
        } => {
            let out_dir = out.resolve();
            std::fs::create_dir_all(&out_dir)?;
            let (t0, t1) = parse_pair(&span, "span")?;
            let model = BridgeModel::load(&checkpoint, sigma, vec![t0, t1])?;
            let snapshot = ingest_csv(&start)?;
            let composition = if raw_score_sum {
                ScoreComposition::RawSum
            } else {
                ScoreComposition::Scaled
            };
            let traj = if sigma > 0.0 {
                integrate_sde(&model, snapshot.positions(), steps, (t0, t1), composition, seed)?
            } else {
                integrate_ode(&model, snapshot.positions(), steps, (t0, t1))?
            };
            let csv_path = out_dir.join("trajectory.csv");
            std::fs::write(&csv_path, traj.to_csv())?;
            if traj.dim() >= 2 {
                std::fs::write(
                    out_dir.join("trajectory.svg"),
                    experiment::trajectory_svg(&traj, 200),
                )?;
            }
            println!("wrote {}", csv_path.display());
            Ok(())
        }
        Command::Evaluate {
            trajectory,
            truth,
            field,
            checkpoint,
            seed,
            out,
        } => {
            let out_dir = out.resolve();
            std::fs::create_dir_all(&out_dir)?;
            let mut traj = parse_trajectory_csv(&std::fs::read_to_string(&trajectory)?)?;
            let truth_snap = ingest_csv(&truth)?;
            let mut csv = String::from("metric,value\n");
            let final_state = traj.terminal().clone();
            csv.push_str(&format!(
                "w2,{}\n",
                wasserstein2(&final_state, truth_snap.positions(), seed)?
            ));
            csv.push_str(&format!(
                "emd,{}\n",
                emd(&final_state, truth_snap.positions(), seed)?
            ));
            if final_state.rows() >= 2 && truth_snap.len() >= 2 {
                csv.push_str(&format!(
                    "mmd,{}\n",
                    mmd(&final_state, truth_snap.positions(), Bandwidth::Median)?
                ));
            }
            if let (Some(spec_text), Some(ckpt)) = (&field, &checkpoint) {
                let spec: FieldSpec = serde_json::from_str(spec_text)
                    .map_err(|e| driftbridge::Error::config("field", e.to_string()))?;
                let reference = spec.build()?;
                let t0 = *traj.times.first().unwrap();
                let t1 = *traj.times.last().unwrap();
                let model = BridgeModel::load(ckpt, 0.0, vec![t0, t1])?;
                reeval_velocities(&model, &mut traj)?;
                let cos = cosine_distance_along(&traj, &reference)?;
                csv.push_str(&format!("cos_dist,{}\n", cos.value));
                csv.push_str(&format!(
                    "l2_cost,{}\n",
                    l2_cost_along(&traj, &reference, L2Mode::Squared)?
                ));
            }
            let path = out_dir.join("evaluation.csv");
            std::fs::write(&path, csv)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn parse_pair(text: &str, field: &str) -> driftbridge::Result<(f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(driftbridge::Error::config(
            field,
            format!("expected `lo,hi`, got `{text}`"),
        ));
    }
    let lo: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| driftbridge::Error::config(field, format!("invalid float `{}`", parts[0])))?;
    let hi: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| driftbridge::Error::config(field, format!("invalid float `{}`", parts[1])))?;
    if lo >= hi {
        return Err(driftbridge::Error::config(field, "lo must be below hi"));
    }
    Ok((lo, hi))
}
