//! `defslam`: command-line front end for the deformable-SLAM laboratory.
//!
//! Subcommands cover the full pipeline: `simulate` emits a seeded dataset,
//! `solve` estimates a trajectory from one, `observability` prints rank
//! reports for the built-in analysis instances, and `montecarlo` runs a
//! batch and writes the per-run CSV plus a summary table.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 solver failure,
//! 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use defslam_core::montecarlo::{backproject, rows_to_csv, run_batch, summarize, ExperimentConfig};
use defslam_core::observability::{fim, rank_analysis, toy_fim};
use defslam_core::simulator::{simulate, DatasetSchema, SimConfig};
use defslam_core::ts_slam::{
    ed_vo_solve, rigid_slam_solve, solve, PoseSchema, SolutionSchema, SolverConfig,
};
use defslam_core::{fixtures, CoreError};

#[derive(Parser)]
#[command(name = "defslam", version, about = "Deformable SLAM laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset and print it as JSON.
    Simulate {
        /// RNG seed; a (config, seed) pair fully determines the dataset.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scene configuration JSON file (defaults apply to missing fields).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the dataset here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate a trajectory from a stored dataset.
    Solve {
        /// Dataset JSON produced by `simulate`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Deformable)]
        method: MethodArg,
        /// Solver configuration JSON file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the solution here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank/nullity report for a built-in observability instance.
    Observability {
        #[arg(long, value_enum)]
        builtin: Builtin,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a Monte Carlo batch; prints a summary table as JSON.
    Montecarlo {
        /// Experiment configuration JSON file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Measure solve times (makes the CSV non-deterministic).
        #[arg(long)]
        record_runtime: bool,
        /// Write the per-run CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Deformable,
    Rigid,
    EdVo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    /// Two-pose toy problem with a moving landmark (fully observable).
    ToyMoving,
    /// Same toy problem with a static landmark (one-dimensional null space).
    ToyStatic,
    /// Consistent embedded-deformation energy instance.
    Ed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &CoreError) -> u8 {
    match err {
        CoreError::InvalidConfig(_) | CoreError::Schema(_) | CoreError::Json(_) => 2,
        CoreError::Io(_) => 4,
        _ => 3,
    }
}

fn read_text(path: &Path) -> Result<String, CoreError> {
    fs::read_to_string(path).map_err(CoreError::Io)
}

/// Loads a serde-default config from an optional JSON file.
fn load_config<T: Default + serde::de::DeserializeOwned>(
    path: Option<&Path>,
) -> Result<T, CoreError> {
    match path {
        Some(p) => Ok(serde_json::from_str(&read_text(p)?)?),
        None => Ok(T::default()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CoreError> {
    match out {
        Some(p) => fs::write(p, text).map_err(CoreError::Io),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Simulate { seed, config, out } => {
            let config: SimConfig = load_config(config.as_deref())?;
            let dataset = simulate(&config, seed)?;
            let text = serde_json::to_string_pretty(&dataset.to_schema())?;
            emit(out.as_deref(), &text)
        }
        Command::Solve {
            input,
            method,
            config,
            out,
        } => {
            let schema: DatasetSchema = serde_json::from_str(&read_text(&input)?)?;
            if schema.schema_version != 1 {
                return Err(CoreError::Schema(format!(
                    "unsupported dataset schema version {}",
                    schema.schema_version
                )));
            }
            let obs = schema.observation_set();
            let config: SolverConfig = load_config(config.as_deref())?;
            let solution = match method {
                MethodArg::Deformable => {
                    let (state, report) = solve(&obs, &config)?;
                    SolutionSchema::from_state(&state, &report)
                }
                MethodArg::Rigid => {
                    let (state, report) = rigid_slam_solve(&obs, &config)?;
                    SolutionSchema::from_state(&state, &report)
                }
                MethodArg::EdVo => {
                    let (poses, _) = ed_vo_solve(&obs, &Default::default())?;
                    let rotations: Vec<_> = poses.iter().map(|(r, _)| *r).collect();
                    let positions: Vec<_> = poses.iter().map(|(_, p)| *p).collect();
                    let shapes = backproject(&obs, &rotations, &positions);
                    SolutionSchema {
                        schema_version: 1,
                        poses: poses
                            .iter()
                            .map(|(r, p)| {
                                let m = r.matrix();
                                PoseSchema {
                                    r: [
                                        m[(0, 0)],
                                        m[(0, 1)],
                                        m[(0, 2)],
                                        m[(1, 0)],
                                        m[(1, 1)],
                                        m[(1, 2)],
                                        m[(2, 0)],
                                        m[(2, 1)],
                                        m[(2, 2)],
                                    ],
                                    p: (*p).into(),
                                }
                            })
                            .collect(),
                        shapes: (0..obs.n_features())
                            .map(|i| {
                                (0..obs.n_steps())
                                    .map(|j| shapes.feature(i, j).into())
                                    .collect()
                            })
                            .collect(),
                        coefficients: Vec::new(),
                        energy_trace: Vec::new(),
                    }
                }
            };
            let text = serde_json::to_string_pretty(&solution)?;
            emit(out.as_deref(), &text)
        }
        Command::Observability { builtin, seed } => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let report = match builtin {
                Builtin::ToyMoving => toy_fim(&fixtures::toy_instance_moving(&mut rng), 1e-8)?,
                Builtin::ToyStatic => toy_fim(&fixtures::toy_instance_static(&mut rng), 1e-8)?,
                Builtin::Ed => {
                    let instance = fixtures::consistent_ed_energy_instance(&mut rng, 5, 8);
                    rank_analysis(&fim(&instance.jacobian()?), 1e-10)
                }
            };
            println!("{}", serde_json::to_string_pretty(&report.summary_json())?);
            Ok(())
        }
        Command::Montecarlo {
            config,
            runs,
            seed,
            record_runtime,
            out,
        } => {
            let mut config: ExperimentConfig = load_config(config.as_deref())?;
            if let Some(runs) = runs {
                config.runs = runs;
            }
            if let Some(seed) = seed {
                config.base_seed = seed;
            }
            if record_runtime {
                config.record_runtime = true;
            }
            let rows = run_batch(&config)?;
            let csv = rows_to_csv(&rows);
            match out.as_deref() {
                Some(p) => fs::write(p, &csv).map_err(CoreError::Io)?,
                None => print!("{csv}"),
            }
            let summary = summarize(&rows);
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}
