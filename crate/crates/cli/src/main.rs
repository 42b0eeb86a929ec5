mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{extract_overrides, RunConfig};
use uniam::cam::{predict, read_scores_csv, write_scores_csv, DecisionDirection, ScoreRow};
use uniam::data::{self, ScenarioSpec};
use uniam::eval::{
    beta_sweep, evaluate, histogram, inclusive_range, scenario_sweep, write_histogram_csv, write_sweep_csv, SweepAxis,
};
use uniam::model::Model;
use uniam::separation::write_cluster_report;
use uniam::trainer::{fit, read_json, refresh_snapshot, source_scores, TrainConfig, TrainData};
use uniam::Error;

#[derive(Parser, Debug)]
#[command(name = "uniam", version, about = "Universal attention matching experiments")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// Run configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, env = "CAM_UNIDA_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, env = "CAM_UNIDA_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        /// Dataset directory; falls back to `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        run: TrainArgs,
        /// Run directory; falls back to `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score target samples with a trained run.
    Score {
        #[arg(long)]
        data: PathBuf,
        /// Run directory written by `train`.
        #[arg(long, alias = "model")]
        run: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the target cluster report.
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Evaluate a score file against the dataset's ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep a threshold (reusing a run) or a scenario axis (retraining).
    Sweep {
        #[arg(long)]
        axis: String,
        /// `lo:hi:step`, inclusive.
        #[arg(long)]
        range: String,
        /// Dataset, for threshold axes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory, for threshold axes.
        #[arg(long, alias = "model")]
        run: Option<PathBuf>,
        /// Scenario spec, for retraining axes.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of commonness scores split by ground truth.
    Hist {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(path: &Path) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

fn parse_direction(s: &str) -> std::result::Result<DecisionDirection, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| usage(format!("unknown direction `{s}` (use high_is_common or literal)")))
}

fn load_run_config(args: &TrainArgs, overrides: &[(String, String)]) -> std::result::Result<RunConfig, Failure> {
    if let Some(path) = &args.config {
        require_file(path)?;
    }
    let mut cfg = RunConfig::resolve(args.config.as_deref(), overrides).map_err(usage)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> std::result::Result<data::Dataset, Failure> {
    require_file(&dir.join("manifest.json"))?;
    Ok(data::load(dir)?)
}

fn load_run(run: &Path) -> std::result::Result<(Model, TrainConfig), Failure> {
    require_file(&run.join("model.json"))?;
    let model: Model = read_json(&run.join("model.json"))?;
    let cfg: TrainConfig = read_json(&run.join("config.json"))?;
    Ok((model, cfg))
}

fn score_rows(model: &Model, tdata: &TrainData, cfg: &TrainConfig) -> std::result::Result<Vec<ScoreRow>, Failure> {
    let (scores, _, _) = source_scores(model, tdata, cfg)?;
    Ok(tdata
        .target_ids
        .iter()
        .zip(&scores.commonness)
        .map(|(id, s)| ScoreRow {
            id: id.clone(),
            scores: *s,
            decision: predict(s, cfg.beta, cfg.decision_direction, cfg.lambda),
        })
        .collect())
}

fn parse_range(s: &str) -> std::result::Result<Vec<f64>, Failure> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("range `{s}` must be lo:hi:step")))?;
    if nums.len() != 3 {
        return Err(usage(format!("range `{s}` must be lo:hi:step")));
    }
    inclusive_range(nums[0], nums[1], nums[2]).map_err(|e| usage(e.to_string()))
}

fn target_truth(ds: &data::Dataset) -> std::collections::HashMap<String, i64> {
    ds.target().map(|s| (s.id.clone(), s.ground_truth)).collect()
}

fn run(cli: Cli, overrides: &[(String, String)]) -> CmdResult {
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. } | Command::Sweep { .. }) {
        return Err(usage("configuration overrides apply only to train and sweep"));
    }
    match cli.command {
        Command::Gen { spec, seed, out } => {
            require_file(&spec)?;
            let text = fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
            let mut s: ScenarioSpec = serde_json::from_str(&text).map_err(|e| Error::Data {
                path: spec.clone(),
                line: e.line() as u64,
                message: e.to_string(),
            })?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let ds = data::generate(&s)?;
            data::save(&ds, &out)?;
            let m = &ds.manifest;
            println!(
                "wrote {}: {} source / {} target samples, {} common, {} source-private, {} target-private classes",
                out.display(),
                m.num_source,
                m.num_target,
                m.common_classes.len(),
                m.source_private_classes.len(),
                m.target_private_classes.len()
            );
        }
        Command::Train { data, run, out, resume } => {
            let rc = load_run_config(&run, overrides)?;
            let data = data.or(rc.data).ok_or_else(|| usage("train needs --data"))?;
            let out = out.or(rc.out).ok_or_else(|| usage("train needs --out"))?;
            let cfg = rc.train;
            let ds = load_data(&data)?;
            let tdata = TrainData::from_dataset(&ds)?;
            let result = fit(&tdata, &cfg, Some(&out), resume)?;
            if let Some(last) = result.history.last() {
                println!(
                    "trained {} epochs: L_cls {:.4} L_adv {:.4} L_src {:.4} L_tgt {:.4}",
                    result.history.len(),
                    last.losses.cls,
                    last.losses.adv,
                    last.losses.src,
                    last.losses.tgt
                );
            }
        }
        Command::Score {
            data,
            run,
            beta,
            direction,
            out,
            clusters,
        } => {
            let (model, mut cfg) = load_run(&run)?;
            if let Some(b) = beta {
                cfg.beta = b;
            }
            if let Some(d) = direction {
                cfg.decision_direction = parse_direction(&d)?;
            }
            let ds = load_data(&data)?;
            let tdata = TrainData::from_dataset(&ds)?;
            let rows = score_rows(&model, &tdata, &cfg)?;
            write_scores_csv(&out, &rows)?;
            if let Some(path) = clusters {
                let snap = refresh_snapshot(&model, &tdata, &cfg, cfg.epochs as u64)?;
                write_cluster_report(&path, &tdata.target_ids, &snap.target_views, &snap.correspondence)?;
            }
            let unknown = rows.iter().filter(|r| r.decision == uniam::cam::Decision::Unknown).count();
            println!("scored {} target samples, {} marked unknown", rows.len(), unknown);
        }
        Command::Eval { data, scores, out } => {
            require_file(&scores)?;
            let ds = load_data(&data)?;
            let rows = read_scores_csv(&scores)?;
            let truth = target_truth(&ds);
            let gt = rows
                .iter()
                .map(|r| {
                    truth.get(&r.id).copied().ok_or_else(|| {
                        Failure::Core(Error::Format {
                            path: scores.clone(),
                            message: format!("sample {} is not a target sample of the dataset", r.id),
                        })
                    })
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let decisions: Vec<_> = rows.iter().map(|r| r.decision).collect();
            let w_t: Vec<f64> = rows.iter().map(|r| r.scores.w_t).collect();
            let report = evaluate(&decisions, &gt, &ds.manifest.common_classes, Some(&w_t))?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            fs::write(&out, json).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            println!(
                "H-score {:.4} (common {:.4}, unknown {:.4})",
                report.h_score, report.common_accuracy, report.unknown_accuracy
            );
        }
        Command::Sweep {
            axis,
            range,
            data,
            run,
            spec,
            train,
            out,
        } => {
            let axis: SweepAxis = axis.parse().map_err(usage)?;
            let grid = parse_range(&range)?;
            let points = if axis.is_threshold() {
                let (Some(data), Some(run)) = (data, run) else {
                    return Err(usage("threshold sweeps need --data and --run"));
                };
                let (model, cfg) = load_run(&run)?;
                let ds = load_data(&data)?;
                let tdata = TrainData::from_dataset(&ds)?;
                let (scores, _, _) = source_scores(&model, &tdata, &cfg)?;
                let truth = target_truth(&ds);
                let gt: Vec<i64> = tdata.target_ids.iter().map(|id| truth[id]).collect();
                beta_sweep(
                    &scores.commonness,
                    &gt,
                    &ds.manifest.common_classes,
                    cfg.decision_direction,
                    cfg.lambda,
                    &grid,
                )?
            } else {
                let Some(spec) = spec else {
                    return Err(usage("scenario sweeps need --spec"));
                };
                require_file(&spec)?;
                let text = fs::read_to_string(&spec).map_err(|e| Error::Io { path: spec.clone(), source: e })?;
                let s: ScenarioSpec = serde_json::from_str(&text).map_err(|e| Error::Data {
                    path: spec.clone(),
                    line: e.line() as u64,
                    message: e.to_string(),
                })?;
                let cfg = load_run_config(&train, overrides)?.train;
                scenario_sweep(axis, &grid, &s, &cfg)?
            };
            write_sweep_csv(&out, axis, &points)?;
            println!("wrote {} grid rows to {}", points.len(), out.display());
        }
        Command::Hist { scores, data, bins, out } => {
            require_file(&scores)?;
            let ds = load_data(&data)?;
            let rows = read_scores_csv(&scores)?;
            let truth = target_truth(&ds);
            let common: std::collections::HashSet<i64> =
                ds.manifest.common_classes.iter().map(|&c| c as i64).collect();
            let is_common = |id: &str| truth.get(id).map(|t| common.contains(t));
            let h = histogram(&rows, &is_common, bins)?;
            write_histogram_csv(&out, &h)?;
            println!("wrote {} bins per score to {}", bins, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = match extract_overrides(std::env::args().collect()) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `uniam --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            let code = if e.is_data_error() {
                2
            } else if e.is_numeric() {
                3
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
