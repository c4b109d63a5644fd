//! Command-line surface: `gen`, `train`, `eval`, `match` and `ablate`.
//!
//! Every command writes into an output directory (by default under
//! `$CPOINT_OUT`, else `./runs`) together with a `manifest.json` that
//! records the exact configuration it ran with.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::assign::{build_cost_matrix, hungarian_match};
use crate::consist::PAConfig;
use crate::error::{Error, Result};
use crate::metric::{CountingReport, LocalizationReport};
use crate::net::{forward, ModelParams, PARAMS_FORMAT_VERSION};
use crate::synth::{generate_dataset, Dataset, SynthConfig, DATASET_FORMAT_VERSION};
use crate::trainer::{evaluate, load_checkpoint, run, run_from, save_checkpoint, RunReport, TrainConfig, STATE_FORMAT_VERSION};

pub const OUT_ENV: &str = "CPOINT_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Contract(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => EXIT_IO,
        Error::NonFinite(_) => EXIT_NUMERICAL,
        Error::Shape(_) => EXIT_INTERNAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpoint", version, about = "Semi-supervised point localization on synthetic crowds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a student/teacher pair.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a trainer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a parameter checkpoint on the holdout split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "sigma", default_values_t = vec![4.0, 8.0])]
        sigmas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the ground-truth matching of one scene as JSON.
    Match {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long, default_value_t = 0.05)]
        score_weight: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the number of auxiliary points or the unlabeled loss weight.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run sweep points on separate threads.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Supervised only (unlabeled loss weight 0).
    #[arg(long)]
    pub labeled_only: bool,
    /// Disable position aggregation (K = 0).
    #[arg(long)]
    pub no_pa: bool,
    /// Disable uncertainty calibration (all weights 1).
    #[arg(long)]
    pub no_iuc: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub k_aux: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    #[value(name = "k_aux", alias = "k-aux")]
    KAux,
    #[value(name = "lambda")]
    Lambda,
}

impl Axis {
    pub fn values(self) -> &'static [f64] {
        match self {
            Axis::KAux => &[0.0, 4.0, 16.0],
            Axis::Lambda => &[0.01, 0.05, 0.1, 0.5, 1.0],
        }
    }

    fn apply(self, cfg: &mut TrainConfig, value: f64) {
        match self {
            Axis::KAux => cfg.pa = PAConfig { k_aux: value as usize },
            Axis::Lambda => cfg.lambda = value,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormatVersions {
    pub dataset: u32,
    pub params: u32,
    pub trainer_state: u32,
}

impl Default for FormatVersions {
    fn default() -> Self {
        Self {
            dataset: DATASET_FORMAT_VERSION,
            params: PARAMS_FORMAT_VERSION,
            trainer_state: STATE_FORMAT_VERSION,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub command_line: Vec<String>,
    /// Effective configuration after flags were applied.
    pub config: serde_json::Value,
    pub config_file: Option<PathBuf>,
    pub config_file_contents: Option<serde_json::Value>,
    pub inputs: Vec<PathBuf>,
    pub format_versions: FormatVersions,
    pub seed: Option<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub artifacts: Vec<PathBuf>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    fn new(command: &str, config: &impl Serialize, config_file: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let config_file_contents = match config_file {
            Some(p) => Some(serde_json::from_slice(&read(p)?)?),
            None => None,
        };
        Ok(Self {
            manifest: RunManifest {
                command: command.to_owned(),
                command_line: std::env::args().collect(),
                config: serde_json::to_value(config)?,
                config_file: config_file.map(Path::to_path_buf),
                config_file_contents,
                inputs: Vec::new(),
                format_versions: FormatVersions::default(),
                seed,
                started_unix: unix_now(),
                finished_unix: 0.0,
                artifacts: Vec::new(),
            },
        })
    }

    fn input(mut self, p: &Path) -> Self {
        self.manifest.inputs.push(p.to_path_buf());
        self
    }

    fn finish(mut self, out: &Path, artifacts: Vec<PathBuf>) -> Result<RunManifest> {
        self.manifest.finished_unix = unix_now();
        self.manifest.artifacts = artifacts;
        write_json(&out.join("manifest.json"), &self.manifest)?;
        Ok(self.manifest)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn default_out(command: &str) -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(command)
}

/// Parses a JSON config, reporting the offending field on failure.
fn load_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = read(p)?;
            serde_json::from_slice(&bytes).map_err(|e| Error::Config {
                field: "config",
                reason: format!("{}: {e}", p.display()),
            })
        }
    }
}

pub fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<Dataset> {
    let mut cfg: SynthConfig = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let manifest = ManifestBuilder::new("gen", &cfg, config, Some(cfg.seed))?;
    let ds = generate_dataset(&cfg)?;
    ds.save_dir(out)?;
    let artifacts = crate::synth::SPLIT_FILES
        .iter()
        .flat_map(|f| {
            let p = out.join(f);
            [crate::synth::index_path(&p), p]
        })
        .collect();
    manifest.finish(out, artifacts)?;
    Ok(ds)
}

/// Merges file config and flags; flags win.
pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.k_aux {
        cfg.pa.k_aux = v;
    }
    if args.labeled_only {
        cfg.lambda = 0.0;
    }
    if args.no_pa {
        cfg.pa.k_aux = 0;
    }
    if args.no_iuc {
        cfg.use_iuc = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub struct TrainOutput {
    pub report: RunReport,
    pub manifest: RunManifest,
}

fn train_into(
    cfg: &TrainConfig,
    args: &TrainArgs,
    dataset: &Dataset,
    out: &Path,
    resume: Option<&Path>,
    command: &str,
) -> Result<TrainOutput> {
    ensure_dir(out)?;
    let mut manifest = ManifestBuilder::new(command, cfg, args.config.as_deref(), Some(cfg.seed))?.input(&args.dataset);
    let outcome = match resume {
        Some(p) => {
            manifest = manifest.input(p);
            run_from(load_checkpoint(p)?, dataset, cfg, cfg.steps as u64)?
        }
        None => run(dataset, cfg)?,
    };
    let report_path = out.join("report.json");
    write_json(&report_path, &outcome.report)?;
    let student = out.join("student.cpnp");
    let teacher = out.join("teacher.cpnp");
    let state = out.join("state.cpts");
    outcome.state.student.save(&student)?;
    outcome.state.teacher.save(&teacher)?;
    save_checkpoint(&outcome.state, &state)?;
    let manifest = manifest.finish(out, vec![report_path, student, teacher, state])?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    Ok(TrainOutput {
        report: outcome.report,
        manifest,
    })
}

pub fn cmd_train(args: &TrainArgs, out: &Path, resume: Option<&Path>) -> Result<TrainOutput> {
    let cfg = train_config(args)?;
    let dataset = Dataset::load_dir(&args.dataset)?;
    train_into(&cfg, args, &dataset, out, resume, "train")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTables {
    pub checkpoint: PathBuf,
    pub localization: Vec<LocalizationReport>,
    pub counting: CountingReport,
}

impl EvalTables {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,sigma,tp,fp,fn,precision,recall,f1,mae,mse,n_images\n");
        for r in &self.localization {
            let _ = writeln!(
                s,
                "localization,{},{},{},{},{},{},{},,,",
                r.threshold, r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
            );
        }
        let c = &self.counting;
        let _ = writeln!(s, "counting,,,,,,,,{},{},{}", c.mae, c.mse, c.n_images);
        s
    }
}

pub fn cmd_eval(checkpoint: &Path, dataset_dir: &Path, sigmas: &[f64], out: &Path) -> Result<EvalTables> {
    let params = ModelParams::load(checkpoint)?;
    let dataset = Dataset::load_dir(dataset_dir)?;
    if dataset.holdout.is_empty() {
        return Err(Error::Contract("dataset has no holdout scenes".into()));
    }
    let manifest = ManifestBuilder::new("eval", &serde_json::json!({ "sigmas": sigmas }), None, None)?
        .input(checkpoint)
        .input(dataset_dir);
    let eval = evaluate(&params, &dataset.holdout, sigmas)?;
    let tables = EvalTables {
        checkpoint: checkpoint.to_path_buf(),
        localization: eval.localization,
        counting: eval.counting,
    };
    ensure_dir(out)?;
    let json = out.join("eval.json");
    let csv = out.join("eval.csv");
    write_json(&json, &tables)?;
    fs::write(&csv, tables.to_csv()).map_err(|e| Error::io(&csv, e))?;
    manifest.finish(out, vec![json, csv])?;
    Ok(tables)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchDump {
    pub scene_id: String,
    pub score_weight: f64,
    pub total_cost: f64,
    pub pairs: Vec<MatchPair>,
    pub negative_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchPair {
    pub target: usize,
    pub proposal: usize,
    pub target_xy: [f64; 2],
    pub proposal_xy: [f64; 2],
    pub score: f64,
    pub cost: f64,
}

pub fn cmd_match(checkpoint: &Path, dataset_dir: &Path, scene_id: &str, score_weight: f64) -> Result<MatchDump> {
    let params = ModelParams::load(checkpoint)?;
    let dataset = Dataset::load_dir(dataset_dir)?;
    let scene = dataset
        .labeled
        .iter()
        .chain(&dataset.unlabeled)
        .chain(&dataset.holdout)
        .find(|s| s.scene_id == scene_id)
        .ok_or_else(|| Error::Contract(format!("no scene named {scene_id}")))?;
    let gt = scene
        .gt_points
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("scene {scene_id} has no points")))?;
    let (props, _) = forward(&params, &scene.field)?;
    let cost = build_cost_matrix(gt, &props, score_weight)?;
    let m = hungarian_match(&cost);
    let pairs = m
        .assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let t = gt.points[i];
            let p = props.proposals[j];
            MatchPair {
                target: i,
                proposal: j,
                target_xy: [t.x, t.y],
                proposal_xy: [p.position.x, p.position.y],
                score: p.score,
                cost: cost.get(i, j),
            }
        })
        .collect();
    Ok(MatchDump {
        scene_id: scene_id.to_owned(),
        score_weight,
        total_cost: m.total_cost,
        pairs,
        negative_count: m.negative_set.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub f1_4: Option<f64>,
    pub f1_8: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: Axis,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("value,MAE,MSE,F1@4,F1@8,seed,status\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.value,
                opt(r.mae),
                opt(r.mse),
                opt(r.f1_4),
                opt(r.f1_8),
                r.seed,
                r.status.replace(',', ";")
            );
        }
        s
    }
}

fn sweep_row(value: f64, seed: u64, result: Result<TrainOutput>) -> SweepRow {
    match result {
        Ok(o) => {
            let last = o.report.final_eval();
            let student = last.map(|e| &e.student);
            SweepRow {
                value,
                seed,
                mae: student.map(|s| s.counting.mae),
                mse: student.map(|s| s.counting.mse),
                f1_4: student.and_then(|s| s.f1_at(4.0)),
                f1_8: student.and_then(|s| s.f1_at(8.0)),
                status: "ok".into(),
            }
        }
        Err(e) => SweepRow {
            value,
            seed,
            mae: None,
            mse: None,
            f1_4: None,
            f1_8: None,
            status: format!("failed: {e}"),
        },
    }
}

/// One full run per axis value with a shared seed; individual failures are
/// recorded in the table and do not stop the sweep.
pub fn cmd_ablate(args: &TrainArgs, axis: Axis, out: &Path, parallel: bool) -> Result<SweepTable> {
    let mut base = train_config(args)?;
    for &s in &[4.0, 8.0] {
        if !base.eval_sigmas.contains(&s) {
            base.eval_sigmas.push(s);
        }
    }
    let dataset = Dataset::load_dir(&args.dataset)?;
    ensure_dir(out)?;
    let manifest = ManifestBuilder::new(
        "ablate",
        &serde_json::json!({ "axis": axis, "base": base }),
        args.config.as_deref(),
        Some(base.seed),
    )?
    .input(&args.dataset);
    let point = |value: f64| {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value);
        let dir = out.join(format!(
            "{}-{value}",
            match axis {
                Axis::KAux => "k_aux",
                Axis::Lambda => "lambda",
            }
        ));
        let result = cfg
            .validate()
            .and_then(|_| train_into(&cfg, args, &dataset, &dir, None, "ablate-point"));
        sweep_row(value, cfg.seed, result)
    };
    let rows: Vec<SweepRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = axis.values().iter().map(|&v| scope.spawn(move || point(v))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
        })
    } else {
        axis.values().iter().map(|&v| point(v)).collect()
    };
    let table = SweepTable {
        axis,
        seed: base.seed,
        rows,
    };
    let json = out.join("sweep.json");
    let csv = out.join("sweep.csv");
    write_json(&json, &table)?;
    fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    manifest.finish(out, vec![json, csv])?;
    Ok(table)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let out = out.unwrap_or_else(|| default_out("gen"));
            let ds = cmd_gen(config.as_deref(), &out, seed)?;
            println!(
                "wrote {} labeled, {} unlabeled, {} holdout scenes to {}",
                ds.labeled.len(),
                ds.unlabeled.len(),
                ds.holdout.len(),
                out.display()
            );
        }
        Command::Train { common, out, resume } => {
            let out = out.unwrap_or_else(|| default_out("train"));
            let o = cmd_train(&common, &out, resume.as_deref())?;
            if let Some(e) = o.report.final_eval() {
                println!(
                    "step {}: holdout MAE {:.3} MSE {:.3} F1@4 {:.3} F1@8 {:.3}",
                    e.step,
                    e.student.counting.mae,
                    e.student.counting.mse,
                    e.student.f1_at(4.0).unwrap_or(f64::NAN),
                    e.student.f1_at(8.0).unwrap_or(f64::NAN)
                );
            }
            println!("outputs in {}", out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            sigmas,
            out,
        } => {
            let out = out.unwrap_or_else(|| default_out("eval"));
            let t = cmd_eval(&checkpoint, &dataset, &sigmas, &out)?;
            print!("{}", t.to_csv());
        }
        Command::Match {
            checkpoint,
            dataset,
            scene,
            score_weight,
            out,
        } => {
            let dump = cmd_match(&checkpoint, &dataset, &scene, score_weight)?;
            match out {
                Some(p) => write_json(&p, &dump)?,
                None => println!("{}", serde_json::to_string_pretty(&dump)?),
            }
        }
        Command::Ablate {
            common,
            axis,
            out,
            parallel,
        } => {
            let out = out.unwrap_or_else(|| default_out("ablate"));
            let t = cmd_ablate(&common, axis, &out, parallel)?;
            print!("{}", t.to_csv());
        }
    }
    Ok(())
}

/// Entry point for the binary; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
