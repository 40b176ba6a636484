//! `nclr` command-line interface.
//!
//! stdout carries `key=value` lines only; progress and prose go to stderr.
//! Exit codes: 0 success, 1 usage or I/O error, 2 failed check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nclr::autodiff::Fault;
use nclr::config::RunConfig;
use nclr::eval::{evaluate, write_report, Ablation, EvalReport};
use nclr::gradcheck::{first_failure, run_gradcheck};
use nclr::model::init_model;
use nclr::params::ParamStore;
use nclr::scene::{generate_dataset, load_dataset, write_dataset};
use nclr::training::{train, TrainConfig};
use nclr::Error;

const PARAMS_FILE: &str = "params.nclp";
const METRICS_FILE: &str = "metrics.jsonl";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "nclr", version, about = "Neural LiDAR-camera calibration on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write its parameters and metrics log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda_f: Option<f64>,
        #[arg(long)]
        lambda_o: Option<f64>,
        #[arg(long)]
        lambda_p: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        /// Not supported; always an error.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a parameter file on a dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// cosine-hard, cosine-soft, learnable-hard, learnable-soft or all.
        #[arg(long)]
        ablation: Option<String>,
        /// Gaussian noise (px) on matched targets before PnP.
        #[arg(long)]
        noise: Option<f64>,
        /// Also write SVG recall curves.
        #[arg(long)]
        svg: bool,
    },
    /// Compare tape gradients with central differences, stage by stage.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Gen {
            config,
            out,
            count,
            seed,
        } => cmd_gen(config, out, count, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            lambda_f,
            lambda_o,
            lambda_p,
            max_steps,
            resume,
        } => {
            let over = TrainOverrides {
                seed,
                lambda_f,
                lambda_o,
                lambda_p,
                max_steps,
            };
            if resume.is_some() {
                Err(Failure::Usage(
                    "--resume is not supported: training always starts from a fresh seeded model"
                        .into(),
                ))
            } else {
                cmd_train(config, data, out, over)
            }
        }
        Command::Eval {
            config,
            params,
            data,
            out,
            ablation,
            noise,
            svg,
        } => cmd_eval(config, params, data, out, ablation, noise, svg),
        Command::Gradcheck {
            config,
            seed,
            inject_fault,
        } => cmd_gradcheck(config, seed, inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Sizes the worker pool from `NCLR_THREADS` when set.
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("NCLR_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("NCLR_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load_config(path: Option<PathBuf>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::load(&p)?),
        None => Ok(RunConfig::default()),
    }
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Failure::Usage(format!("--{name} is required (or set it in the config)")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Run(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Run(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn cmd_gen(config: Option<PathBuf>, out: Option<PathBuf>, count: usize, seed: u64) -> CmdResult {
    let cfg = load_config(config)?;
    let out = pick(out, &cfg.out_dir, "out")?;
    if count == 0 {
        return Err(Failure::Usage("--count must be positive".into()));
    }
    eprintln!("generating {count} scenes into {}", out.display());
    let scenes = generate_dataset(&cfg.scene, count, seed)?;
    let manifest = write_dataset(&out, &scenes, &cfg.scene, seed)?;
    for (i, e) in manifest.samples.iter().enumerate() {
        println!(
            "scene={i} file={} points={} pixels={} overlap_points={} overlap_pixels={}",
            e.file,
            e.n_points,
            e.grid_height * e.grid_width,
            e.overlap_points,
            e.overlap_pixels
        );
    }
    println!("count={count} seed={seed} out={}", out.display());
    Ok(())
}

struct TrainOverrides {
    seed: Option<u64>,
    lambda_f: Option<f64>,
    lambda_o: Option<f64>,
    lambda_p: Option<f64>,
    max_steps: Option<usize>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.lambda_f {
            t.lambda_f = v;
        }
        if let Some(v) = self.lambda_o {
            t.lambda_o = v;
        }
        if let Some(v) = self.lambda_p {
            t.lambda_p = v;
        }
        if let Some(v) = self.max_steps {
            t.max_steps = v;
        }
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    over: TrainOverrides,
) -> CmdResult {
    let mut cfg = load_config(config)?;
    over.apply(&mut cfg.train);
    cfg.validate()?;
    let data = pick(data, &cfg.data_dir, "data")?;
    let out = pick(out, &cfg.out_dir, "out")?;
    let (_, scenes) = load_dataset(&data)?;
    create_dir(&out)?;
    let log_path = out.join(METRICS_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = std::io::BufWriter::new(file);
    let mut io_err = None;
    let total = cfg.train.total_steps(scenes.len());
    eprintln!("training {total} steps on {} scenes", scenes.len());
    let every = (total / 20).max(1);
    let outcome = train(&scenes, &cfg.train, None, |r| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{}", r.to_json()) {
                io_err = Some(e);
            }
        }
        if r.step % every == 0 || r.step + 1 == total {
            eprintln!(
                "step {:>6}  lr {:.2e}  L_f {:.4}  L_o {:.4}  L_p {:.4}  total {:.4}",
                r.step, r.lr, r.l_f, r.l_o, r.l_p, r.total
            );
        }
    })?;
    if let Some(e) = io_err.or_else(|| log.flush().err()) {
        return Err(Failure::Run(Error::Io {
            path: log_path,
            source: e,
        }));
    }
    let params_path = out.join(PARAMS_FILE);
    outcome.params.save(&params_path)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;

    let recs = &outcome.records;
    let first = recs.iter().find(|r| r.l_f.is_finite()).map_or(f64::NAN, |r| r.l_f);
    let last = recs.iter().rev().find(|r| r.l_f.is_finite()).map_or(f64::NAN, |r| r.l_f);
    println!("steps={}", recs.len());
    println!("initial_l_f={first}");
    println!("final_l_f={last}");
    println!("skipped={}", recs.iter().map(|r| r.skipped).sum::<usize>());
    println!("pose_dropped={}", recs.iter().map(|r| r.pose_dropped).sum::<usize>());
    println!("params={}", params_path.display());
    println!("log={}", log_path.display());
    Ok(())
}

fn print_report(r: &EvalReport) {
    let tag = r.ablation;
    let (acc, mean, std) = r
        .matching
        .as_ref()
        .map_or((f64::NAN, f64::NAN, f64::NAN), |m| (m.accuracy, m.error.mean, m.error.std));
    println!("{tag}.acc_at_5px={acc}");
    println!("{tag}.match_mean_px={mean}");
    println!("{tag}.match_std_px={std}");
    println!("{tag}.mean_rte_m={}", r.mean_rte);
    println!("{tag}.mean_rre_deg={}", r.mean_rre);
    println!("{tag}.similarity_mean={}", r.similarity.map_or(f64::NAN, |s| s.mean));
    println!("{tag}.pose_failures={}", r.pose_failures);
    println!("{tag}.scenes={}", r.scenes.len());
}

fn cmd_eval(
    config: Option<PathBuf>,
    params: PathBuf,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    ablation: Option<String>,
    noise: Option<f64>,
    svg: bool,
) -> CmdResult {
    let cfg = load_config(config)?;
    let data = pick(data, &cfg.data_dir, "data")?;
    let out = pick(out, &cfg.out_dir, "out")?;
    let cells: Vec<Ablation> = match ablation.as_deref() {
        None => vec![cfg.eval.ablation],
        Some("all") => Ablation::ALL.to_vec(),
        Some(s) => vec![s.parse()?],
    };
    let store = ParamStore::load(&params)?;
    init_model(&cfg.train.encoder, 0).check_layout(&store)?;
    let (_, scenes) = load_dataset(&data)?;
    let mut opts = cfg.eval.options();
    if let Some(s) = noise {
        if !(s >= 0.0) {
            return Err(Failure::Usage("--noise must be ≥ 0".into()));
        }
        opts.target_noise = s;
    }
    for cell in cells {
        opts.ablation = cell;
        eprintln!("evaluating {} on {} scenes", cell.name(), scenes.len());
        let report = evaluate(&store, &cfg.train.encoder, &cfg.train.matching, &scenes, &opts)?;
        write_report(&out, &report, svg || cfg.eval.svg)?;
        print_report(&report);
    }
    println!("out={}", out.display());
    Ok(())
}

fn cmd_gradcheck(config: Option<PathBuf>, seed: u64, fault: Option<String>) -> CmdResult {
    let cfg = load_config(config)?;
    let fault = match fault.as_deref() {
        None => None,
        Some("matmul") => Some(Fault::MatmulBackward),
        Some(other) => return Err(Failure::Usage(format!("unknown fault {other:?}"))),
    };
    let train = TrainConfig {
        encoder: cfg.gradcheck.encoder.clone(),
        ..cfg.train.clone()
    };
    let reports = run_gradcheck(&train, seed, fault)?;
    eprintln!("{:<12} {:>12} {:>10} {:>8}  status", "stage", "max rel err", "tolerance", "entries");
    for r in &reports {
        eprintln!(
            "{:<12} {:>12.3e} {:>10.0e} {:>8}  {}",
            r.stage,
            r.max_rel_error,
            r.tolerance,
            r.entries,
            if r.passed { "ok" } else { "FAIL" }
        );
        println!("{}={:e}", r.stage, r.max_rel_error);
    }
    match first_failure(&reports) {
        Some(r) => {
            println!("status=fail");
            println!("failed_stage={}", r.stage);
            Err(Failure::Check(format!(
                "stage {} has relative error {:e} ≥ {:e}",
                r.stage, r.max_rel_error, r.tolerance
            )))
        }
        None => {
            println!("status=pass");
            Ok(())
        }
    }
}
