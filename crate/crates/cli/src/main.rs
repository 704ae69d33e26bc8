//! `stochop`: run the experiment protocol, sweeps, data generation, and
//! checkpoint evaluation from the command line.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments,
//! 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stochop_core::datagen::save_csv;
use stochop_core::eval::{
    build_data, build_setup, compute_baselines, evaluate_predictor, run_experiment,
    sweep_sampling, sweep_trainsize, EvalError, Experiment, ExperimentConfig, Method,
};
use stochop_core::predictors::load_checkpoint;
use stochop_core::qp::SolveOptions;

#[derive(Parser)]
#[command(name = "stochop", version, about = "Decision-focused learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every requested method across seeds and report R / FR.
    Run(CommonArgs),
    /// Re-run the protocol over (M_t, M) pairs.
    SweepSampling {
        #[command(flatten)]
        common: CommonArgs,
        /// Pairs as M_txM, e.g. --pairs 4x8,16x64
        #[arg(long, value_delimiter = ',', default_value = "4x8,8x16,16x64")]
        pairs: Vec<String>,
    },
    /// Re-run the protocol over training-set sizes at fixed (M_t, M).
    SweepTrainsize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', default_value = "200,600,1500")]
        sizes: Vec<usize>,
    },
    /// Write the train/val/test splits of an experiment to CSV files.
    GenData(CommonArgs),
    /// Evaluate a saved predictor checkpoint on freshly generated data.
    EvalCheckpoint {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML configuration file ([experiment], [train], [problem]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// NV1, NV2, NVQP, POP, POP-sweep, or CSV. Overrides the file.
    #[arg(long)]
    experiment: Option<String>,
    /// Comma-separated subset of D-ANN, C-ANN, D-GP, D-BNN, C-BNN.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Inference sample count M.
    #[arg(long)]
    m: Option<usize>,
    /// Training sample count M_t.
    #[arg(long)]
    mt: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl CommonArgs {
    /// Resolve the final configuration: experiment defaults, then the
    /// config file, then flags (a flag always wins over the file).
    fn resolve(&self) -> Result<ExperimentConfig, EvalError> {
        let flag_exp = self
            .experiment
            .as_deref()
            .map(Experiment::parse)
            .transpose()?;
        let mut cfg = match (&self.config, flag_exp) {
            (Some(path), exp) => ExperimentConfig::from_file(path, exp)?,
            (None, Some(exp)) => ExperimentConfig::default_for(exp),
            (None, None) => {
                return Err(EvalError::Invalid(
                    "pass --experiment or a --config naming one".into(),
                ))
            }
        };
        if let Some(methods) = &self.methods {
            cfg.methods = methods
                .iter()
                .map(|s| Method::parse(s))
                .collect::<Result<_, _>>()?;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(mt) = self.mt {
            cfg.m_t = mt;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_pairs(pairs: &[String]) -> Result<Vec<(usize, usize)>, EvalError> {
    pairs
        .iter()
        .map(|p| {
            let (mt, m) = p
                .split_once('x')
                .ok_or_else(|| EvalError::Invalid(format!("pair {p:?} is not M_txM")))?;
            let mt = mt
                .trim()
                .parse()
                .map_err(|_| EvalError::Invalid(format!("bad M_t in pair {p:?}")))?;
            let m = m
                .trim()
                .parse()
                .map_err(|_| EvalError::Invalid(format!("bad M in pair {p:?}")))?;
            Ok((mt, m))
        })
        .collect()
}

/// The effective configuration, printed so callers can assert which
/// values (file or flag) actually applied.
fn print_snapshot(cfg: &ExperimentConfig) {
    let json = serde_json::to_string(cfg).expect("config serializes");
    println!("config-snapshot: {json}");
    println!("config-hash: {}", cfg.hash());
}

fn report_summary(record: &stochop_core::eval::RunRecord) {
    for r in &record.reports {
        match (r.fr_mean, r.fr_std) {
            (Some(frm), Some(frs)) => println!(
                "{}  R = {:.4} ± {:.4}  FR = {:.4} ± {:.4}",
                r.method, r.r_mean, r.r_std, frm, frs
            ),
            _ => println!("{}  R = {:.4} ± {:.4}", r.method, r.r_mean, r.r_std),
        }
    }
    for f in &record.failures {
        eprintln!("failed: {f}");
    }
}

fn execute(cli: Cli) -> Result<(), EvalError> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.resolve()?;
            print_snapshot(&cfg);
            let record = run_experiment(&cfg)?;
            report_summary(&record);
            println!("wrote {}", cfg.out_dir.join("results.csv").display());
        }
        Command::SweepSampling { common, pairs } => {
            let cfg = common.resolve()?;
            let pairs = parse_pairs(&pairs)?;
            print_snapshot(&cfg);
            let record = sweep_sampling(&cfg, &pairs)?;
            for point in &record.sweep {
                println!("(M_t = {}, M = {}):", point.m_t, point.m);
                for r in &point.reports {
                    println!("  {}  R = {:.4}  FR = {:?}", r.method, r.r_mean, r.fr_mean);
                }
            }
            println!("wrote {}", cfg.out_dir.join("sweep.csv").display());
        }
        Command::SweepTrainsize { common, sizes } => {
            let cfg = common.resolve()?;
            print_snapshot(&cfg);
            let record = sweep_trainsize(&cfg, &sizes)?;
            for point in &record.sweep {
                println!("n_train = {}:", point.n_train);
                for r in &point.reports {
                    println!("  {}  R = {:.4}  FR = {:?}", r.method, r.r_mean, r.fr_mean);
                }
            }
            println!("wrote {}", cfg.out_dir.join("sweep.csv").display());
        }
        Command::GenData(common) => {
            let cfg = common.resolve()?;
            print_snapshot(&cfg);
            let setup = build_setup(&cfg)?;
            for &seed in &cfg.seeds {
                let (train, val, test) = build_data(&cfg, &setup, seed)?;
                let dir = cfg.out_dir.join(format!("seed{seed}"));
                std::fs::create_dir_all(&dir)
                    .map_err(|e| EvalError::Io(format!("mkdir {}: {e}", dir.display())))?;
                save_csv(&train, &dir.join("train.csv"))?;
                save_csv(&val, &dir.join("val.csv"))?;
                save_csv(&test, &dir.join("test.csv"))?;
                println!("wrote {} (n = {}/{}/{})", dir.display(), train.len(), val.len(), test.len());
            }
        }
        Command::EvalCheckpoint { common, checkpoint } => {
            let cfg = common.resolve()?;
            print_snapshot(&cfg);
            let predictor = load_checkpoint(&checkpoint)?;
            let setup = build_setup(&cfg)?;
            let opts = SolveOptions::default();
            let seed = cfg.seeds[0];
            let (_, _, test) = build_data(&cfg, &setup, seed)?;
            let baselines = compute_baselines(
                &setup.problem,
                &test,
                setup.noise.as_ref(),
                cfg.m_oracle,
                seed,
                cfg.eval_cap,
                opts,
            )?;
            let out =
                evaluate_predictor(&predictor, &setup.problem, &test, &baselines, cfg.m, seed, opts)?;
            match out.fr {
                Some(fr) => println!("R = {:.6}  FR = {fr:.6}  (n = {})", out.r, out.used),
                None => println!("R = {:.6}  (n = {})", out.r, out.used),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(EvalError::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
