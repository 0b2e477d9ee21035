use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use faircda_core::data::{synth_generate, write_synth_csv, Split, SynthSpec};
use faircda_core::harness::{
    audit, evaluate, linear_grid, run_cell, run_sweep, DataSource, ExperimentConfig, Method, SweepData,
};
use faircda_core::trainer::{TrainError, TrainedModel};

#[derive(Parser)]
#[command(name = "faircda", version, about = "Fair classification by counterfactual augmentation of disentangled features")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds, comma separated; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "fair-cda")]
        method: Method,
        /// Sweep parameter for the method (λ, regulariser weight or flip probability); the config's λ when omitted.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Sweep methods over their grids and write the Pareto table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Methods to sweep, comma separated; overrides the config.
        #[arg(long, value_delimiter = ',')]
        method: Vec<Method>,
        /// Grid for every swept method: `a,b,c` or `lo:hi:n`.
        #[arg(long)]
        lambda_grid: Option<String>,
    },
    /// Print the metric report of a saved model.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimal sensitive-feature perturbation that flips each prediction.
    Audit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 1000.0)]
        cap: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        /// Training budget to report against; the config's λ when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset as CSV plus schema.
    GenData {
        /// Synthetic data settings under `[data]`; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [lo, hi, n] => Ok(linear_grid(lo.trim().parse()?, hi.trim().parse()?, n.trim().parse()?)),
        [list] => list.split(',').map(|v| v.trim().parse::<f64>().with_context(|| format!("grid value `{v}`"))).collect(),
        _ => bail!(TrainError::Config(format!("cannot parse grid `{s}`; expected `a,b,c` or `lo:hi:n`"))),
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn train(common: Common, out: &Path, method: Method, lambda: Option<f64>) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let seeds = if common.seeds.is_empty() { vec![cfg.train.seed] } else { common.seeds };
    let param = lambda.unwrap_or(cfg.train.lambda);
    let ds = cfg.data.load(method == Method::AttributeLevel)?;
    let data = SweepData { plain: &ds, with_sensitive: Some(&ds) };
    let cache = out.join("cache");
    for seed in seeds {
        let o = run_cell(method, &cfg.train, param, seed, &data, Some(&cache))?;
        let dir = out.join(method.as_str()).join(format!("{param}")).join(format!("seed-{seed}"));
        o.record.write(&dir)?;
        o.model.save(&dir.join("model.ckpt"), &o.record.summary.config_digest)?;
        let t = &o.record.summary.test;
        log::info!(
            "{method} param={param} seed={seed}: test ap={:?} {}={:?}",
            t.get("ap"),
            cfg.train.metric.key(),
            t.get(cfg.train.metric.key())
        );
        println!("{}", dir.display());
    }
    Ok(())
}

fn sweep(common: Common, out: &Path, methods: Vec<Method>, grid: Option<String>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if !common.seeds.is_empty() {
        cfg.sweep.seeds = common.seeds;
    }
    if !methods.is_empty() {
        cfg.sweep.methods = methods;
    }
    if let Some(g) = grid {
        let g = parse_grid(&g)?;
        for &m in &cfg.sweep.methods {
            cfg.sweep.grids.insert(m, g.clone());
        }
    }
    let plain = cfg.data.load(false)?;
    let sens = if cfg.sweep.methods.contains(&Method::AttributeLevel) { Some(cfg.data.load(true)?) } else { None };
    let data = SweepData { plain: &plain, with_sensitive: sens.as_ref() };
    let points = run_sweep(&cfg.train, &data, &cfg.sweep, out)?;
    print!("{}", faircda_core::harness::pareto_tsv(&points));
    Ok(())
}

fn load_eval(config: Option<&Path>, model: &Path) -> Result<(ExperimentConfig, TrainedModel)> {
    let cfg = load_config(config)?;
    let model = TrainedModel::load(model)?;
    Ok((cfg, model))
}

/// The dataset a model was trained on: sensitive columns are appended when its input is wider.
fn load_for(data: &DataSource, model: &TrainedModel) -> Result<faircda_core::data::EncodedDataset> {
    let ds = data.load(false)?;
    if ds.width() == model.net.arch.input {
        return Ok(ds);
    }
    let ds = data.load(true)?;
    if ds.width() != model.net.arch.input {
        bail!(TrainError::Mismatch(format!(
            "model expects {} input columns, dataset has {}",
            model.net.arch.input,
            ds.width()
        )));
    }
    Ok(ds)
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>, n: Option<usize>) -> Result<()> {
    let (mut spec, mut s) = match load_config(config)?.data {
        DataSource::Synth { spec, seed } => (spec, seed),
        DataSource::Csv { .. } if config.is_none() => (SynthSpec::default(), 0),
        DataSource::Csv { .. } => bail!(TrainError::Config("gen-data needs `source = \"synth\"` under [data]".into())),
    };
    if let Some(n) = n {
        spec.n = n;
    }
    if let Some(v) = seed {
        s = v;
    }
    let ds = synth_generate(&spec, s)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_synth_csv(&ds, &out.join("synth.csv"), &out.join("synth.schema.json"))?;
    println!("{}", out.join("synth.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, out, method, lambda } => train(common, &out, method, lambda),
        Cmd::Sweep { common, out, method, lambda_grid } => sweep(common, &out, method, lambda_grid),
        Cmd::Evaluate { config, model, split, out } => {
            let (cfg, model) = load_eval(config.as_deref(), &model)?;
            let ds = load_for(&cfg.data, &model)?;
            let report = evaluate(&model, &ds, split.into(), cfg.train.seed)?;
            write_json(&report, out.as_deref())
        }
        Cmd::Audit { config, model, split, cap, step, lambda, out } => {
            let (cfg, model) = load_eval(config.as_deref(), &model)?;
            let ds = load_for(&cfg.data, &model)?;
            let report = audit(&model, &ds.slice(split.into()), cap, step, lambda.unwrap_or(cfg.train.lambda))?;
            for w in &report.warnings {
                log::warn!("{w}");
            }
            write_json(&report, out.as_deref())
        }
        Cmd::GenData { config, out, seed, n } => gen_data(config.as_deref(), &out, seed, n),
    }
}

/// 2 configuration, 3 data, 4 training or numerics, 5 files and checkpoints, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::Config(_) | TrainError::Toml(_) | TrainError::Mismatch(_) => 2,
                TrainError::Data(_) => 3,
                TrainError::NonFinite { .. }
                | TrainError::Model(_)
                | TrainError::Nn(_)
                | TrainError::Autodiff(_)
                | TrainError::Metric(_) => 4,
                TrainError::Io(..) | TrainError::Checkpoint(_) | TrainError::Json(_) => 5,
            };
        }
        if cause.is::<faircda_core::data::DataError>() {
            return 3;
        }
        if cause.is::<faircda_core::disentangle::DisentangleError>() {
            return 4;
        }
        if cause.is::<std::num::ParseFloatError>() || cause.is::<std::num::ParseIntError>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 5;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
