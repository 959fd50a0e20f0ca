//! Command-line front end: argument parsing, artifact layout and dispatch.

pub mod config;
pub mod verify;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::aging::{build_aging_dataset, build_aging_test_set, certify_profiles, evaluate_aged, evaluate_fresh, fit_aging, AgedModel, AgingDataset};
use crate::cosim::{test_mse, ScaledModel};
use crate::data::{build_dataset, CircuitOracle, Dataset, OracleKind, PortScaling};
use crate::error::{Error, Result};
use crate::exporter::emit_veriloga;
use crate::model::CtrnnParams;
use crate::stability::certify;
use crate::training::{evaluate_openloop, fit, Checkpoint, write_metrics_csv, TrainConfig, TrainMode};
use config::{EffectiveConfig, RunConfig};

pub const MODEL_SCHEMA: &str = "iss-node-model-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Verbosity {
    Quiet,
    Normal,
    Debug,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    All,
}

#[derive(Debug, Parser)]
#[command(name = "iss-node", version, about = "Learn, check and export input-to-state stable CTRNN circuit models")]
pub struct Cli {
    /// Directory receiving every artifact of the command.
    #[arg(long, global = true, default_value = "iss-node-out")]
    pub out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "normal")]
    pub verbosity: Verbosity,
    /// Seed for the stochastic parts of the command.
    #[arg(long, global = true, env = "ISS_NODE_SEED")]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an oracle under random sources and loads.
    GenerateData {
        #[arg(long, value_enum)]
        oracle: Option<OracleKind>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Fit a CTRNN to a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the stability certificate of a model as JSON.
    CheckStability {
        #[arg(long)]
        model: PathBuf,
    },
    /// Open-loop error on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "valid")]
        split: Split,
    },
    /// Closed-loop co-simulation against the oracle with random loads.
    Cosim {
        #[arg(long)]
        model: PathBuf,
        /// Dataset providing the source and load generators.
        #[arg(long)]
        dataset: PathBuf,
        /// Oracle to compare against (default: the dataset's).
        #[arg(long, value_enum)]
        oracle: Option<OracleKind>,
        #[arg(long)]
        runs: Option<usize>,
        /// File name of the JSON summary inside `--out`.
        #[arg(long, default_value = "cosim_report.json")]
        report: String,
    },
    /// Write the model as a Verilog-A module.
    ExportVeriloga {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "iss_ctrnn")]
        name: String,
    },
    /// Generate aged data and fit the perturbation network on a frozen model.
    AgeTrain {
        /// Fresh model.
        #[arg(long)]
        model: PathBuf,
        /// Fresh dataset (scaling and generators).
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Compare aged and fresh models on aged data and certify random profiles.
    AgeEval {
        /// Aged model written by `age-train`.
        #[arg(long)]
        model: PathBuf,
        /// Aging dataset, usually the held-out `aging_test.json`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long, default_value_t = 500)]
        profiles: usize,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify,
}

/// Trained model plus everything needed to use it in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub schema: String,
    #[serde(with = "crate::model::serde_params")]
    pub params: CtrnnParams,
    pub scaling: PortScaling,
    pub oracle: CircuitOracle,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub valid_mse: f64,
}

impl ModelArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: ModelArtifact = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.schema != MODEL_SCHEMA {
            return Err(Error::InvalidInput(format!("unsupported model schema '{}'", m.schema)));
        }
        Ok(m)
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbosity);
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.to_string(), "kind": e.kind() }));
            1
        }
    }
}

fn init_logging(v: Verbosity) {
    let level = match v {
        Verbosity::Quiet => log::LevelFilter::Error,
        Verbosity::Normal => log::LevelFilter::Info,
        Verbosity::Debug => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn print_json<T: Serialize>(v: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(v)?;
    println!("{text}");
    Ok(text)
}

fn split_indices(train: &[usize], valid: &[usize], split: Split) -> Vec<usize> {
    match split {
        Split::Train => train.to_vec(),
        Split::Valid if valid.is_empty() => train.to_vec(),
        Split::Valid => valid.to_vec(),
        Split::All => {
            let mut all: Vec<usize> = train.iter().chain(valid).copied().collect();
            all.sort_unstable();
            all
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::with_defaults(),
    };
    let seed = cli.seed.or(rc.seed);
    let out = &cli.out;
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::GenerateData { oracle, n, horizon } => {
            let mut data = rc.data.clone();
            if oracle.is_some() {
                data.oracle = *oracle;
                if data.circuit.as_ref().is_some_and(|c| Some(c.kind()) != *oracle) {
                    data.circuit = None;
                }
            }
            data.n = n.or(data.n);
            data.horizon = horizon.or(data.horizon);
            data.seed = seed.or(data.seed);
            let cfg = data.resolve()?;
            let mut eff = EffectiveConfig::new("generate-data", seed);
            eff.data = Some(cfg.clone());
            eff.write(out)?;
            let ds = build_dataset(&cfg)?;
            ds.save(&out.join("dataset.json"))?;
            info!("wrote {} trajectories ({} train / {} valid)", ds.items.len(), ds.train.len(), ds.valid.len());
            print_json(&serde_json::json!({ "dataset": out.join("dataset.json"), "n": ds.items.len(), "train": ds.train.len(), "valid": ds.valid.len() }))?;
        }
        Command::Train { dataset, mode, epochs } => {
            let ds = Dataset::load(dataset)?;
            let mut cfg = rc.train.clone();
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let mut eff = EffectiveConfig::new("train", seed);
            eff.data = Some(ds.config.clone());
            eff.train = Some(cfg.clone());
            eff.write(out)?;
            let res = fit(&ds, &cfg)?;
            res.best.save(&out.join("checkpoint_best.json"))?;
            Checkpoint { state: res.last.clone(), ..res.best.clone() }.save(&out.join("checkpoint_last.json"))?;
            write_metrics_csv(&res.metrics, fs::File::create(out.join("metrics.csv"))?)?;
            let art = ModelArtifact {
                schema: MODEL_SCHEMA.into(),
                params: res.best.state.params.clone(),
                scaling: ds.scaling.clone(),
                oracle: ds.config.oracle.clone(),
                train: cfg,
                best_epoch: res.best.best_epoch,
                valid_mse: res.best.best_valid_mse,
            };
            art.save(&out.join("model.json"))?;
            let cert = certify(&art.params);
            print_json(&serde_json::json!({
                "model": out.join("model.json"),
                "best_epoch": art.best_epoch,
                "valid_mse": art.valid_mse,
                "certified": cert.satisfied,
            }))?;
        }
        Command::CheckStability { model } => {
            let art = ModelArtifact::load(model)?;
            EffectiveConfig::new("check-stability", seed).write(out)?;
            let text = print_json(&certify(&art.params))?;
            fs::write(out.join("stability.json"), text)?;
        }
        Command::Eval { model, dataset, split } => {
            let art = ModelArtifact::load(model)?;
            let ds = Dataset::load(dataset)?;
            if ds.scaling != art.scaling {
                return Err(Error::InvalidInput("dataset normalization differs from the model's".into()));
            }
            let mut eff = EffectiveConfig::new("eval", seed);
            eff.data = Some(ds.config.clone());
            eff.train = Some(art.train.clone());
            eff.write(out)?;
            let idx = split_indices(&ds.train, &ds.valid, *split);
            let rep = evaluate_openloop(&art.params, &ds.pairs(&idx)?, art.train.grid_steps)?;
            let text = print_json(&serde_json::json!({ "split": split, "report": rep }))?;
            fs::write(out.join("eval.json"), text)?;
        }
        Command::Cosim { model, dataset, oracle, runs, report } => {
            let art = ModelArtifact::load(model)?;
            let ds = Dataset::load(dataset)?;
            let mut cfg = rc.cosim.clone();
            cfg.runs = runs.unwrap_or(cfg.runs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let truth = match oracle {
                Some(k) if *k != ds.config.oracle.kind() => CircuitOracle::default_for(*k),
                _ => ds.config.oracle.clone(),
            };
            let mut eff = EffectiveConfig::new("cosim", seed);
            eff.data = Some(ds.config.clone());
            eff.cosim = Some(cfg.clone());
            eff.write(out)?;
            let block = ScaledModel::new(&art.params, art.scaling.clone())?;
            let rep = test_mse(&block, &truth, &ds, &cfg);
            let mut w = csv::Writer::from_path(out.join("cosim_runs.csv"))?;
            let mut header = vec!["run".to_string(), "seed_stream".into(), "mse".into()];
            header.extend((0..rep.channel_mse.len()).map(|k| format!("mse_ch{k}")));
            w.write_record(&header)?;
            for r in &rep.run_mse {
                let mut rec = vec![r.run.to_string(), r.seed_stream.to_string(), r.mse.to_string()];
                rec.extend(r.channel_mse.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            let text = print_json(&serde_json::json!({
                "runs": rep.runs,
                "succeeded": rep.succeeded,
                "mean_mse": rep.mean_mse,
                "channel_mse": rep.channel_mse,
                "max_state": rep.max_state,
                "failures": rep.failures,
            }))?;
            fs::write(out.join(report), text)?;
            if rep.succeeded == 0 {
                return Err(Error::InvalidInput("every co-simulation run failed".into()));
            }
        }
        Command::ExportVeriloga { model, name } => {
            let art = ModelArtifact::load(model)?;
            let mut eff = EffectiveConfig::new("export-veriloga", seed);
            eff.train = Some(art.train.clone());
            eff.write(out)?;
            let text = emit_veriloga(&art.params, name, Some(&art.scaling))?;
            let path = out.join(format!("{name}.va"));
            fs::write(&path, text)?;
            print_json(&serde_json::json!({ "module": name, "path": path, "certified": certify(&art.params).satisfied }))?;
        }
        Command::AgeTrain { model, dataset } => {
            let art = ModelArtifact::load(model)?;
            let ds = Dataset::load(dataset)?;
            let mut aging = rc.aging.clone();
            let mut tcfg = rc.aging_train.clone();
            if let Some(s) = seed {
                aging.seed = s;
                tcfg.seed = s;
            }
            let mut eff = EffectiveConfig::new("age-train", seed);
            eff.data = Some(ds.config.clone());
            eff.aging = Some(aging.clone());
            eff.aging_train = Some(tcfg.clone());
            eff.write(out)?;
            let ads = build_aging_dataset(&ds, &aging)?;
            ads.save(&out.join("aging_dataset.json"))?;
            build_aging_test_set(&ds, &aging)?.save(&out.join("aging_test.json"))?;
            let res = fit_aging(&art.params, &ads, &tcfg)?;
            res.model.save(&out.join("aged_model.json"))?;
            let mut w = csv::Writer::from_path(out.join("aging_metrics.csv"))?;
            w.write_record(["epoch", "train_loss", "valid_mse"])?;
            for h in &res.history {
                w.write_record([h.epoch.to_string(), h.train_loss.to_string(), h.valid_mse.to_string()])?;
            }
            w.flush()?;
            print_json(&serde_json::json!({
                "aged_model": out.join("aged_model.json"),
                "best_epoch": res.best_epoch,
                "valid_mse": res.history[res.best_epoch].valid_mse,
            }))?;
        }
        Command::AgeEval { model, dataset, split, profiles } => {
            let aged = AgedModel::load(model)?;
            let ads = AgingDataset::load(dataset)?;
            let mut eff = EffectiveConfig::new("age-eval", seed);
            eff.data = Some(ads.data.clone());
            eff.aging = Some(aged.aging.clone());
            eff.write(out)?;
            let idx = split_indices(&ads.train, &ads.valid, *split);
            let fresh = evaluate_fresh(&aged.fresh, &ads, &idx, aged.grid_steps)?;
            let with_aging = evaluate_aged(&aged, &ads, &idx)?;
            let certs = certify_profiles(&aged, *profiles, seed.unwrap_or(0))?;
            let text = print_json(&serde_json::json!({
                "items": idx.len(),
                "fresh_mse": fresh.aggregate,
                "aged_mse": with_aging.aggregate,
                "ratio": with_aging.aggregate / fresh.aggregate,
                "certificates": certs,
            }))?;
            fs::write(out.join("age_eval.json"), text)?;
        }
        Command::Verify => {
            EffectiveConfig::new("verify", Some(seed.unwrap_or(0))).write(out)?;
            let rows = verify::run_all(seed.unwrap_or(0));
            print!("{}", verify::format_table(&rows));
            fs::write(out.join("verify.json"), serde_json::to_string_pretty(&rows)?)?;
            let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::Verification(failed.join(", ")));
            }
        }
    }
    Ok(())
}
