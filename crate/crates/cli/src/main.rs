//! `v2iloc` — generate datasets, run the classical baseline, train and
//! evaluate the learned localizers, and aggregate comparison reports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure. Failures print one line to stderr:
//! `error: category=<config|data|numeric> message="<text>"`.
//! Log verbosity follows the `V2I_LOG` environment variable (default `warn`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use v2i_core::autodiff::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use v2i_core::classic::{AngleGrid, ClassicLocalizer};
use v2i_core::config::{hex, ExperimentConfig};
use v2i_core::dataset::{generate_dataset, load_dataset, split, write_dataset, Dataset};
use v2i_core::fusion::{evaluate, history_csv, train, FusionModel, ModelConfig, ModelVariant, Prediction, TrainConfig};
use v2i_core::metrics::{complexity, emit_report, summary_csv, ComplexityReport, ErrorVector, ModelReport};
use v2i_core::scene::distance;
use v2i_core::{Error, Result};

const DATASET_FILE: &str = "dataset.v2i";
const ERRORS_HEADER: &str = "model,id,x_hat,y_hat,z_hat,x,y,z,error_m";
const COMPLEXITY_HEADER: &str = "model,parameters,macs,flops";
const BASELINE_NAME: &str = "classic";

#[derive(Parser, Debug)]
#[command(name = "v2iloc", version, about = "Vehicle-to-infrastructure localization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and write it to `<out>/dataset.v2i`.
    Generate {
        /// Configuration file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the configuration's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configuration's `samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run the MUSIC + ToA pipeline on every sample.
    Baseline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Angle grid step in degrees.
        #[arg(long, default_value_t = 0.5)]
        grid_step: f64,
    },
    /// Train one model variant on the training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        variant: ModelVariant,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Evaluate checkpoints on the test split they were trained against.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Expected variant; a checkpoint of any other variant is rejected.
        #[arg(long)]
        variant: Option<ModelVariant>,
    },
    /// Aggregate every `*_errors.csv` under `--out` into one report.
    Compare {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("V2I_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report(&Error::Config(first.to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}

fn report(e: &Error) {
    let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    eprintln!("error: category={} message=\"{msg}\"", e.category().as_str());
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { config, out, seed, samples } => cmd_generate(config.as_deref(), &out, seed, samples),
        Command::Baseline { dataset, out, grid_step } => cmd_baseline(&dataset, &out, grid_step),
        Command::Train { dataset, variant, out, seed, epochs, batch_size, lr, train_fraction, split_seed } => {
            let cfg = TrainConfig { epochs, batch_size, learning_rate: lr, seed, ..Default::default() };
            cmd_train(&dataset, variant, &out, &cfg, train_fraction, split_seed)
        }
        Command::Eval { dataset, checkpoint, out, variant } => cmd_eval(&dataset, &checkpoint, &out, variant),
        Command::Compare { out } => cmd_compare(&out),
    }
}

/// Everything needed to rerun a subcommand, written as `manifest_<name>.txt`.
struct RunManifest {
    name: String,
    entries: Vec<(&'static str, String)>,
}

impl RunManifest {
    fn new(subcommand: &str, name: &str) -> Self {
        let command = std::env::args().collect::<Vec<_>>().join(" ");
        RunManifest {
            name: name.to_string(),
            entries: vec![
                ("subcommand", subcommand.to_string()),
                ("tool_version", env!("CARGO_PKG_VERSION").to_string()),
                ("command", command),
            ],
        }
    }

    fn with(mut self, key: &'static str, value: impl ToString) -> Self {
        self.entries.push((key, value.to_string()));
        self
    }

    fn write(&self, out: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(text, "{k} = {v}");
        }
        fs::write(out.join(format!("manifest_{}.txt", self.name)), text)?;
        Ok(())
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} `{}` does not exist", p.display())))
    }
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>, samples: Option<usize>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Config(format!("configuration file `{}` does not exist", p.display())));
            }
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.scene.seed = s;
    }
    if let Some(n) = samples {
        cfg.samples = n;
    }
    cfg.validate()?;
    fs::create_dir_all(out)?;
    log::info!("generating {} samples (seed {})", cfg.samples, cfg.scene.seed);
    let ds = generate_dataset(&cfg)?;
    let path = out.join(DATASET_FILE);
    write_dataset(&ds, &path)?;
    fs::write(out.join("config.txt"), cfg.canonical_text())?;
    RunManifest::new("generate", "generate")
        .with("config", config.map_or("<defaults>".into(), path_str))
        .with("dataset", path_str(&path))
        .with("out", path_str(out))
        .with("seed", cfg.scene.seed)
        .with("variant", "-")
        .with("samples", cfg.samples)
        .with("config_digest", hex(&cfg.digest()))
        .write(out)
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    require_file(path, "dataset")?;
    load_dataset(path)
}

fn errors_csv(name: &str, preds: &[Prediction]) -> String {
    let mut out = format!("{ERRORS_HEADER}\n");
    for p in preds {
        let (e, t) = (p.predicted, p.truth);
        let _ = writeln!(out, "{name},{},{},{},{},{},{},{},{}", p.id, e[0], e[1], e[2], t[0], t[1], t[2], distance(e, t));
    }
    out
}

fn cmd_baseline(dataset: &Path, out: &Path, grid_step: f64) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let cfg = ds.header.config()?;
    let grid = AngleGrid::uniform_degrees((0.0, 90.0), (-90.0, 90.0), grid_step)?;
    let loc = ClassicLocalizer::new(&cfg.array, &cfg.ofdm, &grid, 1)?;
    let mut preds = Vec::with_capacity(ds.len());
    for r in &ds.records {
        let est = loc.localize(&r.csi, r.rsu)?;
        preds.push(Prediction { id: r.id, predicted: est.position, truth: r.ue });
    }
    fs::create_dir_all(out)?;
    fs::write(out.join(format!("{BASELINE_NAME}_errors.csv")), errors_csv(BASELINE_NAME, &preds))?;
    let report = ModelReport { name: BASELINE_NAME.into(), errors: ErrorVector::from_predictions(&preds)?, complexity: None };
    fs::write(out.join(format!("{BASELINE_NAME}_metrics.csv")), summary_csv(&[report])?)?;
    RunManifest::new("baseline", BASELINE_NAME)
        .with("config", "-")
        .with("dataset", path_str(dataset))
        .with("out", path_str(out))
        .with("seed", ds.header.seed)
        .with("variant", BASELINE_NAME)
        .with("dataset_digest", hex(&ds.header.digest))
        .with("grid_step_deg", grid_step)
        .write(out)
}

fn model_config(ds: &Dataset, variant: ModelVariant) -> ModelConfig {
    let h = &ds.header;
    ModelConfig::new(variant, h.antennas as usize, h.subcarriers as usize, h.width as usize, h.height as usize)
}

fn cmd_train(dataset: &Path, variant: ModelVariant, out: &Path, cfg: &TrainConfig, fraction: f64, split_seed: u64) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let sp = split(ds.len(), fraction, split_seed)?;
    log::info!("training {variant} on {} samples for {} epochs", sp.train.len(), cfg.epochs);
    let outcome = train(model_config(&ds, variant), &ds, &sp.train, cfg)?;
    fs::create_dir_all(out)?;
    let mut meta = outcome.model.metadata();
    meta.insert("dataset.digest".into(), hex(&ds.header.digest));
    meta.insert("dataset.count".into(), ds.len().to_string());
    meta.insert("split.fraction".into(), fraction.to_string());
    meta.insert("split.seed".into(), split_seed.to_string());
    meta.insert("train.seed".into(), cfg.seed.to_string());
    meta.insert("train.epochs".into(), cfg.epochs.to_string());
    let ckpt = out.join(format!("{variant}.ckpt"));
    save_checkpoint(&ckpt, &outcome.model.params, &meta)?;
    fs::write(out.join(format!("{variant}_training_log.csv")), history_csv(&outcome.history))?;
    RunManifest::new("train", &format!("train_{variant}"))
        .with("config", "-")
        .with("dataset", path_str(dataset))
        .with("out", path_str(out))
        .with("seed", cfg.seed)
        .with("variant", variant)
        .with("dataset_digest", hex(&ds.header.digest))
        .with("epochs", cfg.epochs)
        .with("batch_size", cfg.batch_size)
        .with("lr", cfg.learning_rate)
        .with("train_fraction", fraction)
        .with("split_seed", split_seed)
        .with("checkpoint", path_str(&ckpt))
        .write(out)
}

fn meta_value<'a>(meta: &'a Metadata, key: &str, ckpt: &Path) -> Result<&'a str> {
    meta.get(key).map(String::as_str).ok_or_else(|| Error::Data(format!("checkpoint `{}` lacks `{key}`", ckpt.display())))
}

fn meta_number<T: std::str::FromStr>(meta: &Metadata, key: &str, ckpt: &Path) -> Result<T> {
    meta_value(meta, key, ckpt)?
        .parse()
        .map_err(|_| Error::Data(format!("checkpoint `{}` has a malformed `{key}`", ckpt.display())))
}

fn cmd_eval(dataset: &Path, checkpoints: &[PathBuf], out: &Path, expected: Option<ModelVariant>) -> Result<()> {
    let ds = open_dataset(dataset)?;
    let digest = hex(&ds.header.digest);
    let mut reports = Vec::new();
    let mut outputs = Vec::new();
    let mut seen = BTreeSet::new();
    for ckpt in checkpoints {
        require_file(ckpt, "checkpoint")?;
        let (params, meta) = load_checkpoint(ckpt)?;
        let tag = meta_value(&meta, "variant", ckpt)?;
        if let Some(v) = expected {
            if tag != v.tag() {
                return Err(Error::Data(format!("checkpoint `{}` holds a `{tag}` model, expected `{v}`", ckpt.display())));
            }
        }
        if meta_value(&meta, "dataset.digest", ckpt)? != digest || meta_number::<usize>(&meta, "dataset.count", ckpt)? != ds.len() {
            return Err(Error::Data(format!("checkpoint `{}` was trained on a different dataset", ckpt.display())));
        }
        let model = FusionModel::from_checkpoint(params, &meta)?;
        let (c, h) = (&model.config, &ds.header);
        if (c.antennas, c.subcarriers, c.width, c.height) != (h.antennas as usize, h.subcarriers as usize, h.width as usize, h.height as usize) {
            return Err(Error::Data(format!("checkpoint `{}` does not match the dataset dimensions", ckpt.display())));
        }
        let name = model.config.variant.tag().to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Data(format!("two checkpoints for variant `{name}`")));
        }
        let sp = split(ds.len(), meta_number(&meta, "split.fraction", ckpt)?, meta_number(&meta, "split.seed", ckpt)?)?;
        let preds = evaluate(&model, &ds, &sp.test)?;
        outputs.push((format!("{name}_errors.csv"), errors_csv(&name, &preds)));
        reports.push(ModelReport { name, errors: ErrorVector::from_predictions(&preds)?, complexity: Some(complexity(&model)?) });
    }
    fs::create_dir_all(out)?;
    for (file, body) in outputs {
        fs::write(out.join(file), body)?;
    }
    fs::write(out.join("metrics.csv"), summary_csv(&reports)?)?;
    fs::write(out.join("complexity.csv"), complexity_csv(&reports))?;
    let list = checkpoints.iter().map(|p| path_str(p)).collect::<Vec<_>>().join(", ");
    RunManifest::new("eval", "eval")
        .with("config", "-")
        .with("dataset", path_str(dataset))
        .with("out", path_str(out))
        .with("seed", "-")
        .with("variant", reports.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(", "))
        .with("dataset_digest", digest)
        .with("checkpoints", list)
        .write(out)
}

fn complexity_csv(reports: &[ModelReport]) -> String {
    let mut out = format!("{COMPLEXITY_HEADER}\n");
    for r in reports {
        if let Some(c) = r.complexity {
            let _ = writeln!(out, "{},{},{},{}", r.name, c.parameters, c.macs, c.flops());
        }
    }
    out
}

fn parse_errors_csv(path: &Path) -> Result<(String, ErrorVector)> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, why: &str| Error::Data(format!("{}:{line}: {why}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some(ERRORS_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    let (mut name, mut ids, mut errors) = (None::<String>, Vec::new(), Vec::new());
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(bad(i + 2, "expected 9 columns"));
        }
        match &name {
            None => name = Some(cols[0].to_string()),
            Some(n) if n != cols[0] => return Err(bad(i + 2, "mixed model names")),
            _ => {}
        }
        ids.push(cols[1].parse().map_err(|_| bad(i + 2, "malformed id"))?);
        errors.push(cols[8].parse().map_err(|_| bad(i + 2, "malformed error"))?);
    }
    let name = name.ok_or_else(|| bad(1, "no rows"))?;
    Ok((name, ErrorVector::new(ids, errors)?))
}

fn read_complexity(path: &Path, into: &mut BTreeMap<String, ComplexityReport>) -> Result<()> {
    let text = fs::read_to_string(path)?;
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parsed = match cols.as_slice() {
            [name, p, m, _] => p.parse().ok().zip(m.parse().ok()).map(|(parameters, macs)| (name.to_string(), ComplexityReport { parameters, macs })),
            _ => None,
        };
        let (name, c) = parsed.ok_or_else(|| Error::Data(format!("{}:{}: malformed row", path.display(), i + 1)))?;
        into.insert(name, c);
    }
    Ok(())
}

fn cmd_compare(out: &Path) -> Result<()> {
    if !out.is_dir() {
        return Err(Error::Data(format!("output directory `{}` does not exist", out.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(out)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    let mut vectors = BTreeMap::new();
    let mut costs = BTreeMap::new();
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with("_errors.csv") {
            let (model, ev) = parse_errors_csv(f)?;
            if vectors.insert(model.clone(), ev).is_some() {
                return Err(Error::Data(format!("model `{model}` appears in more than one errors file")));
            }
        } else if name == "complexity.csv" {
            read_complexity(f, &mut costs)?;
        }
    }
    if vectors.is_empty() {
        return Err(Error::Data(format!("no *_errors.csv files under `{}`", out.display())));
    }
    let mut common: Option<BTreeSet<u64>> = None;
    for ev in vectors.values() {
        let ids: BTreeSet<u64> = ev.ids.iter().copied().collect();
        common = Some(match common {
            None => ids,
            Some(c) => c.intersection(&ids).copied().collect(),
        });
    }
    let common: Vec<u64> = common.unwrap_or_default().into_iter().collect();
    if common.is_empty() {
        return Err(Error::Data("the models share no evaluated samples".into()));
    }
    let reports = vectors
        .iter()
        .map(|(name, ev)| Ok(ModelReport { name: name.clone(), errors: ev.restrict(&common)?, complexity: costs.get(name).copied() }))
        .collect::<Result<Vec<_>>>()?;
    let written = emit_report(&reports, out)?;
    log::info!("wrote {} report files for {} models over {} samples", written.len(), reports.len(), common.len());
    RunManifest::new("compare", "compare")
        .with("config", "-")
        .with("dataset", "-")
        .with("out", path_str(out))
        .with("seed", "-")
        .with("variant", reports.iter().map(|r| r.name.as_str()).collect::<Vec<_>>().join(", "))
        .with("samples", common.len())
        .write(out)
}
