//! Command-line entry point.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{ConfigError, DataSource, RunConfig, Settings};
use crate::dataset::{assemble_window, hex_digest, Dataset};
use crate::fusion::{Variant, VARIANTS};
use crate::model::{prepare, Model, ModelError};
use crate::protocols::{
    ablate, build_model, constant_mean_rmse, hidden_sets, increase_ratio, json_lines, leave_sensors_out, load_dataset,
    train_variant, MetricRecord, Split,
};
use crate::raster::rasterize;
use crate::textual::{linearize, render_semantic, tokenize_semantic};
use crate::train::{evaluate, Metrics, RngState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "stfuse", version, about = "Multimodal spatial-temporal prediction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Directory receiving every output of the run.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct Anchor {
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long)]
    pub day: Option<i64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset as CSV.
    GenerateSynthetic(Common),
    /// Precompute texts, instructions and trend images.
    Prepare(Common),
    /// Render the semantic text of one record.
    RenderText {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        anchor: Anchor,
    },
    /// Render the trend image of one record as PGM.
    RenderImage {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        anchor: Anchor,
    },
    /// Train the configured variant and save a checkpoint.
    Train(Common),
    /// Score a checkpoint on the test split.
    Evaluate(Common),
    /// Leave-sensors-out protocol.
    SensorsOut(Common),
    /// Region-disjoint train/test protocol.
    Ood(Common),
    /// Train and score every variant.
    AblateAll(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateSynthetic(_) => "generate-synthetic",
            Command::Prepare(_) => "prepare",
            Command::RenderText { .. } => "render-text",
            Command::RenderImage { .. } => "render-image",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::SensorsOut(_) => "sensors-out",
            Command::Ood(_) => "ood",
            Command::AblateAll(_) => "ablate-all",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenerateSynthetic(c)
            | Command::Prepare(c)
            | Command::Train(c)
            | Command::Evaluate(c)
            | Command::SensorsOut(c)
            | Command::Ood(c)
            | Command::AblateAll(c) => c,
            Command::RenderText { common, .. } | Command::RenderImage { common, .. } => common,
        }
    }

    fn anchor_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Command::RenderText { anchor, .. } | Command::RenderImage { anchor, .. } = self {
            if let Some(r) = &anchor.region {
                out.push(format!("render.region={r}"));
            }
            if let Some(d) = anchor.day {
                out.push(format!("render.day={d}"));
            }
        }
        out
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

/// Output directory that records what it writes for the run manifest.
struct Outputs {
    dir: PathBuf,
    manifest: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Vec::new(),
        })
    }

    fn note(&mut self, key: impl Into<String>, value: impl ToString) {
        self.manifest.push((key.into(), value.to_string()));
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| CliError::Write {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, bytes).map_err(|source| CliError::Write { path, source })?;
        self.note(format!("output.{rel}"), sha256_hex(bytes));
        Ok(())
    }

    fn save_checkpoint(&mut self, rel: &str, ck: &Checkpoint) -> Result<()> {
        checkpoint::save(&self.dir.join(rel), ck)?;
        self.note(format!("output.{rel}.params_hash"), ck.model.params.content_hash());
        Ok(())
    }

    fn finish(mut self, command: &str, config: &RunConfig) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "command={command}");
        for (k, v) in config.entries() {
            let _ = writeln!(text, "config.{k}={v}");
        }
        for (k, v) in std::mem::take(&mut self.manifest) {
            let _ = writeln!(text, "{k}={v}");
        }
        let path = self.dir.join("manifest.txt");
        std::fs::write(&path, text).map_err(|source| CliError::Write { path, source })
    }
}

/// Resolved configuration of a command line.
pub fn resolve_config(cmd: &Command) -> Result<(RunConfig, Settings)> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.set);
    cfg.apply_overrides(&cmd.anchor_overrides());
    let settings = cfg.resolve()?;
    Ok((cfg, settings))
}

/// Runs one command; returns a short human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    let cmd = &cli.command;
    let (cfg, settings) = resolve_config(cmd)?;
    let mut out = Outputs::new(&cmd.common().out)?;
    let summary = match cmd {
        Command::GenerateSynthetic(_) => generate(&settings, &mut out)?,
        Command::Prepare(_) => prepare_cache(&settings, &mut out)?,
        Command::RenderText { .. } => render_text(&settings, &mut out)?,
        Command::RenderImage { .. } => render_image(&settings, &mut out)?,
        Command::Train(_) => train_cmd(&settings, &cfg, &mut out)?,
        Command::Evaluate(_) => evaluate_cmd(&settings, &mut out)?,
        Command::SensorsOut(_) => sensors_out(&settings, &cfg, &mut out)?,
        Command::Ood(_) => ood(&settings, &cfg, &mut out)?,
        Command::AblateAll(_) => ablate_all(&settings, &mut out)?,
    };
    out.finish(cmd.name(), &cfg)?;
    Ok(summary)
}

fn dataset(settings: &Settings, out: &mut Outputs) -> Result<Dataset> {
    if settings.data.source == DataSource::Csv {
        let path = settings.data.path.as_deref().expect("validated");
        let bytes = std::fs::read(path).map_err(ModelError::from)?;
        out.note("input.csv_sha256", sha256_hex(&bytes));
    }
    let ds = load_dataset(&settings.data)?;
    out.note("input.dataset_hash", ds.content_hash());
    Ok(ds)
}

fn temporal(settings: &Settings, out: &mut Outputs) -> Result<Split> {
    let split = Split::temporal(dataset(settings, out)?, settings.data.train_fraction)?;
    out.note("split.train_samples", split.train.samples().len());
    out.note("split.test_samples", split.test.samples().len());
    Ok(split)
}

fn anchor(settings: &Settings, ds: &Dataset) -> Result<(String, i64)> {
    let region = settings
        .render_region
        .clone()
        .or_else(|| ds.regions().first().cloned())
        .ok_or_else(|| CliError::Usage("dataset has no regions".into()))?;
    let day = match settings.render_day {
        Some(d) => d,
        None => ds
            .records()
            .iter()
            .filter(|r| r.region == region)
            .map(|r| r.day)
            .max()
            .ok_or_else(|| CliError::Usage(format!("no records for region {region:?}")))?,
    };
    if ds.get(&region, day).is_none() {
        return Err(CliError::Usage(format!("no record for region {region:?} on day {day}")));
    }
    Ok((region, day))
}

fn generate(settings: &Settings, out: &mut Outputs) -> Result<String> {
    if settings.data.source != DataSource::Synthetic {
        return Err(CliError::Usage("generate-synthetic requires data.source=synthetic".into()));
    }
    let ds = dataset(settings, out)?;
    out.write("dataset.csv", ds.to_csv_string().as_bytes())?;
    Ok(format!("wrote {} records", ds.records().len()))
}

fn prepare_cache(settings: &Settings, out: &mut Outputs) -> Result<String> {
    let split = temporal(settings, out)?;
    let model = build_model(settings, &split, settings.variant)?;
    let dir = format!("prepared-{}", &split.full.content_hash()[..16]);
    out.write(&format!("{dir}/vocab.txt"), model.vocab.to_text().as_bytes())?;
    let mut texts = String::from("split\tregion\tday\ttext\n");
    let mut instructions = String::from("split\tregion\tday\tinstruction\n");
    let mut images = 0;
    for (name, part) in [("train", &split.train), ("test", &split.test)] {
        let prep = prepare(part, &model)?;
        for s in &prep.samples {
            let rec = &s.record;
            let text = render_semantic(&linearize(rec, &model.schema), &rec.region, rec.day);
            let _ = writeln!(texts, "{name}\t{}\t{}\t{text}", rec.region, rec.day);
            let instr = model.vocab.detokenize(&s.instruction.ids);
            let _ = writeln!(instructions, "{name}\t{}\t{}\t{instr}", rec.region, rec.day);
            let bundle = assemble_window(part, &rec.region, rec.day, model.config.beta).map_err(ModelError::from)?;
            let img = rasterize(&bundle, &model.stats, &model.config.raster).map_err(ModelError::from)?;
            out.write(&format!("{dir}/images/{}_{}.pgm", rec.region, rec.day), &img.to_pgm())?;
            images += 1;
        }
    }
    out.write(&format!("{dir}/texts.tsv"), texts.as_bytes())?;
    out.write(&format!("{dir}/instructions.tsv"), instructions.as_bytes())?;
    Ok(format!("prepared {images} samples in {dir}"))
}

fn render_text(settings: &Settings, out: &mut Outputs) -> Result<String> {
    let split = temporal(settings, out)?;
    let (region, day) = anchor(settings, &split.full)?;
    let model = build_model(settings, &split, settings.variant)?;
    let rec = split.full.get(&region, day).expect("anchor checked");
    let lin = linearize(rec, &model.schema);
    let text = render_semantic(&lin, &region, day);
    let toks = tokenize_semantic(&lin, &region, day, &model.vocab, model.config.encoder.max_seq_len)
        .map_err(ModelError::from)?;
    let ids: Vec<String> = toks.seq.ids.iter().map(|i| i.to_string()).collect();
    let body = format!("{text}\n{}\n", ids.join(" "));
    out.write(&format!("text_{region}_{day}.txt"), body.as_bytes())?;
    out.write("vocab.txt", model.vocab.to_text().as_bytes())?;
    Ok(text)
}

fn render_image(settings: &Settings, out: &mut Outputs) -> Result<String> {
    let split = temporal(settings, out)?;
    let (region, day) = anchor(settings, &split.full)?;
    let stats = split.train.norm_stats().expect("train split has statistics");
    let bundle = assemble_window(&split.full, &region, day, settings.model.beta).map_err(ModelError::from)?;
    let img = rasterize(&bundle, stats, &settings.model.raster).map_err(ModelError::from)?;
    let name = format!("image_{region}_{day}.pgm");
    out.write(&name, &img.to_pgm())?;
    Ok(format!("wrote {name} ({}x{})", img.width, img.height))
}

fn checkpoint_of(model: Model, cfg: &RunConfig, epochs: usize, rng: RngState) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        model,
        epoch: epochs,
        rng,
    }
}

fn train_log(logs: &[crate::train::EpochLog]) -> String {
    logs.iter()
        .map(|l| serde_json::to_string(l).expect("plain record serializes") + "\n")
        .collect()
}

fn train_cmd(settings: &Settings, cfg: &RunConfig, out: &mut Outputs) -> Result<String> {
    let split = temporal(settings, out)?;
    let t = train_variant(settings, &split, settings.variant)?;
    out.write("train_log.jsonl", train_log(&t.outcome.logs).as_bytes())?;
    let last = t.outcome.logs.last().map(|l| l.mean_loss).unwrap_or(f64::NAN);
    out.save_checkpoint("checkpoint", &checkpoint_of(t.model, cfg, settings.train.epochs, t.outcome.rng))?;
    Ok(format!("trained {} epochs, final mean loss {last:.6}", settings.train.epochs))
}

fn load_checkpoint(settings: &Settings, out: &mut Outputs) -> Result<Checkpoint> {
    let dir = settings
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --set checkpoint=DIR".into()))?;
    let ck = checkpoint::load(dir)?;
    out.note("input.checkpoint_params_hash", ck.model.params.content_hash());
    Ok(ck)
}

fn checkpoint_variant(ck: &Checkpoint) -> Variant {
    ck.config.get("variant").and_then(Variant::parse).unwrap_or(Variant::Full)
}

fn standard_outputs(out: &mut Outputs, m: &Metrics, prep: &crate::model::Prepared) -> Result<()> {
    let mut regions = String::from("region,rmse,mae,count\n");
    for (r, (rmse, mae, n)) in &m.per_region {
        let _ = writeln!(regions, "{r},{rmse},{mae},{n}");
    }
    out.write("per_region.csv", regions.as_bytes())?;
    let mut preds = String::from("region,day,target,prediction\n");
    for (s, p) in prep.samples.iter().zip(&m.predictions) {
        let _ = writeln!(preds, "{},{},{},{p}", s.region, s.day, s.target);
    }
    out.write("predictions.csv", preds.as_bytes())
}

fn evaluate_cmd(settings: &Settings, out: &mut Outputs) -> Result<String> {
    let ck = load_checkpoint(settings, out)?;
    let split = temporal(settings, out)?;
    let prep = prepare(&split.test, &ck.model)?;
    let m = evaluate(&ck.model, &prep, settings.eval_batch)?;
    let row = MetricRecord::new("standard", checkpoint_variant(&ck), 0, &m, ck.model.seed);
    out.write("metrics.jsonl", json_lines(&[row]).as_bytes())?;
    standard_outputs(out, &m, &prep)?;
    out.note("baseline.constant_mean_rmse", constant_mean_rmse(&split.train, &split.test)?);
    Ok(format!("rmse {:.6} mae {:.6} over {} targets", m.rmse, m.mae, m.count))
}

fn sensors_out(settings: &Settings, cfg: &RunConfig, out: &mut Outputs) -> Result<String> {
    let split = temporal(settings, out)?;
    let sets = hidden_sets(&settings.mask, split.full.schema())?;
    let (model, variant) = if settings.checkpoint.is_some() {
        let ck = load_checkpoint(settings, out)?;
        let v = checkpoint_variant(&ck);
        (ck.model, v)
    } else {
        let t = train_variant(settings, &split, settings.variant)?;
        let ck = checkpoint_of(t.model, cfg, settings.train.epochs, t.outcome.rng);
        out.save_checkpoint("checkpoint", &ck)?;
        (ck.model, settings.variant)
    };
    let rows = leave_sensors_out(&model, &split.test, &sets, settings.eval_batch)?;
    let records: Vec<MetricRecord> = rows
        .iter()
        .map(|(n, m)| MetricRecord::new("sensors-out", variant, *n, m, model.seed))
        .collect();
    out.write("metrics.jsonl", json_lines(&records).as_bytes())?;
    let mut table = String::from("missing_count,missing_ratio,hidden,rmse,mae\n");
    let k = model.schema.k();
    for ((n, m), set) in rows.iter().zip(&sets) {
        let names: Vec<&str> = set.iter().map(|&i| model.schema.names()[i].as_str()).collect();
        let _ = writeln!(table, "{n},{},{},{},{}", *n as f64 / k as f64, names.join(";"), m.rmse, m.mae);
    }
    out.write("sensors_out.csv", table.as_bytes())?;
    out.note("mask.mode", settings.mask.mode.as_str());
    let ratio = increase_ratio(&rows).unwrap_or(f64::NAN);
    out.note("result.rmse_increase_ratio", ratio);
    Ok(format!("{} rows, rmse increase {:.2}%", rows.len(), 100.0 * ratio))
}

fn ood(settings: &Settings, cfg: &RunConfig, out: &mut Outputs) -> Result<String> {
    let split = Split::ood(dataset(settings, out)?, settings.ood_train_regions)?;
    out.note("split.train_regions", split.train.regions().join(","));
    out.note("split.test_regions", split.test.regions().join(","));
    let t = train_variant(settings, &split, settings.variant)?;
    let m = evaluate(&t.model, &t.test, settings.eval_batch)?;
    let row = MetricRecord::new("ood", settings.variant, 0, &m, settings.seed);
    out.write("metrics.jsonl", json_lines(&[row]).as_bytes())?;
    out.write("train_log.jsonl", train_log(&t.outcome.logs).as_bytes())?;
    standard_outputs(out, &m, &t.test)?;
    out.note("baseline.constant_mean_rmse", constant_mean_rmse(&split.train, &split.test)?);
    let ck = checkpoint_of(t.model, cfg, settings.train.epochs, t.outcome.rng);
    out.save_checkpoint("checkpoint", &ck)?;
    Ok(format!(
        "trained on {}, tested on {}: rmse {:.6}",
        split.train.regions().join(","),
        split.test.regions().join(","),
        m.rmse
    ))
}

fn ablate_all(settings: &Settings, out: &mut Outputs) -> Result<String> {
    let split = temporal(settings, out)?;
    let rows = ablate(settings, &split, &VARIANTS)?;
    let records: Vec<MetricRecord> = rows
        .iter()
        .map(|(v, m)| MetricRecord::new("ablation", *v, 0, m, settings.seed))
        .collect();
    out.write("metrics.jsonl", json_lines(&records).as_bytes())?;
    let full = rows.iter().find(|(v, _)| *v == Variant::Full).map(|(_, m)| m.rmse);
    let mut table = String::from("variant,rmse,mae,rmse_vs_full\n");
    for (v, m) in &rows {
        let rel = full.map(|f| m.rmse / f).unwrap_or(f64::NAN);
        let _ = writeln!(table, "{v},{},{},{rel}", m.rmse, m.mae);
    }
    out.write("ablation.csv", table.as_bytes())?;
    out.note("baseline.constant_mean_rmse", constant_mean_rmse(&split.train, &split.test)?);
    Ok(table.trim_end().replace('\n', " | "))
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return 1;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}
