//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::{FeatureSchema, ShiftSpec, SyntheticSpec};
use crate::encoders::EncoderConfig;
use crate::fusion::{FusionConfig, Variant, VARIANTS};
use crate::model::ModelConfig;
use crate::raster::RasterConfig;
use crate::smoe::SmoeConfig;
use crate::textual::DOMAIN_PRESETS;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {}", join_problems(.0))]
    Invalid(Vec<(String, String)>),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn join_problems(p: &[(String, String)]) -> String {
    p.iter().map(|(k, m)| format!("{k}: {m}")).collect::<Vec<_>>().join("; ")
}

impl ConfigError {
    pub fn keys(&self) -> Vec<&str> {
        match self {
            ConfigError::Invalid(p) => p.iter().map(|(k, _)| k.as_str()).collect(),
            ConfigError::Io { .. } => Vec::new(),
        }
    }
}

/// Every recognized key with its default.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "7"),
    ("data.source", "synthetic"),
    ("data.path", ""),
    ("data.regions", "4"),
    ("data.days", "800"),
    ("data.missing_rate", "0.2"),
    ("data.target_rate", "1.0"),
    ("data.shift_features", ""),
    ("data.shift_level", "0"),
    ("data.shift_after", "0"),
    ("data.train_fraction", "0.5"),
    ("data.domain", "synthetic"),
    ("model.d_model", "64"),
    ("model.layers", "2"),
    ("model.heads", "4"),
    ("model.ffn", "256"),
    ("model.max_seq_len", "256"),
    ("model.patch", "8"),
    ("model.cell", "64"),
    ("model.beta", "30"),
    ("smoe.experts", "4"),
    ("smoe.top_k", "2"),
    ("smoe.hidden", "256"),
    ("fusion.decoder_layers", "2"),
    ("fusion.decoder_d", "64"),
    ("fusion.decoder_heads", "4"),
    ("fusion.decoder_ffn", "256"),
    ("fusion.eta1", "1.0"),
    ("fusion.eta2", "0.5"),
    ("train.lr", "0.001"),
    ("train.weight_decay", "0.01"),
    ("train.batch_size", "16"),
    ("train.epochs", "10"),
    ("train.p_mask", "0.15"),
    ("train.grad_clip", "1.0"),
    ("variant", "full"),
    ("mask.mode", "fixed"),
    (
        "mask.features",
        "rainfall,average cloud cover fraction,groundwater temperature,subsurface temperature",
    ),
    ("mask.count", "4"),
    ("mask.seed", ""),
    ("ood.train_regions", "3"),
    ("eval.batch_size", "32"),
    ("checkpoint", ""),
    ("render.region", ""),
    ("render.day", ""),
];

/// Raw configuration: defaults overlaid with file entries and overrides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Unknown keys and malformed entries, reported by [`RunConfig::resolve`].
    rejected: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            rejected: Vec::new(),
        }
    }
}

fn split_entry(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once('=')?;
    Some((k.trim(), v.trim()))
}

impl RunConfig {
    /// Defaults overlaid with `key=value` lines; `#` starts a comment line.
    /// Unknown keys are kept aside and reported by [`RunConfig::resolve`].
    pub fn parse(text: &str) -> Self {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match split_entry(line) {
                Some((k, v)) => cfg.set(k, v),
                None => cfg
                    .rejected
                    .push((format!("line {}", n + 1), format!("expected key=value, got {line:?}"))),
            }
        }
        cfg
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::parse(&text))
    }

    fn set(&mut self, key: &str, value: &str) {
        match self.values.get_mut(key) {
            Some(slot) => *slot = value.to_string(),
            None => self.rejected.push((key.to_string(), "unknown key".to_string())),
        }
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) {
        for o in overrides {
            let o = o.as_ref();
            match split_entry(o) {
                Some((k, v)) => self.set(k, v),
                None => self.rejected.push((o.to_string(), "expected key=value".to_string())),
            }
        }
    }

    /// Builder-style override.
    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.set(key, &value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// One `key=value` line per key, sorted.
    pub fn to_text(&self) -> String {
        self.entries().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Typed settings; every invalid key is reported together.
    pub fn resolve(&self) -> Result<Settings, ConfigError> {
        let mut r = Reader {
            cfg: self,
            problems: self.rejected.clone(),
        };
        let schema = FeatureSchema::hydrology();
        let seed: u64 = r.num("seed");

        let source = match r.raw("data.source") {
            "synthetic" => DataSource::Synthetic,
            "csv" => DataSource::Csv,
            other => {
                r.bad("data.source", format!("expected synthetic or csv, got {other:?}"));
                DataSource::Synthetic
            }
        };
        let path = r.path("data.path");
        if source == DataSource::Csv && path.is_none() {
            r.bad("data.path", "required when data.source=csv".into());
        }
        let shift_names = r.list("data.shift_features");
        let mut shift_idx = Vec::new();
        for name in &shift_names {
            match schema.index_of(name) {
                Some(i) => shift_idx.push(i),
                None => r.bad("data.shift_features", format!("unknown feature {name:?}")),
            }
        }
        let shift_level: f64 = r.num("data.shift_level");
        let shift_after: i64 = r.num("data.shift_after");
        let synthetic = SyntheticSpec {
            seed,
            n_regions: r.num("data.regions"),
            total_days: r.num("data.days"),
            missing_rate: r.num("data.missing_rate"),
            target_rate: r.num("data.target_rate"),
            shift: (!shift_idx.is_empty()).then_some(ShiftSpec {
                features: shift_idx,
                level: shift_level,
                after_day: shift_after,
            }),
        };
        if !(0.0..1.0).contains(&synthetic.missing_rate) {
            r.bad("data.missing_rate", "must lie in [0, 1)".into());
        }
        if !(synthetic.target_rate > 0.0 && synthetic.target_rate <= 1.0) {
            r.bad("data.target_rate", "must lie in (0, 1]".into());
        }
        if synthetic.n_regions == 0 {
            r.bad("data.regions", "must be positive".into());
        }
        if synthetic.total_days < 400 {
            r.bad("data.days", "must be at least 400".into());
        }
        let train_fraction: f64 = r.num("data.train_fraction");
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            r.bad("data.train_fraction", "must lie in (0, 1)".into());
        }
        let domain = r.raw("data.domain").to_string();
        if !DOMAIN_PRESETS.contains(&domain.as_str()) {
            r.bad("data.domain", format!("expected one of {}", DOMAIN_PRESETS.join(", ")));
        }

        let variant = match Variant::parse(r.raw("variant")) {
            Some(v) => v,
            None => {
                let names: Vec<&str> = VARIANTS.iter().map(|v| v.as_str()).collect();
                r.bad("variant", format!("expected one of {}", names.join(", ")));
                Variant::Full
            }
        };
        let encoder = EncoderConfig {
            d_model: r.num("model.d_model"),
            n_layers: r.num("model.layers"),
            n_heads: r.num("model.heads"),
            ffn_hidden: r.num("model.ffn"),
            max_seq_len: r.num("model.max_seq_len"),
            patch_size: r.num("model.patch"),
        };
        let cell: usize = r.num("model.cell");
        if cell < 2 {
            r.bad("model.cell", "must be at least 2".into());
        } else if encoder.patch_size > 0 && !cell.is_multiple_of(encoder.patch_size) {
            r.bad("model.patch", format!("must divide the cell size {cell}"));
        }
        let beta: usize = r.num("model.beta");
        if beta < 2 {
            r.bad("model.beta", "must be at least 2".into());
        }
        let smoe = SmoeConfig {
            n_experts: r.num("smoe.experts"),
            top_k: r.num("smoe.top_k"),
            expert_hidden: r.num("smoe.hidden"),
            noise_enabled: true,
        };
        let fusion = FusionConfig {
            decoder_layers: r.num("fusion.decoder_layers"),
            decoder_d: r.num("fusion.decoder_d"),
            decoder_heads: r.num("fusion.decoder_heads"),
            decoder_ffn: r.num("fusion.decoder_ffn"),
            eta1: r.num("fusion.eta1"),
            eta2: r.num("fusion.eta2"),
            ablation: variant.ablation(),
        };
        let train = TrainConfig {
            lr: r.num("train.lr"),
            weight_decay: r.num("train.weight_decay"),
            batch_size: r.num("train.batch_size"),
            epochs: r.num("train.epochs"),
            seed,
            p_mask: r.num("train.p_mask"),
            grad_clip_norm: r.num("train.grad_clip"),
        };
        let mut module_problems = Vec::new();
        module_problems.extend(encoder.problems());
        module_problems.extend(smoe.problems());
        module_problems.extend(fusion.problems());
        module_problems.extend(train.problems());
        for (k, m) in module_problems {
            r.bad(k, m);
        }

        let mode = match r.raw("mask.mode") {
            "fixed" => MaskMode::Fixed,
            "random" => MaskMode::Random,
            other => {
                r.bad("mask.mode", format!("expected fixed or random, got {other:?}"));
                MaskMode::Fixed
            }
        };
        let features = r.list("mask.features");
        for f in &features {
            if schema.index_of(f).is_none() {
                r.bad("mask.features", format!("unknown feature {f:?}"));
            }
        }
        let count: usize = r.num("mask.count");
        let k = schema.k();
        if count == 0 || count >= k {
            r.bad("mask.count", format!("must lie in 1..{k}"));
        }
        if mode == MaskMode::Fixed && features.is_empty() {
            r.bad("mask.features", "fixed mode needs at least one feature".into());
        }
        if mode == MaskMode::Fixed && features.len() >= k {
            r.bad("mask.features", format!("at most {} features can be hidden", k - 1));
        }
        let mask_seed = if r.raw("mask.seed").is_empty() { seed } else { r.num("mask.seed") };

        let ood_train_regions: usize = r.num("ood.train_regions");
        if ood_train_regions == 0 {
            r.bad("ood.train_regions", "must be positive".into());
        }
        let eval_batch: usize = r.num("eval.batch_size");
        if eval_batch == 0 {
            r.bad("eval.batch_size", "must be positive".into());
        }
        let checkpoint = r.path("checkpoint");
        let render_region = Some(r.raw("render.region").to_string()).filter(|s| !s.is_empty());
        let render_day = if r.raw("render.day").is_empty() { None } else { Some(r.num("render.day")) };

        if !r.problems.is_empty() {
            return Err(ConfigError::Invalid(r.problems));
        }
        Ok(Settings {
            seed,
            data: DataSettings {
                source,
                path,
                synthetic,
                train_fraction,
            },
            model: ModelConfig {
                encoder,
                smoe,
                fusion,
                raster: RasterConfig::with_cell(cell),
                beta,
                domain,
            },
            train,
            variant,
            mask: MaskSettings {
                mode,
                features,
                count,
                seed: mask_seed,
            },
            ood_train_regions,
            eval_batch,
            checkpoint,
            render_region,
            render_day,
        })
    }
}

struct Reader<'a> {
    cfg: &'a RunConfig,
    problems: Vec<(String, String)>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.cfg.get(key).expect("key listed in DEFAULTS")
    }

    /// Records a problem; only the first one per key is kept.
    fn bad(&mut self, key: &str, msg: String) {
        if !self.problems.iter().any(|(k, _)| k == key) {
            self.problems.push((key.to_string(), msg));
        }
    }

    fn num<T: std::str::FromStr + Default>(&mut self, key: &str) -> T {
        let raw = self.raw(key).to_string();
        match raw.parse() {
            Ok(v) => v,
            Err(_) => {
                self.bad(key, format!("cannot parse {raw:?}"));
                T::default()
            }
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.raw(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub train_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Fixed,
    Random,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Fixed => "fixed",
            MaskMode::Random => "random",
        }
    }
}

/// Which test-time features to hide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSettings {
    pub mode: MaskMode,
    /// Hiding order in fixed mode.
    pub features: Vec<String>,
    /// Largest number of hidden features in random mode.
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub data: DataSettings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub mask: MaskSettings,
    pub ood_train_regions: usize,
    pub eval_batch: usize,
    pub checkpoint: Option<PathBuf>,
    pub render_region: Option<String>,
    pub render_day: Option<i64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let s = RunConfig::default().resolve().unwrap();
        assert_eq!(s.model.encoder.d_model, 64);
        assert_eq!(s.model.beta, 30);
        assert_eq!(s.variant, Variant::Full);
        assert_eq!(s.mask.features.len(), 4);
        assert_eq!(s.mask.seed, 7);
    }

    #[test]
    fn every_bad_key_is_reported() {
        let mut cfg = RunConfig::parse("seed=x\nbogus=1\nsmoe.top_k=9\n# fine\n");
        cfg.apply_overrides(&["variant=nope", "model.heads=3", "junk"]);
        let err = cfg.resolve().unwrap_err();
        let keys = err.keys();
        for k in ["bogus", "junk", "seed", "smoe.top_k", "variant", "model.heads"] {
            assert!(keys.contains(&k), "{k} missing from {keys:?}");
        }
        assert!(!err.to_string().contains('\n'));
    }

    #[test]
    fn text_round_trip() {
        let cfg = RunConfig::default().with("train.epochs", 3);
        let again = RunConfig::parse(&cfg.to_text());
        assert_eq!(cfg, again);
        assert!(RunConfig::default().with("nope", 1).resolve().is_err());
    }
}
