//! Checkpoint directories: a `key=value` manifest, the vocabulary, and one
//! little-endian raw `f64` file per trainable parameter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{FeatureSchema, NormStats, VarStats};
use crate::model::{Model, ModelError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::textual::Vocabulary;
use crate::train::RngState;

pub const MANIFEST: &str = "manifest.txt";
pub const VOCAB: &str = "vocab.txt";
pub const PARAM_DIR: &str = "params";
const FORMAT: &str = "stfuse-checkpoint-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Resolved configuration of the run that produced the model.
    pub config: RunConfig,
    pub epoch: usize,
    pub rng: RngState,
}

pub fn schema_hash(schema: &FeatureSchema) -> String {
    let mut h = Sha256::new();
    for (n, u) in schema.names().iter().zip(schema.units()) {
        h.update(n.as_bytes());
        h.update([0]);
        h.update(u.as_bytes());
        h.update([1]);
    }
    h.update(schema.target_name().as_bytes());
    crate::dataset::hex_digest(h)
}

fn stat_entry(s: VarStats) -> String {
    format!("{:016x},{:016x}", s.mean.to_bits(), s.std.to_bits())
}

fn parse_stat(v: &str) -> Option<VarStats> {
    let (m, s) = v.split_once(',')?;
    Some(VarStats {
        mean: f64::from_bits(u64::from_str_radix(m, 16).ok()?),
        std: f64::from_bits(u64::from_str_radix(s, 16).ok()?),
    })
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn param_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(PARAM_DIR).join(format!("{name}.f64"))
}

pub fn manifest_text(ck: &Checkpoint) -> Result<String> {
    let m = &ck.model;
    let mut s = String::new();
    let mut line = |k: &str, v: &str| {
        let _ = writeln!(s, "{k}={v}");
    };
    line("format", FORMAT);
    line("epoch", &ck.epoch.to_string());
    line("seed", &m.seed.to_string());
    line("rng.seed", &ck.rng.seed.to_string());
    line("rng.word_pos", &ck.rng.word_pos.to_string());
    line("schema.hash", &schema_hash(&m.schema));
    for (key, items) in [
        ("schema.features", m.schema.names()),
        ("schema.units", m.schema.units()),
    ] {
        if items.iter().any(|x| x.contains(',') || x.contains('\n')) {
            return Err(bad(format!("{key} entries may not contain commas")));
        }
        line(key, &items.join(","));
    }
    line("schema.target", m.schema.target_name());
    line("frozen.hash", &m.frozen.content_hash());
    line("params.hash", &m.params.content_hash());
    for (i, st) in m.stats.features.iter().enumerate() {
        line(&format!("stats.{i}"), &stat_entry(*st));
    }
    line("stats.target", &stat_entry(m.stats.target));
    for (name, t) in m.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        line(&format!("param.{name}"), &dims.join("x"));
    }
    for (k, v) in ck.config.entries() {
        line(&format!("config.{k}"), v);
    }
    Ok(s)
}

pub fn save(dir: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir.join(PARAM_DIR))?;
    std::fs::write(dir.join(MANIFEST), manifest_text(ck)?)?;
    ck.model.vocab.save(&dir.join(VOCAB))?;
    for (name, t) in ck.model.params.iter() {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(param_file(dir, name), bytes)?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| bad(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let mut kv = BTreeMap::new();
    let mut params = Vec::new();
    let mut config_lines = String::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
        if let Some(name) = k.strip_prefix("param.") {
            params.push((name.to_string(), v.to_string()));
        } else if let Some(key) = k.strip_prefix("config.") {
            let _ = writeln!(config_lines, "{key}={v}");
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| kv.get(k).map(|s| s.as_str()).ok_or_else(|| bad(format!("manifest lacks {k}")));
    if get("format")? != FORMAT {
        return Err(bad(format!("unsupported format {}", get("format")?)));
    }
    let num = |k: &str| -> Result<u128> { get(k)?.parse().map_err(|_| bad(format!("bad {k}"))) };
    let epoch = num("epoch")? as usize;
    let seed = num("seed")? as u64;
    let rng = RngState {
        seed: num("rng.seed")? as u64,
        word_pos: num("rng.word_pos")?,
    };
    let split = |k: &str| -> Result<Vec<String>> { Ok(get(k)?.split(',').map(str::to_string).collect()) };
    let schema = FeatureSchema::new(split("schema.features")?, split("schema.units")?, get("schema.target")?)
        .map_err(|e| bad(e.to_string()))?;
    if schema_hash(&schema) != get("schema.hash")? {
        return Err(bad("schema hash mismatch"));
    }
    let mut features = Vec::with_capacity(schema.k());
    for i in 0..schema.k() {
        features.push(parse_stat(get(&format!("stats.{i}"))?).ok_or_else(|| bad(format!("bad stats.{i}")))?);
    }
    let target = parse_stat(get("stats.target")?).ok_or_else(|| bad("bad stats.target"))?;
    let stats = NormStats { features, target };

    let config = RunConfig::parse(&config_lines);
    let settings = config.resolve().map_err(|e| bad(e.to_string()))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB))?;

    let mut store = ParamStore::new();
    for (name, dims) in params {
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| bad(format!("bad shape for {name}"))))
            .collect::<Result<_>>()?;
        let bytes = std::fs::read(param_file(dir, &name))?;
        let n: usize = shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(bad(format!("{name}: expected {} bytes, found {}", n * 8, bytes.len())));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    if store.content_hash() != get("params.hash")? {
        return Err(bad("parameter files do not match the manifest hash"));
    }
    let model = Model::from_parts(settings.model, schema, vocab, stats, store, seed)?;
    if model.frozen.content_hash() != get("frozen.hash")? {
        return Err(bad("frozen decoder does not match the manifest"));
    }
    Ok(Checkpoint {
        model,
        config,
        epoch,
        rng,
    })
}
