//! The full predictor: configuration, parameters, phase-1 preparation of
//! samples, and the batched forward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Var;
use crate::dataset::{assemble_window, DataError, Dataset, FeatureSchema, NormStats, Record};
use crate::encoders::{
    encode_granularities, encode_patches, encode_text_batch, init_text_encoder, init_vision_encoder, patch_grid,
    patchify, EncoderConfig,
};
use crate::fusion::{fuse, init_frozen_decoder, init_fusion, predict, FusionConfig, FusionInput};
use crate::params::{Ctx, ParamStore};
use crate::raster::{rasterize, window_series, RasterConfig, RasterError};
use crate::smoe::{impute, impute_linear, imputation_loss, init_experts, init_linear_imputer, SmoeConfig};
use crate::tensor::{Tensor, TensorError};
use crate::textual::{
    domain_instruction, linearize, tokenize, tokenize_semantic, DomainDescription, SemanticTokens, TextError,
    TokenSeq, Vocabulary,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub smoe: SmoeConfig,
    pub fusion: FusionConfig,
    pub raster: RasterConfig,
    /// Look-back window of the trend image, in days.
    pub beta: usize,
    /// Name of a [`DomainDescription`] preset.
    pub domain: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            smoe: SmoeConfig::default(),
            fusion: FusionConfig::default(),
            raster: RasterConfig::default(),
            beta: 30,
            domain: "synthetic".to_string(),
        }
    }
}

impl ModelConfig {
    /// Image `(width, height)` for `k` features plus the target.
    pub fn image_dims(&self, k: usize) -> Result<(usize, usize)> {
        let (cols, rows) = self.raster.grid(k + 1)?;
        Ok((cols * self.raster.cell_w, rows * self.raster.cell_h))
    }
}

/// Trainable and frozen parameters plus everything needed to feed them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: FeatureSchema,
    pub vocab: Vocabulary,
    pub stats: NormStats,
    pub params: ParamStore,
    pub frozen: ParamStore,
    pub seed: u64,
}

impl Model {
    pub fn new(config: ModelConfig, schema: FeatureSchema, vocab: Vocabulary, stats: NormStats, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::init_params(&config, &schema, vocab.len(), &mut rng)?;
        let frozen = Self::init_frozen(&config, seed);
        Ok(Self {
            config,
            schema,
            vocab,
            stats,
            params,
            frozen,
            seed,
        })
    }

    fn init_frozen(config: &ModelConfig, seed: u64) -> ParamStore {
        if config.fusion.ablation.llm_off {
            ParamStore::new()
        } else {
            init_frozen_decoder(seed, &config.fusion, config.encoder.max_seq_len + 2)
        }
    }

    fn init_params(config: &ModelConfig, schema: &FeatureSchema, vocab_len: usize, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
        let enc = &config.encoder;
        let a = config.fusion.ablation;
        let (w, h) = config.image_dims(schema.k())?;
        if !config.raster.cell_w.is_multiple_of(enc.patch_size) || !config.raster.cell_h.is_multiple_of(enc.patch_size) {
            return Err(ModelError::Invalid(format!(
                "patch size {} does not divide {}x{} cells",
                enc.patch_size, config.raster.cell_w, config.raster.cell_h
            )));
        }
        let mut store = ParamStore::new();
        let d = enc.d_model;
        if !a.text_off {
            init_text_encoder(&mut store, enc, vocab_len, rng);
            if !a.imp_off {
                if a.smoe_linear {
                    init_linear_imputer(&mut store, d, rng);
                } else {
                    init_experts(&mut store, d, &config.smoe, rng);
                }
            }
        }
        if !a.image_off {
            init_vision_encoder(&mut store, enc, w, h, rng)?;
        }
        let u_dim = if a.mtg_off { d } else { 3 * d };
        init_fusion(&mut store, &config.fusion, u_dim, d, vocab_len, rng);
        Ok(store)
    }

    /// Rebuilds a model around stored parameters; the frozen decoder is
    /// regenerated from `seed`.
    pub fn from_parts(
        config: ModelConfig,
        schema: FeatureSchema,
        vocab: Vocabulary,
        stats: NormStats,
        params: ParamStore,
        seed: u64,
    ) -> Result<Self> {
        let template = Self::new(config, schema, vocab, stats, seed)?;
        for (name, t) in template.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(ModelError::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(ModelError::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self { params, ..template })
    }

    pub fn domain(&self, n_regions: usize) -> Result<DomainDescription> {
        DomainDescription::preset(&self.config.domain, n_regions)
            .ok_or_else(|| ModelError::Invalid(format!("unknown domain preset {}", self.config.domain)))
    }
}

/// Vocabulary covering every region of `ds` and the instruction preset.
pub fn build_vocabulary(ds: &Dataset, domain: &DomainDescription) -> Vocabulary {
    Vocabulary::build(
        ds.schema(),
        ds.regions(),
        &[domain.dataset.clone(), domain.task.clone()],
    )
}

/// Phase-1 artifacts for one target record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub region: String,
    pub day: i64,
    /// Raw target.
    pub target: f64,
    pub record: Record,
    /// Indices into [`Prepared::texts`].
    pub current: usize,
    pub weekly: Vec<usize>,
    pub yearly: Vec<usize>,
    /// Patch matrix of the trend image.
    pub patches: Tensor,
    pub instruction: TokenSeq,
}

/// Token sequences of every record a sample refers to, and the samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prepared {
    pub keys: Vec<(String, i64)>,
    pub texts: Vec<SemanticTokens>,
    pub samples: Vec<Sample>,
}

struct TextCache<'a> {
    model: &'a Model,
    index: HashMap<(String, i64), usize>,
    out: Prepared,
}

impl TextCache<'_> {
    fn intern(&mut self, rec: &Record) -> Result<usize> {
        let key = (rec.region.clone(), rec.day);
        if let Some(&i) = self.index.get(&key) {
            return Ok(i);
        }
        let lin = linearize(rec, &self.model.schema);
        let toks = tokenize_semantic(&lin, &rec.region, rec.day, &self.model.vocab, self.model.config.encoder.max_seq_len)?;
        let i = self.out.texts.len();
        self.out.texts.push(toks);
        self.out.keys.push(key.clone());
        self.index.insert(key, i);
        Ok(i)
    }
}

/// Phase 1: token sequences, trend images and instructions for every
/// sample of `ds`.
pub fn prepare(ds: &Dataset, model: &Model) -> Result<Prepared> {
    if ds.schema() != &model.schema {
        return Err(ModelError::Invalid("dataset schema differs from the model schema".into()));
    }
    let domain = model.domain(ds.regions().len())?;
    let cfg = &model.config;
    let (w, h) = cfg.image_dims(ds.schema().k())?;
    patch_grid(w, h, cfg.encoder.patch_size)?;
    let k = ds.schema().k();
    let mut cache = TextCache {
        model,
        index: HashMap::new(),
        out: Prepared::default(),
    };
    let samples: Vec<Record> = ds.samples().into_iter().cloned().collect();
    for rec in samples {
        let bundle = assemble_window(ds, &rec.region, rec.day, cfg.beta)?;
        let current = cache.intern(&bundle.current)?;
        let weekly = bundle.weekly.iter().map(|r| cache.intern(r)).collect::<Result<Vec<_>>>()?;
        let yearly = bundle.yearly.iter().map(|r| cache.intern(r)).collect::<Result<Vec<_>>>()?;
        let patches = if cfg.fusion.ablation.image_off {
            Tensor::scalar(0.0)
        } else {
            let img = rasterize(&bundle, &model.stats, &cfg.raster)?;
            patchify(&img, cfg.encoder.patch_size)?
        };
        let history: Vec<f64> = window_series(&bundle, k).into_iter().flatten().collect();
        let text = domain_instruction(&domain.dataset, &domain.task, &history);
        let instruction = tokenize(&text, &model.vocab, cfg.encoder.max_seq_len)?;
        cache.out.samples.push(Sample {
            region: rec.region.clone(),
            day: rec.day,
            target: rec.target.expect("samples carry targets"),
            record: rec,
            current,
            weekly,
            yearly,
            patches,
            instruction,
        });
    }
    Ok(cache.out)
}

/// Training-time options of a forward pass.
pub struct TrainStep<'r> {
    pub rng: &'r mut ChaCha8Rng,
    /// Probability of additionally masking each present feature of the
    /// current record.
    pub p_mask: f64,
}

pub struct ForwardOut {
    /// Normalized predictions `[B×1]`.
    pub preds: Var,
    /// Imputation loss over artificially masked features, when any.
    pub li: Option<Var>,
    /// Rows entering the imputation loss.
    pub li_pairs: usize,
    /// Mask tokens added to current records beyond the genuine ones.
    pub artificial_masks: usize,
}

/// Current-record variant with extra masked features.
struct Masked {
    seq: TokenSeq,
    /// `(mask index within seq, feature)` for each artificial mask.
    artificial: Vec<(usize, usize)>,
}

fn mask_current(model: &Model, sample: &Sample, text: &SemanticTokens, p_mask: f64, rng: &mut ChaCha8Rng) -> Result<Option<Masked>> {
    let rec = &sample.record;
    let mut chosen = Vec::new();
    for kf in 0..rec.features.len() {
        // one draw per feature keeps the stream aligned regardless of presence
        let draw: f64 = rng.random();
        if rec.present[kf] && draw < p_mask && kf < text.value_spans.len() {
            chosen.push(kf);
        }
    }
    if chosen.is_empty() {
        return Ok(None);
    }
    let mut masked = rec.clone();
    for &kf in &chosen {
        masked.present[kf] = false;
    }
    let lin = linearize(&masked, &model.schema);
    let toks = tokenize_semantic(&lin, &rec.region, rec.day, &model.vocab, model.config.encoder.max_seq_len)?;
    let absent: Vec<usize> = (0..masked.features.len()).filter(|&i| !masked.present[i]).collect();
    let artificial = chosen
        .iter()
        .map(|kf| (absent.iter().position(|a| a == kf).expect("masked feature is absent"), *kf))
        .collect();
    Ok(Some(Masked {
        seq: toks.seq,
        artificial,
    }))
}

/// Teacher rows: mean encoder state over each feature's value tokens in the
/// unmasked sequence, computed without gradient tracking.
fn teacher_rows(model: &Model, texts: &[&SemanticTokens], features: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut ctx = Ctx::new(&model.params, Some(&model.frozen), false);
    let seqs: Vec<&TokenSeq> = texts.iter().map(|t| &t.seq).collect();
    let batch = encode_text_batch(&mut ctx, &model.config.encoder, &seqs)?;
    let states = ctx.g.value(batch.states);
    let d = model.config.encoder.d_model;
    let mut out = Vec::new();
    for (i, feats) in features.iter().enumerate() {
        let start = batch.segments[i].start;
        for &kf in feats {
            let span = texts[i].value_spans[kf].clone();
            let mut acc = vec![0.0; d];
            for r in span.clone() {
                for (a, v) in acc.iter_mut().zip(states.row(start + r)) {
                    *a += v;
                }
            }
            let n = span.len().max(1) as f64;
            out.extend(acc.into_iter().map(|a| a / n));
        }
    }
    Ok(out)
}

/// Batched forward pass over `batch` (indices into `prep.samples`).
/// Without `train`, gating noise and artificial masking are off.
pub fn forward(ctx: &mut Ctx, model: &Model, prep: &Prepared, batch: &[usize], mut train: Option<TrainStep>) -> Result<ForwardOut> {
    let cfg = &model.config;
    let a = cfg.fusion.ablation;
    let b = batch.len();
    if b == 0 {
        return Err(ModelError::Invalid("empty batch".into()));
    }
    let samples: Vec<&Sample> = batch
        .iter()
        .map(|&i| prep.samples.get(i).ok_or_else(|| ModelError::Invalid(format!("sample {i} out of range"))))
        .collect::<Result<_>>()?;

    let mut u = None;
    let mut li = None;
    let mut li_pairs = 0;
    let mut artificial_masks = 0;
    if !a.text_off {
        let mut masked: Vec<Option<Masked>> = Vec::with_capacity(b);
        for s in &samples {
            let m = match train.as_mut() {
                Some(step) if step.p_mask > 0.0 && a.imputes() => {
                    mask_current(model, s, &prep.texts[s.current], step.p_mask, step.rng)?
                }
                _ => None,
            };
            if let Some(m) = &m {
                artificial_masks += m.seq.mask_count() - prep.texts[s.current].seq.mask_count();
            }
            masked.push(m);
        }

        // unique sequences in first-use order; `None` marks a masked current record
        let mut srcs: Vec<(Option<usize>, usize)> = Vec::new();
        let mut local: HashMap<usize, usize> = HashMap::new();
        let mut shared = |id: usize, srcs: &mut Vec<(Option<usize>, usize)>| -> usize {
            *local.entry(id).or_insert_with(|| {
                srcs.push((Some(id), 0));
                srcs.len() - 1
            })
        };
        let mut cur_idx = Vec::with_capacity(b);
        let mut weekly = Vec::with_capacity(b);
        let mut yearly = Vec::with_capacity(b);
        for (i, (s, m)) in samples.iter().zip(&masked).enumerate() {
            let c = match m {
                Some(_) => {
                    srcs.push((None, i));
                    srcs.len() - 1
                }
                None => shared(s.current, &mut srcs),
            };
            cur_idx.push(c);
            weekly.push(s.weekly.iter().map(|&i| shared(i, &mut srcs)).collect::<Vec<_>>());
            yearly.push(s.yearly.iter().map(|&i| shared(i, &mut srcs)).collect::<Vec<_>>());
        }
        let seqs: Vec<&TokenSeq> = srcs
            .iter()
            .map(|&(id, i)| match id {
                Some(id) => &prep.texts[id].seq,
                None => &masked[i].as_ref().expect("masked record").seq,
            })
            .collect();

        let tb = encode_text_batch(ctx, &cfg.encoder, &seqs)?;
        let mut states = tb.states;
        if a.imputes() && !tb.mask_rows.is_empty() {
            let m = ctx.g.gather_rows(tb.states, &tb.mask_rows)?;
            let imputed = if a.smoe_linear {
                impute_linear(ctx, m)?
            } else {
                let noise = train.as_mut().map(|s| &mut *s.rng);
                impute(ctx, m, &cfg.smoe, noise)?.0
            };
            states = ctx.g.replace_rows(states, &tb.mask_rows, imputed)?;

            // supervision pairs for artificially masked features
            let mut offsets = Vec::with_capacity(seqs.len());
            let mut acc = 0;
            for sq in &seqs {
                offsets.push(acc);
                acc += sq.mask_positions.len();
            }
            let mut rows = Vec::new();
            let mut teach_texts = Vec::new();
            let mut teach_feats = Vec::new();
            for (i, m) in masked.iter().enumerate() {
                if let Some(m) = m {
                    rows.extend(m.artificial.iter().map(|(h, _)| offsets[cur_idx[i]] + h));
                    teach_texts.push(&prep.texts[samples[i].current]);
                    teach_feats.push(m.artificial.iter().map(|(_, kf)| *kf).collect::<Vec<_>>());
                }
            }
            if !rows.is_empty() {
                let teacher = teacher_rows(model, &teach_texts, &teach_feats)?;
                let d = cfg.encoder.d_model;
                let teacher = Tensor::matrix(rows.len(), d, teacher)?;
                let picked = ctx.g.gather_rows(imputed, &rows)?;
                li = imputation_loss(ctx, picked, &teacher)?;
                li_pairs = rows.len();
            }
        }
        let pooled = tb.pool(ctx, states)?;
        u = Some(encode_granularities(ctx, pooled, &cur_idx, &weekly, &yearly, a.mtg_off)?);
    }

    let mut o = None;
    if !a.image_off {
        let (w, h) = cfg.image_dims(model.schema.k())?;
        let grid = patch_grid(w, h, cfg.encoder.patch_size)?;
        let patches: Vec<&Tensor> = samples.iter().map(|s| &s.patches).collect();
        o = Some(encode_patches(ctx, &cfg.encoder, grid, &patches)?.pooled);
    }

    let instructions: Vec<&TokenSeq> = samples.iter().map(|s| &s.instruction).collect();
    let q = fuse(ctx, &cfg.fusion, &FusionInput { u, o, instructions: &instructions })?;
    let preds = predict(ctx, q)?;
    Ok(ForwardOut {
        preds,
        li,
        li_pairs,
        artificial_masks,
    })
}
