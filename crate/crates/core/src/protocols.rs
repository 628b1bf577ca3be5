//! Experiment protocols: standard split, leave-sensors-out, region OOD and
//! the variant sweep.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSettings, DataSource, MaskMode, MaskSettings, Settings};
use crate::dataset::{generate_synthetic, load_csv, split_ood_regions, split_temporal, Dataset, FeatureSchema};
use crate::fusion::Variant;
use crate::model::{build_vocabulary, prepare, Model, ModelError, Prepared, Result};
use crate::textual::DomainDescription;
use crate::train::{evaluate, rmse_mae, train, Metrics, TrainOutcome};

/// One JSON-lines metrics row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    pub protocol: String,
    pub variant: String,
    pub missing_count: usize,
    pub rmse: f64,
    pub mae: f64,
    pub seed: u64,
}

impl MetricRecord {
    pub fn new(protocol: &str, variant: Variant, missing_count: usize, m: &Metrics, seed: u64) -> Self {
        Self {
            protocol: protocol.to_string(),
            variant: variant.as_str().to_string(),
            missing_count,
            rmse: m.rmse,
            mae: m.mae,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record serializes")
    }
}

pub fn json_lines(rows: &[MetricRecord]) -> String {
    rows.iter().map(|r| r.to_json() + "\n").collect()
}

pub fn load_dataset(data: &DataSettings) -> Result<Dataset> {
    match data.source {
        DataSource::Synthetic => Ok(generate_synthetic(&data.synthetic)?),
        DataSource::Csv => {
            let path = data
                .path
                .as_deref()
                .ok_or_else(|| ModelError::Invalid("data.path is required for csv input".into()))?;
            Ok(load_csv(path, &FeatureSchema::hydrology())?)
        }
    }
}

/// Copy of `ds` with the given feature columns marked absent everywhere.
pub fn hide_features(ds: &Dataset, hidden: &[usize]) -> Dataset {
    ds.map_records(|r| {
        for &k in hidden {
            r.present[k] = false;
            r.features[k] = 0.0;
        }
    })
}

/// Nested hidden-feature sets, one per missing count `1..=n`.
pub fn hidden_sets(mask: &MaskSettings, schema: &FeatureSchema) -> Result<Vec<Vec<usize>>> {
    let k = schema.k();
    let order: Vec<usize> = match mask.mode {
        MaskMode::Fixed => mask
            .features
            .iter()
            .map(|f| {
                schema
                    .index_of(f)
                    .ok_or_else(|| ModelError::Invalid(format!("unknown feature {f:?}")))
            })
            .collect::<Result<_>>()?,
        MaskMode::Random => {
            if mask.count == 0 || mask.count >= k {
                return Err(ModelError::Invalid(format!("mask count {} outside 1..{k}", mask.count)));
            }
            let mut all: Vec<usize> = (0..k).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(mask.seed));
            all.truncate(mask.count);
            all
        }
    };
    if order.is_empty() || order.len() >= k {
        return Err(ModelError::Invalid(format!("between 1 and {} features can be hidden", k - 1)));
    }
    Ok((1..=order.len()).map(|n| order[..n].to_vec()).collect())
}

/// Relative RMSE growth from the first to the last row.
pub fn increase_ratio(rows: &[(usize, Metrics)]) -> Option<f64> {
    let first = rows.first()?.1.rmse;
    let last = rows.last()?.1.rmse;
    (first > 0.0).then(|| (last - first) / first)
}

/// Metrics on copies of `test` with each hidden set applied.
pub fn leave_sensors_out(model: &Model, test: &Dataset, sets: &[Vec<usize>], batch: usize) -> Result<Vec<(usize, Metrics)>> {
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        let masked = hide_features(test, set);
        let prep = prepare(&masked, model)?;
        out.push((set.len(), evaluate(model, &prep, batch)?));
    }
    Ok(out)
}

/// RMSE of predicting the mean training target everywhere.
pub fn constant_mean_rmse(train: &Dataset, test: &Dataset) -> Result<f64> {
    let tr: Vec<f64> = train.samples().iter().filter_map(|r| r.target).collect();
    let te: Vec<f64> = test.samples().iter().filter_map(|r| r.target).collect();
    if tr.is_empty() {
        return Err(ModelError::Invalid("training split has no targets".into()));
    }
    let mean = tr.iter().sum::<f64>() / tr.len() as f64;
    Ok(rmse_mae(&vec![mean; te.len()], &te)?.0)
}

/// Train/test datasets of one experiment.
#[derive(Clone, Debug)]
pub struct Split {
    pub full: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

impl Split {
    pub fn temporal(full: Dataset, train_fraction: f64) -> Result<Self> {
        let (train, test) = split_temporal(&full, train_fraction)?;
        Ok(Self { full, train, test })
    }

    pub fn ood(full: Dataset, n_train_regions: usize) -> Result<Self> {
        let (train, test) = split_ood_regions(&full, n_train_regions)?;
        Ok(Self { full, train, test })
    }
}

/// Untrained model for `variant`, with train-split statistics and a
/// vocabulary over every region of the full dataset.
pub fn build_model(settings: &Settings, split: &Split, variant: Variant) -> Result<Model> {
    let mut config = settings.model.clone();
    config.fusion.ablation = variant.ablation();
    let domain = DomainDescription::preset(&config.domain, split.full.regions().len())
        .ok_or_else(|| ModelError::Invalid(format!("unknown domain preset {}", config.domain)))?;
    let vocab = build_vocabulary(&split.full, &domain);
    let stats = split
        .train
        .norm_stats()
        .ok_or_else(|| ModelError::Invalid("training split lacks statistics".into()))?
        .clone();
    Model::new(config, split.full.schema().clone(), vocab, stats, settings.seed)
}

/// A trained model with its prepared test set.
pub struct Trained {
    pub model: Model,
    pub outcome: TrainOutcome,
    pub test: Prepared,
}

pub fn train_variant(settings: &Settings, split: &Split, variant: Variant) -> Result<Trained> {
    let mut model = build_model(settings, split, variant)?;
    let train_prep = prepare(&split.train, &model)?;
    let outcome = train(&mut model, &train_prep, &settings.train)?;
    let test = prepare(&split.test, &model)?;
    Ok(Trained { model, outcome, test })
}

/// Trains and scores every variant in `variants` order.
pub fn ablate(settings: &Settings, split: &Split, variants: &[Variant]) -> Result<Vec<(Variant, Metrics)>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let t = train_variant(settings, split, v)?;
        rows.push((v, evaluate(&t.model, &t.test, settings.eval_batch)?));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn fixed_sets_follow_the_listed_order() {
        let s = RunConfig::default().resolve().unwrap();
        let schema = FeatureSchema::hydrology();
        let sets = hidden_sets(&s.mask, &schema).unwrap();
        assert_eq!(sets.len(), 4);
        assert_eq!(sets[0], vec![schema.index_of("rainfall").unwrap()]);
        assert_eq!(sets[3].len(), 4);
        assert!(sets.windows(2).all(|w| w[1].starts_with(&w[0])));
    }

    #[test]
    fn random_sets_are_seeded_prefixes() {
        let s = RunConfig::default().with("mask.mode", "random").resolve().unwrap();
        let schema = FeatureSchema::hydrology();
        let a = hidden_sets(&s.mask, &schema).unwrap();
        assert_eq!(a, hidden_sets(&s.mask, &schema).unwrap());
        assert_eq!(a.len(), 4);
        let mut last = a[3].clone();
        last.sort();
        last.dedup();
        assert_eq!(last.len(), 4);
    }

    #[test]
    fn hiding_copies() {
        let s = RunConfig::default().with("data.days", 400).resolve().unwrap();
        let ds = load_dataset(&s.data).unwrap();
        let before = ds.content_hash();
        let hidden = hide_features(&ds, &[0, 3]);
        assert_eq!(ds.content_hash(), before);
        assert!(hidden.records().iter().all(|r| !r.present[0] && !r.present[3]));
    }

    #[test]
    fn json_row_fields() {
        let m = Metrics {
            rmse: 1.5,
            mae: 1.0,
            count: 2,
            per_region: Default::default(),
            predictions: vec![],
        };
        let line = MetricRecord::new("standard", Variant::Full, 0, &m, 7).to_json();
        assert_eq!(
            line,
            r#"{"protocol":"standard","variant":"full","missing_count":0,"rmse":1.5,"mae":1.0,"seed":7}"#
        );
    }
}
