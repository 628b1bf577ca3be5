//! Browser demo over the synthetic watershed: trend-image rendering, a
//! noisy top-k gate explorer, and the semantic text of a record.
//!
//! Every operation has a plain Rust form (tested natively) and a
//! `wasm_bindgen` export used by `www/index.html`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stfuse::dataset::{assemble_window, generate_synthetic, split_temporal, Dataset, SyntheticSpec};
use stfuse::params::{Ctx, ParamStore};
use stfuse::raster::{rasterize, RasterConfig};
use stfuse::smoe::{gate, SmoeConfig};
use stfuse::tensor::Tensor;
use stfuse::textual::{linearize, render_semantic};
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Data(#[from] stfuse::dataset::DataError),
    #[error(transparent)]
    Raster(#[from] stfuse::raster::RasterError),
    #[error(transparent)]
    Tensor(#[from] stfuse::TensorError),
}

pub type Result<T> = std::result::Result<T, DemoError>;

fn to_js(e: DemoError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

const DAYS: i64 = 800;
const REGIONS: usize = 4;

fn dataset(seed: u64, missing_rate: f64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(DemoError::Input(format!("missing rate {missing_rate} outside [0, 1)")));
    }
    Ok(generate_synthetic(&SyntheticSpec {
        seed,
        n_regions: REGIONS,
        total_days: DAYS,
        missing_rate,
        target_rate: 1.0,
        shift: None,
    })?)
}

fn region_id(ds: &Dataset, region: usize) -> Result<String> {
    ds.regions()
        .get(region)
        .cloned()
        .ok_or_else(|| DemoError::Input(format!("region index {region} outside 0..{}", ds.regions().len())))
}

/// Grayscale trend image of one record.
#[wasm_bindgen]
#[derive(Clone, Debug, PartialEq)]
pub struct TrendView {
    width: usize,
    height: usize,
    gray: Vec<u8>,
}

#[wasm_bindgen]
impl TrendView {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major 8-bit intensities.
    pub fn gray(&self) -> Vec<u8> {
        self.gray.clone()
    }
}

pub fn trend_view(seed: u64, region: usize, day: i64, beta: usize, cell: usize, missing_rate: f64) -> Result<TrendView> {
    if beta < 2 || cell < 2 {
        return Err(DemoError::Input("look-back and cell size must be at least 2".into()));
    }
    let ds = dataset(seed, missing_rate)?;
    let (train, _) = split_temporal(&ds, 0.5)?;
    let region = region_id(&ds, region)?;
    let bundle = assemble_window(&ds, &region, day, beta)?;
    let stats = train.norm_stats().expect("train split carries statistics");
    let img = rasterize(&bundle, stats, &RasterConfig::with_cell(cell))?;
    let pgm = img.to_pgm();
    let header = pgm.len() - img.width * img.height;
    Ok(TrendView {
        width: img.width,
        height: img.height,
        gray: pgm[header..].to_vec(),
    })
}

/// Dense gate weights for one row: `logits + μ·softplus(spread)` with
/// `μ ~ N(0, 1)` drawn from `noise_seed`, restricted to the top `k`.
pub fn gate_weights(logits: &[f64], spread: &[f64], k: usize, noise_seed: Option<u64>) -> Result<Vec<f64>> {
    let e = logits.len();
    if e == 0 {
        return Err(DemoError::Input("need at least one logit".into()));
    }
    if spread.len() != e {
        return Err(DemoError::Input(format!("{} spread values for {e} logits", spread.len())));
    }
    if k == 0 || k > e {
        return Err(DemoError::Input(format!("k must lie in 1..={e}")));
    }
    // a one-dimensional input of 1 makes the gate matrices equal the logits
    let mut store = ParamStore::new();
    store.insert("smoe.wg", Tensor::matrix(1, e, logits.to_vec())?);
    store.insert("smoe.wnoise", Tensor::matrix(1, e, spread.to_vec())?);
    let cfg = SmoeConfig {
        n_experts: e,
        top_k: k,
        expert_hidden: 1,
        noise_enabled: noise_seed.is_some(),
    };
    let mut ctx = Ctx::new(&store, None, false);
    let one = ctx.constant(Tensor::matrix(1, 1, vec![1.0])?);
    let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
    let (w, _) = gate(&mut ctx, one, &cfg, rng.as_mut())?;
    Ok(ctx.g.value(w).data().to_vec())
}

pub fn semantic_text(seed: u64, region: usize, day: i64, missing_rate: f64) -> Result<String> {
    let ds = dataset(seed, missing_rate)?;
    let region = region_id(&ds, region)?;
    let rec = ds
        .get(&region, day)
        .ok_or_else(|| DemoError::Input(format!("no record for {region} on day {day}")))?;
    Ok(render_semantic(&linearize(rec, ds.schema()), &region, day))
}

#[wasm_bindgen(js_name = renderTrendImage)]
pub fn render_trend_image_js(
    seed: u64,
    region: usize,
    day: i64,
    beta: usize,
    cell: usize,
    missing_rate: f64,
) -> std::result::Result<TrendView, JsValue> {
    trend_view(seed, region, day, beta, cell, missing_rate).map_err(to_js)
}

/// `noise_seed < 0` disables the noise term.
#[wasm_bindgen(js_name = gateWeights)]
pub fn gate_weights_js(logits: Vec<f64>, spread: Vec<f64>, k: usize, noise_seed: f64) -> std::result::Result<Vec<f64>, JsValue> {
    let seed = (noise_seed >= 0.0).then_some(noise_seed as u64);
    gate_weights(&logits, &spread, k, seed).map_err(to_js)
}

#[wasm_bindgen(js_name = semanticText)]
pub fn semantic_text_js(seed: u64, region: usize, day: i64, missing_rate: f64) -> std::result::Result<String, JsValue> {
    semantic_text(seed, region, day, missing_rate).map_err(to_js)
}

#[wasm_bindgen(js_name = featureCount)]
pub fn feature_count() -> usize {
    stfuse::dataset::FeatureSchema::hydrology().k()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_matches_hand_example() {
        let w = gate_weights(&[0.5, 2.0, 1.0, -1.0], &[0.0; 4], 2, None).unwrap();
        assert_eq!(w[0], 0.0);
        assert!((w[1] - 0.731059).abs() < 1e-6);
        assert!((w[2] - 0.268941).abs() < 1e-6);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn noisy_gate_keeps_k_weights() {
        for seed in 0..50 {
            let w = gate_weights(&[0.1, 0.2, 0.3, 0.4, 0.5], &[1.0; 5], 3, Some(seed)).unwrap();
            assert_eq!(w.iter().filter(|x| **x > 0.0).count(), 3);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gate_weights(&[1.0], &[1.0], 2, None).is_err());
    }

    #[test]
    fn trend_view_has_strokes() {
        let v = trend_view(7, 1, 500, 30, 16, 0.2).unwrap();
        assert_eq!(v.gray().len(), v.width() * v.height());
        assert!(v.gray().iter().any(|&p| p > 0));
        assert!(trend_view(7, 9, 500, 30, 16, 0.2).is_err());
    }

    #[test]
    fn semantic_text_shows_masks() {
        let t = semantic_text(7, 0, 400, 0.5).unwrap();
        assert!(t.starts_with("On day 400 in region r00."));
        assert!(t.contains("[MASK]"));
    }
}
