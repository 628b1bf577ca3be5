//! Fusion of text and image representations with an instruction prompt
//! through a frozen causal decoder, plus the prediction head and losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Segment, Var};
use crate::encoders::{init_stack, stack_forward, StackShape};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};
use crate::textual::TokenSeq;

/// Model variants compared in ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    TextOff,
    ImageOff,
    LlmOff,
    ImpOff,
    SmoeLinear,
    MtgOff,
}

pub const VARIANTS: [Variant; 7] = [
    Variant::Full,
    Variant::TextOff,
    Variant::ImageOff,
    Variant::LlmOff,
    Variant::ImpOff,
    Variant::SmoeLinear,
    Variant::MtgOff,
];

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TextOff => "text_off",
            Variant::ImageOff => "image_off",
            Variant::LlmOff => "llm_off",
            Variant::ImpOff => "imp_off",
            Variant::SmoeLinear => "smoe_linear",
            Variant::MtgOff => "mtg_off",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        VARIANTS.into_iter().find(|v| v.as_str() == s)
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Variant::Full => {}
            Variant::TextOff => a.text_off = true,
            Variant::ImageOff => a.image_off = true,
            Variant::LlmOff => a.llm_off = true,
            Variant::ImpOff => a.imp_off = true,
            Variant::SmoeLinear => a.smoe_linear = true,
            Variant::MtgOff => a.mtg_off = true,
        }
        a
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub text_off: bool,
    pub image_off: bool,
    pub llm_off: bool,
    pub imp_off: bool,
    pub smoe_linear: bool,
    pub mtg_off: bool,
}

impl Ablation {
    /// Whether masked states are replaced by imputed ones.
    pub fn imputes(&self) -> bool {
        !self.text_off && !self.imp_off
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub decoder_layers: usize,
    pub decoder_d: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub ablation: Ablation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            decoder_layers: 2,
            decoder_d: 64,
            decoder_heads: 4,
            decoder_ffn: 256,
            eta1: 1.0,
            eta2: 0.5,
            ablation: Ablation::default(),
        }
    }
}

impl FusionConfig {
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (key, v) in [
            ("fusion.decoder_layers", self.decoder_layers),
            ("fusion.decoder_d", self.decoder_d),
            ("fusion.decoder_heads", self.decoder_heads),
            ("fusion.decoder_ffn", self.decoder_ffn),
        ] {
            if v == 0 {
                out.push((key, "must be positive".to_string()));
            }
        }
        if self.decoder_heads > 0 && !self.decoder_d.is_multiple_of(self.decoder_heads) {
            out.push((
                "fusion.decoder_heads",
                format!("decoder_d {} is not divisible by {} heads", self.decoder_d, self.decoder_heads),
            ));
        }
        for (key, v) in [("fusion.eta1", self.eta1), ("fusion.eta2", self.eta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push((key, format!("must be a finite non-negative number, got {v}")));
            }
        }
        if self.eta1 == 0.0 && self.eta2 == 0.0 {
            out.push(("fusion.eta1", "eta1 and eta2 cannot both be zero".to_string()));
        }
        if self.ablation.text_off && self.ablation.image_off {
            out.push(("variant", "text and image branches cannot both be dropped".to_string()));
        }
        out
    }

    fn stack(&self) -> StackShape {
        StackShape {
            d: self.decoder_d,
            layers: self.decoder_layers,
            heads: self.decoder_heads,
            ffn: self.decoder_ffn,
        }
    }
}

/// Frozen decoder weights, drawn from `seed` alone.
pub fn init_frozen_decoder(seed: u64, cfg: &FusionConfig, max_len: usize) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_636f_6465_7221);
    let mut store = ParamStore::new();
    store.normal("decoder.pos", &[max_len, cfg.decoder_d], 0.5, &mut rng);
    init_stack(&mut store, "decoder", cfg.stack(), &mut rng);
    store
}

/// Trainable adapters, instruction embeddings and head.
pub fn init_fusion(
    store: &mut ParamStore,
    cfg: &FusionConfig,
    u_dim: usize,
    o_dim: usize,
    vocab_len: usize,
    rng: &mut impl Rng,
) {
    let dd = cfg.decoder_d;
    store.normal("fusion.instr", &[vocab_len, dd], 0.5, rng);
    let a = cfg.ablation;
    if a.llm_off {
        let mut width = dd;
        if !a.text_off {
            width += u_dim;
        }
        if !a.image_off {
            width += o_dim;
        }
        store.linear("fusion.flat", width, dd, rng);
    } else {
        if !a.text_off {
            store.linear("fusion.proj_u", u_dim, dd, rng);
        }
        if !a.image_off {
            store.linear("fusion.proj_o", o_dim, dd, rng);
        }
    }
    store.linear("head", dd, 1, rng);
}

/// Batched fusion inputs; `u` and `o` hold one row per sample.
pub struct FusionInput<'a> {
    pub u: Option<Var>,
    pub o: Option<Var>,
    pub instructions: &'a [&'a TokenSeq],
}

/// Representation `Q` per sample, `[B × decoder_d]`.
pub fn fuse(ctx: &mut Ctx, cfg: &FusionConfig, input: &FusionInput) -> Result<Var> {
    let b = input.instructions.len();
    if b == 0 {
        return Err(TensorError::Invalid("empty fusion batch".into()));
    }
    for v in [input.u, input.o].into_iter().flatten() {
        let rows = ctx.g.value(v).shape()[0];
        if rows != b {
            return Err(TensorError::Invalid(format!(
                "fusion input has {rows} rows for {b} instructions"
            )));
        }
    }
    let mut ids = Vec::new();
    let mut instr_rows = Vec::with_capacity(b);
    for seq in input.instructions {
        if seq.is_empty() {
            return Err(TensorError::Invalid("empty instruction".into()));
        }
        instr_rows.push((ids.len()..ids.len() + seq.len()).collect::<Vec<_>>());
        ids.extend_from_slice(&seq.ids);
    }
    let table = ctx.p("fusion.instr")?;
    let ie = ctx.g.embedding(table, &ids)?;

    if cfg.ablation.llm_off {
        let mean_instr = ctx.g.group_mean(ie, &instr_rows)?;
        let mut parts = Vec::new();
        parts.extend(input.u);
        parts.extend(input.o);
        parts.push(mean_instr);
        let x = ctx.g.concat(&parts, 1)?;
        return ctx.linear(x, "fusion.flat");
    }

    // Stack [proj(U); proj(O); instruction embeddings] and reorder into one
    // contiguous segment per sample.
    let mut blocks = Vec::new();
    let mut lead = 0;
    if let Some(u) = input.u {
        blocks.push(ctx.linear(u, "fusion.proj_u")?);
        lead += 1;
    }
    if let Some(o) = input.o {
        blocks.push(ctx.linear(o, "fusion.proj_o")?);
        lead += 1;
    }
    blocks.push(ie);
    let all = ctx.g.concat(&blocks, 0)?;
    let base = lead * b;
    let mut order = Vec::with_capacity(base + ids.len());
    let mut positions = Vec::with_capacity(base + ids.len());
    let mut segments = Vec::with_capacity(b);
    let mut last = Vec::with_capacity(b);
    for (i, rows) in instr_rows.iter().enumerate() {
        let start = order.len();
        for j in 0..lead {
            order.push(j * b + i);
        }
        order.extend(rows.iter().map(|r| base + r));
        let len = order.len() - start;
        positions.extend(0..len);
        segments.push(Segment { start, len });
        last.push(order.len() - 1);
    }
    let x = ctx.g.gather_rows(all, &order)?;
    let pos_table = ctx.p("decoder.pos")?;
    let max_len = ctx.g.value(pos_table).shape()[0];
    if let Some(&p) = positions.iter().max() {
        if p >= max_len {
            return Err(TensorError::Invalid(format!(
                "decoder sequence of {} positions exceeds {max_len}",
                p + 1
            )));
        }
    }
    let pe = ctx.g.embedding(pos_table, &positions)?;
    let x = ctx.g.add(x, pe)?;
    let h = stack_forward(ctx, "decoder", cfg.stack(), x, &segments, true, None)?;
    ctx.g.gather_rows(h, &last)
}

/// `q·w + b` per row, `[B×1]`.
pub fn predict(ctx: &mut Ctx, q: Var) -> Result<Var> {
    ctx.linear(q, "head")
}

/// Root mean squared error over aligned pairs.
pub fn prediction_loss(ctx: &mut Ctx, preds: Var, targets: &[f64]) -> Result<Var> {
    let n = targets.len();
    if n == 0 {
        return Err(TensorError::Invalid("prediction loss needs at least one target".into()));
    }
    let shape = ctx.g.value(preds).shape().to_vec();
    if shape.iter().product::<usize>() != n {
        return Err(TensorError::ShapeMismatch {
            op: "prediction_loss",
            left: shape,
            right: vec![n],
        });
    }
    let t = ctx.constant(Tensor::new(shape, targets.to_vec())?);
    let diff = ctx.g.sub(preds, t)?;
    let sq = ctx.g.mul(diff, diff)?;
    let m = ctx.g.mean(sq);
    Ok(ctx.g.sqrt(m))
}

/// `η1·L_r + η2·L_i`; the imputation term is dropped when absent or disabled.
pub fn total_loss(ctx: &mut Ctx, lr: Var, li: Option<Var>, cfg: &FusionConfig) -> Result<Var> {
    let a = ctx.g.scale(lr, cfg.eta1);
    match li {
        Some(li) if !cfg.ablation.imp_off && cfg.eta2 != 0.0 => {
            let b = ctx.g.scale(li, cfg.eta2);
            ctx.g.add(a, b)
        }
        _ => Ok(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(ctx: &mut Ctx, x: f64) -> Var {
        ctx.constant(Tensor::scalar(x))
    }

    #[test]
    fn loss_hand_values() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, None, false);
        let p = ctx.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = prediction_loss(&mut ctx, p, &[3.0, 4.0]).unwrap();
        assert!((ctx.g.value(l).item() - 3.535534).abs() < 1e-6);
        assert!(prediction_loss(&mut ctx, p, &[]).is_err());

        let cfg = FusionConfig::default();
        let (lr, li) = (scalar(&mut ctx, 2.0), scalar(&mut ctx, 4.0));
        let t = total_loss(&mut ctx, lr, Some(li), &cfg).unwrap();
        assert_eq!(ctx.g.value(t).item(), 4.0);
        let off = FusionConfig {
            ablation: Variant::ImpOff.ablation(),
            ..FusionConfig::default()
        };
        let t = total_loss(&mut ctx, lr, Some(li), &off).unwrap();
        assert_eq!(ctx.g.value(t).item(), 2.0);
    }

    #[test]
    fn head_with_zero_weight_is_constant() {
        let mut store = ParamStore::new();
        store.fill("head.w", &[3, 1], 0.0);
        store.fill("head.b", &[1], 1.25);
        let mut ctx = Ctx::new(&store, None, false);
        let q = ctx.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = predict(&mut ctx, q).unwrap();
        assert_eq!(ctx.g.value(y).data(), &[1.25, 1.25]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in VARIANTS {
            assert_eq!(Variant::parse(v.as_str()), Some(v));
        }
        assert_eq!(Variant::parse("nope"), None);
    }
}
