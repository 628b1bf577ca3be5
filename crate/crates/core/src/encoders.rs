//! Transformer encoders for token sequences and trend images.

use rand::Rng;

use crate::autodiff::{Segment, Var};
use crate::params::{Ctx, ParamStore};
use crate::raster::TrendImage;
use crate::tensor::{Result, Tensor, TensorError};
use crate::textual::{TokenSeq, PAD_ID};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub patch_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_hidden: 256,
            max_seq_len: 256,
            patch_size: 8,
        }
    }
}

impl EncoderConfig {
    /// Every violated constraint, as `(key, message)` pairs.
    pub fn problems(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (key, v) in [
            ("model.d_model", self.d_model),
            ("model.layers", self.n_layers),
            ("model.heads", self.n_heads),
            ("model.ffn", self.ffn_hidden),
            ("model.max_seq_len", self.max_seq_len),
            ("model.patch", self.patch_size),
        ] {
            if v == 0 {
                out.push((key, "must be positive".to_string()));
            }
        }
        if self.n_heads > 0 && !self.d_model.is_multiple_of(self.n_heads) {
            out.push((
                "model.heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        out
    }
}

/// Widths of one stack of post-norm transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackShape {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

pub fn init_stack(store: &mut ParamStore, prefix: &str, s: StackShape, rng: &mut impl Rng) {
    for l in 0..s.layers {
        let p = format!("{prefix}.l{l}");
        for part in ["q", "k", "v", "o"] {
            store.linear(&format!("{p}.{part}"), s.d, s.d, rng);
        }
        store.layer_norm(&format!("{p}.ln1"), s.d);
        store.linear(&format!("{p}.ff1"), s.d, s.ffn, rng);
        store.linear(&format!("{p}.ff2"), s.ffn, s.d, rng);
        store.layer_norm(&format!("{p}.ln2"), s.d);
    }
}

/// `x = LN(x + Attn(x)); x = LN(x + FFN(x))` per layer over packed segments.
#[allow(clippy::too_many_arguments)]
pub fn stack_forward(
    ctx: &mut Ctx,
    prefix: &str,
    s: StackShape,
    mut x: Var,
    segments: &[Segment],
    causal: bool,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    for l in 0..s.layers {
        let p = format!("{prefix}.l{l}");
        let q = ctx.linear(x, &format!("{p}.q"))?;
        let k = ctx.linear(x, &format!("{p}.k"))?;
        let v = ctx.linear(x, &format!("{p}.v"))?;
        let a = ctx.g.attention(q, k, v, segments, s.heads, causal, key_valid)?;
        let o = ctx.linear(a, &format!("{p}.o"))?;
        let r = ctx.g.add(x, o)?;
        x = ctx.layer_norm(r, &format!("{p}.ln1"))?;
        let h = ctx.linear(x, &format!("{p}.ff1"))?;
        let h = ctx.g.gelu(h);
        let h = ctx.linear(h, &format!("{p}.ff2"))?;
        let r = ctx.g.add(x, h)?;
        x = ctx.layer_norm(r, &format!("{p}.ln2"))?;
    }
    Ok(x)
}

fn stack_shape(cfg: &EncoderConfig) -> StackShape {
    StackShape {
        d: cfg.d_model,
        layers: cfg.n_layers,
        heads: cfg.n_heads,
        ffn: cfg.ffn_hidden,
    }
}

const EMBED_STD: f64 = 0.5;

pub fn init_text_encoder(store: &mut ParamStore, cfg: &EncoderConfig, vocab_len: usize, rng: &mut impl Rng) {
    store.normal("text.tok", &[vocab_len, cfg.d_model], EMBED_STD, rng);
    store.normal("text.pos", &[cfg.max_seq_len, cfg.d_model], EMBED_STD, rng);
    init_stack(store, "text", stack_shape(cfg), rng);
}

/// Packed encoder states of several token sequences.
#[derive(Clone, Debug)]
pub struct TextBatch {
    /// `[ΣL × d]`, sequence `i` at rows `segments[i]`.
    pub states: Var,
    pub segments: Vec<Segment>,
    /// Global row of every mask token, sequence by sequence.
    pub mask_rows: Vec<usize>,
    /// Global rows of the non-pad tokens of each sequence.
    pub content_rows: Vec<Vec<usize>>,
}

impl TextBatch {
    /// Mean over non-pad rows of `states` per sequence, `[S×d]`.
    pub fn pool(&self, ctx: &mut Ctx, states: Var) -> Result<Var> {
        ctx.g.group_mean(states, &self.content_rows)
    }
}

pub fn encode_text_batch(ctx: &mut Ctx, cfg: &EncoderConfig, seqs: &[&TokenSeq]) -> Result<TextBatch> {
    if seqs.is_empty() {
        return Err(TensorError::Invalid("no sequences to encode".into()));
    }
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::with_capacity(seqs.len());
    let mut mask_rows = Vec::new();
    let mut content_rows = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.is_empty() {
            return Err(TensorError::Invalid("empty token sequence".into()));
        }
        if seq.len() > cfg.max_seq_len {
            return Err(TensorError::Invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                seq.len(),
                cfg.max_seq_len
            )));
        }
        let start = ids.len();
        ids.extend_from_slice(&seq.ids);
        pos.extend(0..seq.len());
        segments.push(Segment { start, len: seq.len() });
        mask_rows.extend(seq.mask_positions.iter().map(|p| start + p));
        let mut rows: Vec<usize> = (0..seq.len()).filter(|&i| seq.ids[i] != PAD_ID).map(|i| start + i).collect();
        if rows.is_empty() {
            rows = (start..start + seq.len()).collect();
        }
        content_rows.push(rows);
    }
    let valid: Vec<bool> = ids.iter().map(|&i| i != PAD_ID).collect();
    let tok = ctx.p("text.tok")?;
    let pos_table = ctx.p("text.pos")?;
    let e = ctx.g.embedding(tok, &ids)?;
    let pe = ctx.g.embedding(pos_table, &pos)?;
    let x = ctx.g.add(e, pe)?;
    let key_valid = if valid.iter().all(|&v| v) { None } else { Some(valid.as_slice()) };
    let states = stack_forward(ctx, "text", stack_shape(cfg), x, &segments, false, key_valid)?;
    Ok(TextBatch {
        states,
        segments,
        mask_rows,
        content_rows,
    })
}

/// Encoding of one sequence; rows of `token_states` follow token order.
#[derive(Clone, Debug)]
pub struct SemanticEncoding {
    pub token_states: Var,
    /// Row index of the h-th mask token.
    pub mask_positions: Vec<usize>,
    pub pooled: Var,
}

impl SemanticEncoding {
    /// `[H×d]`, or `None` without masks.
    pub fn mask_states(&self, ctx: &mut Ctx) -> Result<Option<Var>> {
        if self.mask_positions.is_empty() {
            return Ok(None);
        }
        ctx.g.gather_rows(self.token_states, &self.mask_positions).map(Some)
    }
}

pub fn encode_text(ctx: &mut Ctx, cfg: &EncoderConfig, seq: &TokenSeq) -> Result<SemanticEncoding> {
    let batch = encode_text_batch(ctx, cfg, &[seq])?;
    let pooled = batch.pool(ctx, batch.states)?;
    let d = cfg.d_model;
    let pooled = ctx.g.reshape(pooled, vec![d])?;
    Ok(SemanticEncoding {
        token_states: batch.states,
        mask_positions: seq.mask_positions.clone(),
        pooled,
    })
}

/// `(grid_cols, grid_rows)` of patches for an image.
pub fn patch_grid(width: usize, height: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(TensorError::Invalid(format!(
            "image {width}x{height} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((width / patch, height / patch))
}

/// Non-overlapping patches, row-major over the grid, each flattened row-major.
pub fn patchify(img: &TrendImage, patch: usize) -> Result<Tensor> {
    let (gw, gh) = patch_grid(img.width, img.height, patch)?;
    let mut data = Vec::with_capacity(img.width * img.height);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * img.width + px * patch;
                data.extend_from_slice(&img.pixels[row..row + patch]);
            }
        }
    }
    Tensor::matrix(gw * gh, patch * patch, data)
}

pub fn init_vision_encoder(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    width: usize,
    height: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let (gw, gh) = patch_grid(width, height, cfg.patch_size)?;
    store.linear("vision.patch", cfg.patch_size * cfg.patch_size, cfg.d_model, rng);
    store.normal("vision.row", &[gh, cfg.d_model], EMBED_STD, rng);
    store.normal("vision.col", &[gw, cfg.d_model], EMBED_STD, rng);
    init_stack(store, "vision", stack_shape(cfg), rng);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct VisualBatch {
    /// `[B·P × d]`.
    pub patch_states: Var,
    /// `[B×d]`.
    pub pooled: Var,
    pub patches_per_image: usize,
}

/// Encodes images given as pre-extracted patch matrices (see [`patchify`]),
/// all from the same grid.
pub fn encode_patches(ctx: &mut Ctx, cfg: &EncoderConfig, grid: (usize, usize), patches: &[&Tensor]) -> Result<VisualBatch> {
    let (gw, gh) = grid;
    let per = gw * gh;
    let p2 = cfg.patch_size * cfg.patch_size;
    if patches.is_empty() {
        return Err(TensorError::Invalid("no images to encode".into()));
    }
    let mut data = Vec::with_capacity(patches.len() * per * p2);
    for t in patches {
        if t.shape() != [per, p2] {
            return Err(TensorError::Invalid(format!(
                "patch matrix {:?} does not match grid {gw}x{gh} of {p2}-pixel patches",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let b = patches.len();
    let x = ctx.constant(Tensor::matrix(b * per, p2, data)?);
    let x = ctx.linear(x, "vision.patch")?;
    let rows: Vec<usize> = (0..b * per).map(|i| (i % per) / gw).collect();
    let cols: Vec<usize> = (0..b * per).map(|i| (i % per) % gw).collect();
    let row_table = ctx.p("vision.row")?;
    let col_table = ctx.p("vision.col")?;
    let re = ctx.g.embedding(row_table, &rows)?;
    let ce = ctx.g.embedding(col_table, &cols)?;
    let x = ctx.g.add(x, re)?;
    let x = ctx.g.add(x, ce)?;
    let segments: Vec<Segment> = (0..b).map(|i| Segment { start: i * per, len: per }).collect();
    let states = stack_forward(ctx, "vision", stack_shape(cfg), x, &segments, false, None)?;
    let groups: Vec<Vec<usize>> = (0..b).map(|i| (i * per..(i + 1) * per).collect()).collect();
    let pooled = ctx.g.group_mean(states, &groups)?;
    Ok(VisualBatch {
        patch_states: states,
        pooled,
        patches_per_image: per,
    })
}

pub fn encode_image(ctx: &mut Ctx, cfg: &EncoderConfig, img: &TrendImage) -> Result<VisualBatch> {
    let grid = patch_grid(img.width, img.height, cfg.patch_size)?;
    let patches = patchify(img, cfg.patch_size)?;
    encode_patches(ctx, cfg, grid, &[&patches])
}

/// `[U^c | mean(weekly) | mean(yearly)]` per sample from pooled rows, or
/// `U^c` alone when `current_only`.
pub fn encode_granularities(
    ctx: &mut Ctx,
    pooled: Var,
    current: &[usize],
    weekly: &[Vec<usize>],
    yearly: &[Vec<usize>],
    current_only: bool,
) -> Result<Var> {
    let uc = ctx.g.gather_rows(pooled, current)?;
    if current_only {
        return Ok(uc);
    }
    let uw = ctx.g.group_mean(pooled, weekly)?;
    let uy = ctx.g.group_mean(pooled, yearly)?;
    ctx.g.concat(&[uc, uw, uy], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 16,
            max_seq_len: 16,
            patch_size: 4,
        }
    }

    #[test]
    fn mask_states_follow_mask_positions() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_text_encoder(&mut store, &cfg, 10, &mut ChaCha8Rng::seed_from_u64(1));
        let seq = TokenSeq {
            ids: vec![3, 5, 1, 6, 1, 7],
            mask_positions: vec![2, 4],
        };
        let mut ctx = Ctx::new(&store, None, false);
        let enc = encode_text(&mut ctx, &cfg, &seq).unwrap();
        let m = enc.mask_states(&mut ctx).unwrap().unwrap();
        assert_eq!(ctx.g.value(m).shape(), &[2, 8]);
        assert_eq!(ctx.g.value(enc.pooled).shape(), &[8]);
    }

    #[test]
    fn positions_matter() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_text_encoder(&mut store, &cfg, 10, &mut ChaCha8Rng::seed_from_u64(2));
        let a = TokenSeq { ids: vec![3, 5, 6, 7], mask_positions: vec![] };
        let b = TokenSeq { ids: vec![3, 6, 5, 7], mask_positions: vec![] };
        let mut ctx = Ctx::new(&store, None, false);
        let ea = encode_text(&mut ctx, &cfg, &a).unwrap();
        let eb = encode_text(&mut ctx, &cfg, &b).unwrap();
        assert_ne!(ctx.g.value(ea.pooled), ctx.g.value(eb.pooled));
    }

    #[test]
    fn patch_count_and_layout() {
        assert_eq!(patch_grid(192, 192, 8).unwrap(), (24, 24));
        assert!(patch_grid(190, 192, 8).is_err());
        let mut img = TrendImage::blank(4, 2);
        img.pixels = (0..8).map(|i| i as f64).collect();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[2, 4]);
        assert_eq!(p.data(), &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn stroke_changes_image_encoding() {
        let cfg = small();
        let mut store = ParamStore::new();
        init_vision_encoder(&mut store, &cfg, 8, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let blank = TrendImage::blank(8, 8);
        let mut stroke = blank.clone();
        for x in 0..8 {
            stroke.pixels[3 * 8 + x] = 1.0;
        }
        let mut ctx = Ctx::new(&store, None, false);
        let a = encode_image(&mut ctx, &cfg, &blank).unwrap();
        let b = encode_image(&mut ctx, &cfg, &stroke).unwrap();
        let c = encode_image(&mut ctx, &cfg, &blank).unwrap();
        assert_eq!(a.patches_per_image, 4);
        assert_ne!(ctx.g.value(a.pooled), ctx.g.value(b.pooled));
        assert_eq!(ctx.g.value(a.pooled), ctx.g.value(c.pooled));
    }

    #[test]
    fn identical_records_give_equal_granularities() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, None, false);
        let pooled = ctx.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let u = encode_granularities(&mut ctx, pooled, &[0], &[vec![0, 1]], &[vec![1]], false).unwrap();
        assert_eq!(ctx.g.value(u).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let uc = encode_granularities(&mut ctx, pooled, &[0], &[vec![0, 1]], &[vec![1]], true).unwrap();
        assert_eq!(ctx.g.value(uc).shape(), &[1, 2]);
    }
}
