//! Factorized spatiotemporal video transformer.
//!
//! patchify -> (+ decoupled positional embeddings) -> spatial attention per
//! frame -> temporal attention per spatial index -> merged token grid. No
//! global pooling happens inside the encoder; pooling is a separate MAP
//! head. A joint-attention layout (one stack over all tokens) sits behind a
//! config switch for the attention ablation.

use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::masking::{MaskPattern, MaskSpec};
use crate::nn::{self, key_mask_from, layer_norm_affine, transformer_block};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Scalar, TensorData};
use crate::util::trunc_normal;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionLayout {
    Factorized,
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Temporal positional-embedding rows (>= frames).
    pub t_max: usize,
    pub layout: AttentionLayout,
}

impl EncoderConfig {
    /// Small config used by tests and desk-scale training.
    pub fn toy() -> Self {
        EncoderConfig {
            frames: 4,
            height: 32,
            width: 32,
            channels: 3,
            patch_h: 8,
            patch_w: 8,
            embed_dim: 64,
            spatial_layers: 2,
            temporal_layers: 2,
            heads: 4,
            mlp_hidden: 256,
            t_max: 4,
            layout: AttentionLayout::Factorized,
        }
    }

    /// Paper-shape configuration (giant): only used for shape traces and
    /// shape-only tests; the temporal stack is fixed at four layers.
    pub fn giant() -> Self {
        EncoderConfig {
            frames: 8,
            height: 288,
            width: 288,
            channels: 3,
            patch_h: 18,
            patch_w: 18,
            embed_dim: 1408,
            spatial_layers: 40,
            temporal_layers: 4,
            heads: 16,
            mlp_hidden: 6144,
            t_max: 8,
            layout: AttentionLayout::Factorized,
        }
    }

    pub fn s_h(&self) -> usize {
        self.height / self.patch_h
    }

    pub fn s_w(&self) -> usize {
        self.width / self.patch_w
    }

    /// Spatial tokens per frame.
    pub fn spatial_tokens(&self) -> usize {
        self.s_h() * self.s_w()
    }

    /// Full token count T*S.
    pub fn tokens(&self) -> usize {
        self.frames * self.spatial_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % self.patch_h != 0 {
            return Err(VfmError::invalid(format!(
                "height {} not divisible by patch height {}",
                self.height, self.patch_h
            )));
        }
        if self.width % self.patch_w != 0 {
            return Err(VfmError::invalid(format!(
                "width {} not divisible by patch width {}",
                self.width, self.patch_w
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(VfmError::invalid(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.t_max < self.frames {
            return Err(VfmError::invalid(format!(
                "t_max {} smaller than frame count {}",
                self.t_max, self.frames
            )));
        }
        Ok(())
    }
}

/// Token lattice in the graph: `var` has shape [B, T, S, D].
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub var: Var,
    pub batch: usize,
    pub t: usize,
    pub s: usize,
    pub d: usize,
}

/// How visibility is applied inside `encode`.
pub enum MaskMode<'a> {
    /// All tokens visible.
    None,
    /// Regular masks (tube): visible columns are gathered up front and the
    /// encoder runs densely on the packed [T, S_vis] grid.
    Packed(&'a [MaskSpec]),
    /// Irregular masks (blockwise): hidden tokens are zeroed and excluded
    /// from every attention via key masks; visible tokens are gathered at
    /// the end. Visible outputs depend only on visible inputs.
    Ragged(&'a [MaskSpec]),
}

impl<'a> MaskMode<'a> {
    /// Packed for tube masks, ragged otherwise.
    pub fn from_masks(masks: &'a [MaskSpec]) -> Self {
        if masks.is_empty() {
            MaskMode::None
        } else if masks.iter().all(|m| m.pattern == MaskPattern::Tube) {
            MaskMode::Packed(masks)
        } else {
            MaskMode::Ragged(masks)
        }
    }
}

pub struct EncodeOutput {
    /// Merged visible tokens [B, m, D] in canonical temporal-major order.
    pub tokens: Var,
    /// Per-tap merged token features (for multi-layer pooling heads).
    pub taps: Vec<Var>,
    /// Index map per clip: original flat position of each output token.
    pub index_maps: Vec<Vec<usize>>,
}

// ---- parameters ----

pub fn init_encoder_params<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &EncoderConfig,
) {
    let d = cfg.embed_dim;
    let pp = cfg.patch_h * cfg.patch_w * cfg.channels;
    nn::init_linear(store, rng, &format!("{prefix}.patch.w"), pp, d, true);
    store.insert(
        format!("{prefix}.pos.spatial"),
        TensorData::from_fn(vec![cfg.spatial_tokens(), d], |_| trunc_normal::<F>(rng, 0.02)),
    );
    store.insert(
        format!("{prefix}.pos.temporal"),
        TensorData::from_fn(vec![cfg.t_max, d], |_| trunc_normal::<F>(rng, 0.02)),
    );
    match cfg.layout {
        AttentionLayout::Factorized => {
            for i in 0..cfg.spatial_layers {
                nn::init_block(store, rng, &format!("{prefix}.spatial.{i}"), d, cfg.mlp_hidden);
            }
            nn::init_layer_norm(store, &format!("{prefix}.snorm"), d);
            for i in 0..cfg.temporal_layers {
                nn::init_block(store, rng, &format!("{prefix}.temporal.{i}"), d, cfg.mlp_hidden);
            }
            nn::init_layer_norm(store, &format!("{prefix}.tnorm"), d);
        }
        AttentionLayout::Joint => {
            for i in 0..cfg.spatial_layers + cfg.temporal_layers {
                nn::init_block(store, rng, &format!("{prefix}.joint.{i}"), d, cfg.mlp_hidden);
            }
            nn::init_layer_norm(store, &format!("{prefix}.jnorm"), d);
        }
    }
}

// ---- operations ----

/// Split clips into non-overlapping patches and project to the embed dim.
/// `clips` is raw pixel data [B, T, H, W, C]; the rearrangement happens
/// outside the graph (pixels are constants), the projection inside.
pub fn patchify<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    clips: &TensorData<F>,
) -> Result<TokenGrid> {
    cfg.validate()?;
    let shape = clips.shape();
    if shape.len() != 5 {
        return Err(VfmError::shape("patchify", format!("want [B, T, H, W, C], got {shape:?}")));
    }
    let (b, t, h, w, c) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if h != cfg.height || w != cfg.width || c != cfg.channels {
        return Err(VfmError::shape(
            "patchify",
            format!(
                "clip {h}x{w}x{c} does not match config {}x{}x{}",
                cfg.height, cfg.width, cfg.channels
            ),
        ));
    }
    let (ph, pw) = (cfg.patch_h, cfg.patch_w);
    let (sh, sw) = (cfg.s_h(), cfg.s_w());
    let s = sh * sw;
    let pp = ph * pw * c;
    let src = clips.data();
    let mut patches = vec![F::zero(); b * t * s * pp];
    let mut out_i = 0usize;
    for bi in 0..b {
        for ti in 0..t {
            let frame = (bi * t + ti) * h * w * c;
            for sy in 0..sh {
                for sx in 0..sw {
                    for py in 0..ph {
                        let row = frame + ((sy * ph + py) * w + sx * pw) * c;
                        patches[out_i..out_i + pw * c].copy_from_slice(&src[row..row + pw * c]);
                        out_i += pw * c;
                    }
                }
            }
        }
    }
    let patches = g.constant(TensorData::new(vec![b * t * s, pp], patches)?);
    let proj = nn::linear(g, p, patches, &format!("{prefix}.patch.w"), true)?;
    let var = g.reshape(proj, &[b, t, s, cfg.embed_dim])?;
    Ok(TokenGrid { var, batch: b, t, s, d: cfg.embed_dim })
}

/// Add spatial[s] + temporal[t] to every token. One-frame inputs (images)
/// use the cropped first temporal row; frame counts beyond the table length
/// require `interpolate`.
pub fn add_pos_emb<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    grid: TokenGrid,
    interpolate: bool,
) -> Result<TokenGrid> {
    let spatial = p.var(&format!("{prefix}.pos.spatial"))?;
    let temporal = p.var(&format!("{prefix}.pos.temporal"))?;
    let t_max = g.shape(temporal)[0];
    let d = grid.d;
    if g.shape(spatial) != [grid.s, d] {
        return Err(VfmError::shape(
            "add_pos_emb",
            format!("spatial table {:?} vs grid S={} D={}", g.shape(spatial), grid.s, d),
        ));
    }
    let with_spatial = g.add(grid.var, spatial)?;
    let rows = if grid.t == t_max {
        temporal
    } else if grid.t < t_max {
        let idx: Vec<usize> = (0..grid.t).collect();
        g.gather(temporal, 0, &idx)?
    } else if interpolate {
        interpolate_temporal(g, temporal, grid.t)?
    } else {
        return Err(VfmError::invalid(format!(
            "{} frames exceed the temporal table ({t_max} rows) and interpolation is off",
            grid.t
        )));
    };
    let rows3 = g.reshape(rows, &[grid.t, 1, d])?;
    let var = g.add(with_spatial, rows3)?;
    Ok(TokenGrid { var, ..grid })
}

/// Linear interpolation of the temporal table to `new_t` rows with endpoint
/// preservation; identity when `new_t` equals the table length.
pub fn interpolate_temporal<F: Scalar>(
    g: &mut Graph<F>,
    temporal: Var,
    new_t: usize,
) -> Result<Var> {
    let shape = g.shape(temporal).to_vec();
    if shape.len() != 2 {
        return Err(VfmError::shape("interpolate_temporal", format!("want [T, D], got {shape:?}")));
    }
    let t_max = shape[0];
    if new_t == 0 {
        return Err(VfmError::invalid("cannot interpolate to zero frames"));
    }
    if new_t == t_max {
        return Ok(temporal);
    }
    let mut lo = Vec::with_capacity(new_t);
    let mut hi = Vec::with_capacity(new_t);
    let mut frac = Vec::with_capacity(new_t);
    for i in 0..new_t {
        let x = if new_t == 1 {
            0.0
        } else {
            i as f64 * (t_max - 1) as f64 / (new_t - 1) as f64
        };
        let f = x.floor();
        lo.push(f as usize);
        hi.push((f as usize + 1).min(t_max - 1));
        frac.push(x - f);
    }
    let lo_rows = g.gather(temporal, 0, &lo)?;
    let hi_rows = g.gather(temporal, 0, &hi)?;
    let w_hi = g.constant(TensorData::new(
        vec![new_t, 1],
        frac.iter().map(|&f| F::cast(f)).collect(),
    )?);
    let w_lo = g.constant(TensorData::new(
        vec![new_t, 1],
        frac.iter().map(|&f| F::cast(1.0 - f)).collect(),
    )?);
    let a = g.mul(lo_rows, w_lo)?;
    let b = g.mul(hi_rows, w_hi)?;
    g.add(a, b)
}

/// Run the transformer stacks over a positioned token grid. Output tokens
/// are merged to [B, m, D] in temporal-major order; positions hidden by the
/// mask are absent from the output.
pub fn encode<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    grid: TokenGrid,
    mask: &MaskMode<'_>,
    taps: Option<&[usize]>,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<EncodeOutput> {
    match cfg.layout {
        AttentionLayout::Factorized => encode_factorized(g, p, prefix, cfg, grid, mask, taps, trace),
        AttentionLayout::Joint => encode_joint(g, p, prefix, cfg, grid, mask, taps, trace),
    }
}

#[allow(clippy::too_many_arguments)]
fn encode_factorized<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    grid: TokenGrid,
    mask: &MaskMode<'_>,
    taps: Option<&[usize]>,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<EncodeOutput> {
    let (b, d) = (grid.batch, grid.d);
    let full_n = grid.t * grid.s;

    // Resolve masking strategy.
    let (mut x, t_eff, s_eff, ragged_masks, index_maps): (Var, usize, usize, Option<&[MaskSpec]>, Vec<Vec<usize>>) =
        match mask {
            MaskMode::None => {
                let maps = vec![(0..full_n).collect::<Vec<_>>(); b];
                (grid.var, grid.t, grid.s, None, maps)
            }
            MaskMode::Packed(masks) => {
                check_masks(masks, b, grid.t, grid.s)?;
                let s_vis = masks[0].visible_in_frame(0).len();
                for m in masks.iter() {
                    for ti in 0..m.t {
                        if m.visible_in_frame(ti).len() != s_vis {
                            return Err(VfmError::invalid(
                                "packed encode requires a constant per-frame visible count".to_string(),
                            ));
                        }
                    }
                }
                let maps: Vec<Vec<usize>> = masks.iter().map(MaskSpec::visible_indices).collect();
                let flat_grid = g.reshape(grid.var, &[b, full_n, d])?;
                let idx: Vec<usize> = maps.iter().flat_map(|m| m.iter().copied()).collect();
                let packed = g.gather_batched(flat_grid, &idx, grid.t * s_vis)?;
                let packed = g.reshape(packed, &[b, grid.t, s_vis, d])?;
                (packed, grid.t, s_vis, None, maps)
            }
            MaskMode::Ragged(masks) => {
                check_masks(masks, b, grid.t, grid.s)?;
                // Zero hidden inputs so no masked content leaks anywhere.
                let mut vis = vec![F::zero(); b * full_n];
                for (bi, m) in masks.iter().enumerate() {
                    for (i, &hidden) in m.grid().iter().enumerate() {
                        vis[bi * full_n + i] = if hidden { F::zero() } else { F::one() };
                    }
                }
                let vis = g.constant(TensorData::new(vec![b, grid.t, grid.s, 1], vis)?);
                let zeroed = g.mul(grid.var, vis)?;
                let maps: Vec<Vec<usize>> = masks.iter().map(MaskSpec::visible_indices).collect();
                (zeroed, grid.t, grid.s, Some(masks), maps)
            }
        };

    let m_out = index_maps[0].len();
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Data", "-", vec![grid.t, cfg.height, cfg.width, cfg.channels]));
        tr.push(TraceRow::new(
            "Preprocess",
            format!("Patchify [1, {}, {}]", cfg.patch_h, cfg.patch_w),
            vec![grid.t, grid.s, d],
        ));
        let mask_block = match mask {
            MaskMode::None => "-".to_string(),
            MaskMode::Packed(_) => "Tube".to_string(),
            MaskMode::Ragged(_) => "BEVT".to_string(),
        };
        tr.push(TraceRow::new("Drop token / Mask", mask_block, vec![t_eff, s_eff, d]));
    }

    let mut tap_vars = Vec::new();
    let want_tap = |layer: usize| taps.is_some_and(|t| t.contains(&layer));

    // Spatial stage: attention within each frame.
    x = g.reshape(x, &[b * t_eff, s_eff, d])?;
    let skey_mask = ragged_masks.map(|masks| {
        key_mask_from(g, b * t_eff, s_eff, |row, si| !masks[row / t_eff].is_masked(row % t_eff, si))
    });
    for i in 0..cfg.spatial_layers {
        x = transformer_block(g, p, &format!("{prefix}.spatial.{i}"), x, cfg.heads, skey_mask)?;
        if want_tap(i) {
            let merged = g.reshape(x, &[b, t_eff * s_eff, d])?;
            tap_vars.push(gather_if_ragged(g, merged, ragged_masks, &index_maps)?);
        }
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new(
            "Spatial encoder",
            format!("MSA ({}) x {}", cfg.mlp_hidden, cfg.spatial_layers),
            vec![t_eff, s_eff, d],
        ));
    }
    x = layer_norm_affine(g, p, x, &format!("{prefix}.snorm"))?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Normalization", "LayerNorm", vec![t_eff, s_eff, d]));
    }

    // Switch to [B, S, T, D]: attention within each spatial index.
    x = g.reshape(x, &[b, t_eff, s_eff, d])?;
    x = g.permute(x, &[0, 2, 1, 3])?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Transpose", "Switch dimension", vec![s_eff, t_eff, d]));
    }
    x = g.reshape(x, &[b * s_eff, t_eff, d])?;
    let tkey_mask = ragged_masks.map(|masks| {
        key_mask_from(g, b * s_eff, t_eff, |row, ti| !masks[row / s_eff].is_masked(ti, row % s_eff))
    });
    for i in 0..cfg.temporal_layers {
        x = transformer_block(g, p, &format!("{prefix}.temporal.{i}"), x, cfg.heads, tkey_mask)?;
        if want_tap(cfg.spatial_layers + i) {
            let unswitched = g.reshape(x, &[b, s_eff, t_eff, d])?;
            let unswitched = g.permute(unswitched, &[0, 2, 1, 3])?;
            let merged = g.reshape(unswitched, &[b, t_eff * s_eff, d])?;
            tap_vars.push(gather_if_ragged(g, merged, ragged_masks, &index_maps)?);
        }
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new(
            "Temporal encoder",
            format!("MSA ({}) x {}", cfg.mlp_hidden, cfg.temporal_layers),
            vec![s_eff, t_eff, d],
        ));
    }
    x = layer_norm_affine(g, p, x, &format!("{prefix}.tnorm"))?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Normalization", "LayerNorm", vec![s_eff, t_eff, d]));
    }

    // Back to [B, T, S, D], then merge.
    x = g.reshape(x, &[b, s_eff, t_eff, d])?;
    x = g.permute(x, &[0, 2, 1, 3])?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Transpose", "Switch dimension", vec![t_eff, s_eff, d]));
    }
    x = g.reshape(x, &[b, t_eff * s_eff, d])?;
    x = gather_if_ragged(g, x, ragged_masks, &index_maps)?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Reshape", "Merge dimension", vec![m_out, d]));
    }

    Ok(EncodeOutput { tokens: x, taps: tap_vars, index_maps })
}

#[allow(clippy::too_many_arguments)]
fn encode_joint<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    cfg: &EncoderConfig,
    grid: TokenGrid,
    mask: &MaskMode<'_>,
    taps: Option<&[usize]>,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<EncodeOutput> {
    let (b, d) = (grid.batch, grid.d);
    let full_n = grid.t * grid.s;
    let layers = cfg.spatial_layers + cfg.temporal_layers;

    // Joint attention has no per-frame structure, so every mask packs.
    let (mut x, index_maps) = match mask {
        MaskMode::None => {
            let flat = g.reshape(grid.var, &[b, full_n, d])?;
            (flat, vec![(0..full_n).collect::<Vec<_>>(); b])
        }
        MaskMode::Packed(masks) | MaskMode::Ragged(masks) => {
            check_masks(masks, b, grid.t, grid.s)?;
            let maps: Vec<Vec<usize>> = masks.iter().map(MaskSpec::visible_indices).collect();
            let m = maps[0].len();
            for (i, map) in maps.iter().enumerate() {
                if map.len() != m {
                    return Err(VfmError::invalid(format!(
                        "mask {i} keeps {} tokens, mask 0 keeps {m}",
                        map.len()
                    )));
                }
            }
            let flat = g.reshape(grid.var, &[b, full_n, d])?;
            let idx: Vec<usize> = maps.iter().flat_map(|m| m.iter().copied()).collect();
            (g.gather_batched(flat, &idx, m)?, maps)
        }
    };
    let m_out = index_maps[0].len();
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Data", "-", vec![cfg.frames, cfg.height, cfg.width, cfg.channels]));
        tr.push(TraceRow::new(
            "Preprocess",
            format!("Patchify [1, {}, {}]", cfg.patch_h, cfg.patch_w),
            vec![grid.t, grid.s, d],
        ));
        tr.push(TraceRow::new("Reshape", "Merge dimension", vec![grid.t * grid.s, d]));
        tr.push(TraceRow::new("Drop token / Mask", "-", vec![m_out, d]));
    }
    let mut tap_vars = Vec::new();
    for i in 0..layers {
        x = transformer_block(g, p, &format!("{prefix}.joint.{i}"), x, cfg.heads, None)?;
        if taps.is_some_and(|t| t.contains(&i)) {
            tap_vars.push(x);
        }
    }
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Joint encoder", format!("MSA ({}) x {layers}", cfg.mlp_hidden), vec![m_out, d]));
    }
    x = layer_norm_affine(g, p, x, &format!("{prefix}.jnorm"))?;
    if let Some(tr) = trace.as_deref_mut() {
        tr.push(TraceRow::new("Normalization", "LayerNorm", vec![m_out, d]));
    }
    Ok(EncodeOutput { tokens: x, taps: tap_vars, index_maps })
}

fn gather_if_ragged<F: Scalar>(
    g: &mut Graph<F>,
    merged: Var,
    ragged: Option<&[MaskSpec]>,
    maps: &[Vec<usize>],
) -> Result<Var> {
    if ragged.is_none() {
        return Ok(merged);
    }
    let m = maps[0].len();
    let idx: Vec<usize> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    g.gather_batched(merged, &idx, m)
}

fn check_masks(masks: &[MaskSpec], b: usize, t: usize, s: usize) -> Result<()> {
    if masks.len() != b {
        return Err(VfmError::shape("encode", format!("{} masks for batch of {b}", masks.len())));
    }
    for (i, m) in masks.iter().enumerate() {
        if m.t != t || m.s != s {
            return Err(VfmError::shape(
                "encode",
                format!("mask {i} is {}x{}, grid is {t}x{s}", m.t, m.s),
            ));
        }
    }
    Ok(())
}

// ---- shape trace ----

/// One row of the encoder data-flow trace: step label, block label, and the
/// logical output dims (batch omitted). Bracketed visible-count products in
/// the reference layout are bookkeeping over the token total, so comparisons
/// use `tokens()` x `channel()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRow {
    pub step: String,
    pub block: String,
    pub dims: Vec<usize>,
}

impl TraceRow {
    pub fn new(step: impl Into<String>, block: impl Into<String>, dims: Vec<usize>) -> Self {
        TraceRow { step: step.into(), block: block.into(), dims }
    }

    /// Product of all dims but the channel (the token count), except for
    /// raw-data rows where it is the full element count.
    pub fn tokens(&self) -> usize {
        self.dims[..self.dims.len() - 1].iter().product()
    }

    pub fn channel(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }
}

/// Meta shape trace: the logical per-row output dims of `encode` computed
/// from the config alone (no tensors). For tube masks the per-frame visible
/// count is exact; for blockwise masks intermediate rows carry the logical
/// visible total even though the dense compute spans the full grid.
pub fn shape_trace(
    cfg: &EncoderConfig,
    mask: Option<(MaskPattern, f64)>,
    frames: usize,
) -> Vec<TraceRow> {
    let s = cfg.spatial_tokens();
    let d = cfg.embed_dim;
    let n = frames * s;
    let mut rows = vec![
        TraceRow::new("Data", "-", vec![frames, cfg.height, cfg.width, cfg.channels]),
        TraceRow::new(
            "Preprocess",
            format!("Patchify [1, {}, {}]", cfg.patch_h, cfg.patch_w),
            vec![frames, s, d],
        ),
    ];
    let (label, t_eff, s_eff, merged) = match mask {
        None => ("-".to_string(), frames, s, n),
        Some((MaskPattern::Tube, rho)) => {
            let s_vis = s - (rho * s as f64).round() as usize;
            ("Tube".to_string(), frames, s_vis, frames * s_vis)
        }
        Some((MaskPattern::Blockwise, rho)) => {
            let m = n - (rho * n as f64).round() as usize;
            // No regular axis split exists; bookkeep the total on the
            // temporal slot as the reference layout does.
            ("BEVT".to_string(), m, 1, m)
        }
    };
    rows.push(TraceRow::new("Drop token / Mask", label, vec![t_eff, s_eff, d]));
    rows.push(TraceRow::new(
        "Spatial encoder",
        format!("MSA ({}) x {}", cfg.mlp_hidden, cfg.spatial_layers),
        vec![t_eff, s_eff, d],
    ));
    rows.push(TraceRow::new("Normalization", "LayerNorm", vec![t_eff, s_eff, d]));
    rows.push(TraceRow::new("Transpose", "Switch dimension", vec![s_eff, t_eff, d]));
    rows.push(TraceRow::new(
        "Temporal encoder",
        format!("MSA ({}) x {}", cfg.mlp_hidden, cfg.temporal_layers),
        vec![s_eff, t_eff, d],
    ));
    rows.push(TraceRow::new("Normalization", "LayerNorm", vec![s_eff, t_eff, d]));
    rows.push(TraceRow::new("Transpose", "Switch dimension", vec![t_eff, s_eff, d]));
    rows.push(TraceRow::new("Reshape", "Merge dimension", vec![merged, d]));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{sample_blockwise_mask, sample_tube_mask, BlockwiseParams};
    use crate::params::bind;
    use crate::util::rng_from;

    fn toy_store(cfg: &EncoderConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = rng_from(seed);
        let mut s = ParamStore::new();
        init_encoder_params(&mut s, &mut rng, "enc", cfg);
        s
    }

    fn random_clips(b: usize, cfg: &EncoderConfig, seed: u64) -> TensorData<f64> {
        let mut rng = rng_from(seed);
        TensorData::from_fn(
            vec![b, cfg.frames, cfg.height, cfg.width, cfg.channels],
            |_| trunc_normal::<f64>(&mut rng, 0.5),
        )
    }

    #[test]
    fn patchify_toy_shape() {
        // 4x32x32x3 clip, patch 8x8 -> grid 4x16xD.
        let cfg = EncoderConfig::toy();
        let store = toy_store(&cfg, 1);
        let clips = random_clips(2, &cfg, 2);
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let grid = patchify(&mut g, &p, "enc", &cfg, &clips).unwrap();
        assert_eq!(g.shape(grid.var), &[2, 4, 16, 64]);
    }

    #[test]
    fn patchify_zero_clip_zero_bias_gives_zero_grid() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(&cfg, 1);
        let clips = TensorData::zeros(vec![1, 4, 32, 32, 3]);
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let grid = patchify(&mut g, &p, "enc", &cfg, &clips).unwrap();
        assert!(g.value(grid.var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_rejects_indivisible_dims() {
        let mut cfg = EncoderConfig::toy();
        cfg.height = 30;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn patchify_giant_shape() {
        // Paper-scale patchify with random weights: 8x288x288x3 -> 8x256x1408.
        let cfg = EncoderConfig::giant();
        let mut rng = rng_from(3);
        let mut store = ParamStore::<f32>::new();
        nn::init_linear(
            &mut store,
            &mut rng,
            "enc.patch.w",
            cfg.patch_h * cfg.patch_w * cfg.channels,
            cfg.embed_dim,
            true,
        );
        let clips = TensorData::<f32>::zeros(vec![1, 8, 288, 288, 3]);
        let mut g = Graph::<f32>::new();
        let p = bind(&mut g, &store, |_| false);
        let grid = patchify(&mut g, &p, "enc", &cfg, &clips).unwrap();
        assert_eq!(g.shape(grid.var), &[1, 8, 256, 1408]);
    }

    #[test]
    fn pos_emb_zero_tables_leave_grid_unchanged() {
        let cfg = EncoderConfig::toy();
        let mut store = toy_store(&cfg, 4);
        store.insert("enc.pos.spatial", TensorData::zeros(vec![16, 64]));
        store.insert("enc.pos.temporal", TensorData::zeros(vec![4, 64]));
        let clips = random_clips(1, &cfg, 5);
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let grid = patchify(&mut g, &p, "enc", &cfg, &clips).unwrap();
        let before = g.value(grid.var).data().to_vec();
        let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
        assert_eq!(g.value(grid.var).data(), before.as_slice());
    }

    #[test]
    fn pos_emb_single_frame_uses_first_row() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(&cfg, 4);
        // Build a 1-frame grid of zeros; after pos add, every token must be
        // spatial[s] + temporal[0].
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let zeros = g.constant(TensorData::zeros(vec![1, 1, 16, 64]));
        let grid = TokenGrid { var: zeros, batch: 1, t: 1, s: 16, d: 64 };
        let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
        let spatial = store.get("enc.pos.spatial").unwrap().data();
        let temporal = store.get("enc.pos.temporal").unwrap().data();
        let out = g.value(grid.var).data();
        for s in 0..16 {
            for d in 0..64 {
                let expect = spatial[s * 64 + d] + temporal[d];
                assert!((out[s * 64 + d] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pos_emb_too_many_frames_errors_without_interpolation() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(&cfg, 4);
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let zeros = g.constant(TensorData::zeros(vec![1, 8, 16, 64]));
        let grid = TokenGrid { var: zeros, batch: 1, t: 8, s: 16, d: 64 };
        assert!(add_pos_emb(&mut g, &p, "enc", grid, false).is_err());
        let zeros = g.constant(TensorData::zeros(vec![1, 8, 16, 64]));
        let grid = TokenGrid { var: zeros, batch: 1, t: 8, s: 16, d: 64 };
        assert!(add_pos_emb(&mut g, &p, "enc", grid, true).is_ok());
    }

    #[test]
    fn interpolate_identity_and_midpoint() {
        let mut g = Graph::<f64>::new();
        let table = g.constant(TensorData::new(vec![2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        // Identity when new_t == t_max.
        let same = interpolate_temporal(&mut g, table, 2).unwrap();
        assert_eq!(g.value(same).data(), g.value(table).data());
        // T_max=2 rows [a, b], new_t=3 -> [a, (a+b)/2, b].
        let three = interpolate_temporal(&mut g, table, 3).unwrap();
        assert_eq!(g.value(three).data(), &[0.0, 2.0, 2.0, 4.0, 4.0, 6.0]);
        // Endpoint preservation 8 -> 16.
        let mut g = Graph::<f64>::new();
        let table = g.constant(TensorData::from_fn(vec![8, 3], |i| i as f64));
        let wide = interpolate_temporal(&mut g, table, 16).unwrap();
        let src = g.value(table).data().to_vec();
        let out = g.value(wide).data();
        assert_eq!(&out[..3], &src[..3]);
        assert_eq!(&out[15 * 3..], &src[7 * 3..]);
        assert!(interpolate_temporal(&mut g, table, 0).is_err());
    }

    #[test]
    fn encode_full_grid_toy_shape() {
        // Toy config, no mask: 4x16xD in -> 64xD merged out.
        let cfg = EncoderConfig::toy();
        let store = toy_store(&cfg, 6);
        let clips = random_clips(2, &cfg, 7);
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let grid = patchify(&mut g, &p, "enc", &cfg, &clips).unwrap();
        let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
        let out = encode(&mut g, &p, "enc", &cfg, grid, &MaskMode::None, None, None).unwrap();
        assert_eq!(g.shape(out.tokens), &[2, 64, 64]);
    }

    #[test]
    fn encode_trace_matches_meta_trace_for_tube() {
        let cfg = EncoderConfig::toy();
        let store = toy_store(&cfg, 8);
        let clips = random_clips(2, &cfg, 9);
        let masks: Vec<MaskSpec> = (0..2)
            .map(|i| sample_tube_mask(4, 16, 0.5, 100 + i).unwrap())
            .collect();
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let grid = patchify(&mut g, &p, "enc", &cfg, &clips).unwrap();
        let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
        let mut trace = Vec::new();
        let out = encode(
            &mut g,
            &p,
            "enc",
            &cfg,
            grid,
            &MaskMode::Packed(&masks),
            None,
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(g.shape(out.tokens), &[2, 32, 64]);
        let meta = shape_trace(&cfg, Some((MaskPattern::Tube, 0.5)), 4);
        assert_eq!(trace, meta);
    }

    #[test]
    fn ragged_visible_outputs_ignore_masked_content() {
        // Changing masked-token content must not move any visible output.
        let cfg = EncoderConfig::toy();
        let store = toy_store(&cfg, 10);
        let masks = vec![sample_blockwise_mask(4, 4, 4, 0.5, 42, &BlockwiseParams::default()).unwrap()];

        let run = |clips: &TensorData<f64>| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let p = bind(&mut g, &store, |_| false);
            let grid = patchify(&mut g, &p, "enc", &cfg, clips).unwrap();
            let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
            let out =
                encode(&mut g, &p, "enc", &cfg, grid, &MaskMode::Ragged(&masks), None, None).unwrap();
            g.value(out.tokens).data().to_vec()
        };

        let clips = random_clips(1, &cfg, 11);
        let mut tampered = clips.clone();
        // Overwrite pixels inside masked patches only.
        let mask = &masks[0];
        for ti in 0..4 {
            for sy in 0..4 {
                for sx in 0..4 {
                    if mask.is_masked(ti, sy * 4 + sx) {
                        for py in 0..8 {
                            for px in 0..8 {
                                for c in 0..3 {
                                    let idx = (((ti * 32) + sy * 8 + py) * 32 + sx * 8 + px) * 3 + c;
                                    tampered.data_mut()[idx] = 99.0;
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(run(&clips), run(&tampered));
    }

    #[test]
    fn spatial_stage_is_per_frame_local() {
        // With zero temporal layers the encoder output is per-frame: zeroing
        // frame t's input changes no other frame's output rows.
        let mut cfg = EncoderConfig::toy();
        cfg.temporal_layers = 0;
        let store = toy_store(&cfg, 12);
        let run = |clips: &TensorData<f64>| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let p = bind(&mut g, &store, |_| false);
            let grid = patchify(&mut g, &p, "enc", &cfg, clips).unwrap();
            let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
            let out = encode(&mut g, &p, "enc", &cfg, grid, &MaskMode::None, None, None).unwrap();
            g.value(out.tokens).data().to_vec()
        };
        let clips = random_clips(1, &cfg, 13);
        let mut zeroed = clips.clone();
        let frame = 2usize;
        let fsz = 32 * 32 * 3;
        for v in &mut zeroed.data_mut()[frame * fsz..(frame + 1) * fsz] {
            *v = 0.0;
        }
        let a = run(&clips);
        let b = run(&zeroed);
        let row = 16 * 64; // tokens per frame x D
        for t in 0..4 {
            let same = a[t * row..(t + 1) * row] == b[t * row..(t + 1) * row];
            assert_eq!(same, t != frame, "frame {t}");
        }
    }

    #[test]
    fn frame_permutation_permutes_per_frame_outputs() {
        // Spatial encoding treats frames independently: permuting the input
        // frames (with their positional rows) permutes the per-frame outputs.
        let mut cfg = EncoderConfig::toy();
        cfg.temporal_layers = 0;
        let store = toy_store(&cfg, 14);
        let perm = [2usize, 0, 3, 1];

        let encode_tokens = |grid_data: TensorData<f64>| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let p = bind(&mut g, &store, |_| false);
            let var = g.constant(grid_data);
            let grid = TokenGrid { var, batch: 1, t: 4, s: 16, d: 64 };
            let out = encode(&mut g, &p, "enc", &cfg, grid, &MaskMode::None, None, None).unwrap();
            g.value(out.tokens).data().to_vec()
        };

        // Positioned grid built once; frames permuted as whole slabs.
        let cfg_full = EncoderConfig::toy();
        let clips = random_clips(1, &cfg_full, 15);
        let positioned = {
            let mut g = Graph::<f64>::new();
            let p = bind(&mut g, &store, |_| false);
            let grid = patchify(&mut g, &p, "enc", &cfg_full, &clips).unwrap();
            let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
            g.value(grid.var).clone()
        };
        let base = encode_tokens(positioned.clone());
        let slab = 16 * 64;
        let mut permuted = TensorData::zeros(vec![1, 4, 16, 64]);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * slab..(dst + 1) * slab]
                .copy_from_slice(&positioned.data()[src * slab..(src + 1) * slab]);
        }
        let out = encode_tokens(permuted);
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                &out[dst * slab..(dst + 1) * slab],
                &base[src * slab..(src + 1) * slab],
                "frame {dst}"
            );
        }
    }

    #[test]
    fn giant_meta_trace_matches_reference_layout() {
        let cfg = EncoderConfig::giant();
        let trace = shape_trace(&cfg, Some((MaskPattern::Tube, 0.5)), 8);
        let totals: Vec<usize> = trace.iter().map(TraceRow::tokens).collect();
        // Data row is raw pixels; subsequent rows are token counts.
        assert_eq!(totals[1], 2048);
        assert!(totals[2..].iter().all(|&t| t == 1024));
        assert!(trace.iter().skip(1).all(|r| r.channel() == 1408));
        let bevt = shape_trace(&cfg, Some((MaskPattern::Blockwise, 0.65)), 8);
        assert!(bevt.iter().skip(2).all(|r| r.tokens() == 717));
    }

    #[test]
    fn encode_gradcheck_toy() {
        use crate::check::{finite_diff_check, FD_STEP, FD_TOLERANCE};
        // Micro config keeps the finite-difference sweep fast.
        let cfg = EncoderConfig {
            frames: 2,
            height: 8,
            width: 8,
            channels: 1,
            patch_h: 4,
            patch_w: 4,
            embed_dim: 6,
            spatial_layers: 1,
            temporal_layers: 1,
            heads: 2,
            mlp_hidden: 12,
            t_max: 2,
            layout: AttentionLayout::Factorized,
        };
        let store = toy_store(&cfg, 16);
        let clips = random_clips(1, &cfg, 17);
        let rep = finite_diff_check(&store, FD_STEP, 24, |g, p| {
            let grid = patchify(g, p, "enc", &cfg, &clips)?;
            let grid = add_pos_emb(g, p, "enc", grid, false)?;
            let out = encode(g, p, "enc", &cfg, grid, &MaskMode::None, None, None)?;
            Ok(g.mean_all(out.tokens))
        })
        .unwrap();
        assert!(rep.max_rel_err < FD_TOLERANCE, "{}: {}", rep.max_rel_err, rep.worst);
    }

    #[test]
    fn joint_layout_encodes_and_masks() {
        let mut cfg = EncoderConfig::toy();
        cfg.layout = AttentionLayout::Joint;
        let store = toy_store(&cfg, 18);
        let clips = random_clips(1, &cfg, 19);
        let masks = vec![sample_tube_mask(4, 16, 0.5, 20).unwrap()];
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &store, |_| false);
        let grid = patchify(&mut g, &p, "enc", &cfg, &clips).unwrap();
        let grid = add_pos_emb(&mut g, &p, "enc", grid, false).unwrap();
        let out = encode(&mut g, &p, "enc", &cfg, grid, &MaskMode::Packed(&masks), None, None).unwrap();
        assert_eq!(g.shape(out.tokens), &[1, 32, 64]);
    }
}
