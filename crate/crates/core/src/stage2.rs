//! Stage-2 masked video modeling with global-local distillation.
//!
//! A frozen stage-1 teacher produces token-wise targets (full clip, post
//! final norm) and a global MAP target. The student encodes only the
//! visible tokens of a blockwise-masked clip; a shuffled, position-embedded
//! four-layer decoder regresses every token target under cosine distance,
//! while a second decoder + MAP head (no shuffle, no positions) regresses
//! the global target. The two losses carry equal weight.

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::corpus::{clips_to_batch, Corpus, VideoClip};
use crate::encoder::{
    add_pos_emb, encode, init_encoder_params, patchify, EncoderConfig, MaskMode, TraceRow,
};
use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::masking::{sample_mask, BlockwiseParams, MaskPattern, MaskSpec};
use crate::metrics::MetricRecord;
use crate::nn::{self, layer_norm_affine, map_pool, transformer_block};
use crate::optim::{adamw_step, AdamHyper, DecayKind, LrSchedule, OptimizerState};
use crate::params::{bind, collect_grads, BoundParams, ParamStore};
use crate::stage1::{corpus_batch_indices, encoder_config_from};
use crate::tensor::{Scalar, TensorData};
use crate::util::{derive_seed, rng_from, shuffle_indices, trunc_normal};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
}

impl DecoderConfig {
    /// Reference-scale decoder: hidden 512, four layers.
    pub fn giant() -> Self {
        DecoderConfig { hidden: 512, layers: 4, mlp_hidden: 2048, heads: 8 }
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Config {
    pub enc: EncoderConfig,
    pub dec: DecoderConfig,
    pub mask_ratio: f64,
    pub mask_pattern: MaskPattern,
    pub blockwise: BlockwiseParams,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub shuffle: bool,
    pub global_distill: bool,
    pub token_loss_masked_only: bool,
    pub token_targets_pre_norm: bool,
    pub grad_clip: f64,
    pub eval_every: u64,
    pub seed: u64,
}

impl Stage2Config {
    pub fn from_config(c: &Config) -> Result<Self> {
        let enc = encoder_config_from(c)?;
        let kind = match c.get("stage2.schedule").unwrap_or("cosine") {
            "linear" => DecayKind::Linear,
            _ => DecayKind::Cosine,
        };
        Ok(Stage2Config {
            enc,
            dec: DecoderConfig {
                hidden: c.require("stage2.decoder_hidden")?,
                layers: c.require("stage2.decoder_layers")?,
                mlp_hidden: c.require("stage2.decoder_mlp_hidden")?,
                heads: c.get_or("stage2.decoder_heads", 4)?,
            },
            mask_ratio: c.require("stage2.mask_ratio")?,
            mask_pattern: c.get_or("stage2.mask_pattern", "blockwise".to_string())?.parse()?,
            blockwise: BlockwiseParams {
                min_block_area: c.require("mask.min_block_area")?,
                aspect_min: c.require("mask.aspect_min")?,
                tube_blocks: c.get_bool("mask.tube_blocks")?,
                exact_count: c.get_bool("mask.exact_count")?,
            },
            schedule: LrSchedule {
                kind,
                base_lr: c.require("stage2.base_lr")?,
                warmup_steps: c.require("stage2.warmup_steps")?,
                total_steps: c.require("stage2.total_steps")?,
                floor_lr: c.require("stage2.floor_lr")?,
            },
            weight_decay: c.require("stage2.weight_decay")?,
            batch_size: c.require("stage2.batch_size")?,
            shuffle: c.get_bool("stage2.shuffle")?,
            global_distill: c.get_bool("stage2.global_distill")?,
            token_loss_masked_only: c.get_bool("stage2.token_loss_masked_only")?,
            token_targets_pre_norm: c.get_bool("stage2.token_targets_pre_norm")?,
            grad_clip: c.require("stage2.grad_clip")?,
            eval_every: c.require("stage2.eval_every")?,
            seed: c.require("seed")?,
        })
    }
}

/// Student-side parameters beyond the encoder: the two decoders, the mask
/// embedding, and the decoder's own positional table.
pub fn init_stage2_params<F: Scalar>(
    store: &mut ParamStore<F>,
    seed: u64,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
) {
    let mut rng = rng_from(derive_seed(seed, &[20]));
    let d = enc.embed_dim;
    let n = enc.tokens();
    store.insert(
        "mask_emb",
        TensorData::from_fn(vec![d], |_| trunc_normal::<F>(&mut rng, 0.02)),
    );
    store.insert(
        "dec_pos",
        TensorData::from_fn(vec![n, d], |_| trunc_normal::<F>(&mut rng, 0.02)),
    );
    for prefix in ["sdec", "gdec"] {
        nn::init_linear(store, &mut rng, &format!("{prefix}.in.w"), d, dec.hidden, true);
        for i in 0..dec.layers {
            nn::init_block(store, &mut rng, &format!("{prefix}.block.{i}"), dec.hidden, dec.mlp_hidden);
        }
        nn::init_layer_norm(store, &format!("{prefix}.final_ln"), dec.hidden);
        nn::init_linear(store, &mut rng, &format!("{prefix}.out.w"), dec.hidden, d, true);
    }
    nn::init_map_head(store, &mut rng, "gdec.map", d, enc.mlp_hidden);
}

/// True for parameters that exist only to train stage 2; inference-time
/// consumers keep just the encoder.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("sdec.")
        || name.starts_with("gdec.")
        || name == "mask_emb"
        || name == "dec_pos"
}

// ---- teacher targets ----

pub struct DistillTargets {
    /// [B, n, D] teacher token embeddings in canonical order.
    pub token_targets: Var,
    /// [B, D] teacher MAP embedding of the intact clip.
    pub global_target: Var,
}

/// Teacher forward on the full, unmasked clip. Token targets come from the
/// merged encoder output after the final norm (a config flag switches to
/// the pre-norm tap); the global target reuses the stage-1 MAP head.
pub fn teacher_targets<F: Scalar>(
    g: &mut Graph<F>,
    teacher: &BoundParams,
    enc_cfg: &EncoderConfig,
    clips: &TensorData<F>,
    pre_norm_targets: bool,
) -> Result<DistillTargets> {
    let grid = patchify(g, teacher, "encoder", enc_cfg, clips)?;
    let grid = add_pos_emb(g, teacher, "encoder", grid, true)?;
    let taps = if pre_norm_targets {
        vec![enc_cfg.spatial_layers + enc_cfg.temporal_layers - 1]
    } else {
        Vec::new()
    };
    let out = encode(
        g,
        teacher,
        "encoder",
        enc_cfg,
        grid,
        &MaskMode::None,
        if taps.is_empty() { None } else { Some(&taps) },
        None,
    )?;
    let token_targets = if pre_norm_targets {
        *out.taps.first().ok_or_else(|| VfmError::invalid("missing pre-norm tap"))?
    } else {
        out.tokens
    };
    let global_target = map_pool(g, teacher, "head.map", out.tokens, enc_cfg.heads)?;
    Ok(DistillTargets { token_targets, global_target })
}

// ---- shuffled fill + decoders ----

/// Uniform permutation of 0..n per sample.
pub fn sample_perms(batch: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|i| shuffle_indices(&mut rng_from(derive_seed(seed, &[6, i as u64])), n))
        .collect()
}

pub fn identity_perms(batch: usize, n: usize) -> Vec<Vec<usize>> {
    (0..batch).map(|_| (0..n).collect()).collect()
}

/// Contents of the decoder input before positions: concat(visible, tiled
/// mask embedding) permuted along the sequence axis by each sample's pi
/// (slot i receives source row pi[i]).
pub fn fill_and_shuffle<F: Scalar>(
    g: &mut Graph<F>,
    visible: Var,
    mask_emb: Var,
    perms: &[Vec<usize>],
) -> Result<Var> {
    let vs = g.shape(visible).to_vec();
    if vs.len() != 3 {
        return Err(VfmError::shape("shuffle_fill", format!("want [B, m, D], got {vs:?}")));
    }
    let (b, m, d) = (vs[0], vs[1], vs[2]);
    if perms.len() != b || perms.is_empty() {
        return Err(VfmError::shape(
            "shuffle_fill",
            format!("{} permutations for batch of {b}", perms.len()),
        ));
    }
    let n = perms[0].len();
    if m > n {
        return Err(VfmError::shape(
            "shuffle_fill",
            format!("{m} visible tokens exceed sequence length {n}"),
        ));
    }
    if perms.iter().any(|p| p.len() != n) {
        return Err(VfmError::shape("shuffle_fill", "ragged permutation lengths".to_string()));
    }
    let filled = if m == n {
        visible
    } else {
        let mask_row = g.reshape(mask_emb, &[1, 1, d])?;
        let tiled = g.broadcast_to(mask_row, &[b, n - m, d])?;
        g.concat(&[visible, tiled], 1)?
    };
    let idx: Vec<usize> = perms.iter().flat_map(|p| p.iter().copied()).collect();
    g.gather_batched(filled, &idx, n)
}

/// Algorithm: concat(visible, tiled mask embedding), permute the sequence
/// axis by each sample's pi, then add the positional table in slot order
/// (slot i gets pos[i] regardless of where its content came from).
pub fn shuffle_fill<F: Scalar>(
    g: &mut Graph<F>,
    visible: Var,
    mask_emb: Var,
    pos_emb: Var,
    perms: &[Vec<usize>],
) -> Result<Var> {
    let d = *g.shape(visible).last().unwrap_or(&0);
    let ps = g.shape(pos_emb).to_vec();
    if ps.len() != 2 || ps[1] != d {
        return Err(VfmError::shape("shuffle_fill", format!("pos table {ps:?} vs dim {d}")));
    }
    if perms.iter().any(|p| p.len() != ps[0]) {
        return Err(VfmError::shape(
            "shuffle_fill",
            format!("permutations must cover the pos table length {}", ps[0]),
        ));
    }
    let shuffled = fill_and_shuffle(g, visible, mask_emb, perms)?;
    g.add(shuffled, pos_emb)
}

fn decoder_stack<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    dec: &DecoderConfig,
    x: Var,
) -> Result<Var> {
    let mut h = nn::linear(g, p, x, &format!("{prefix}.in.w"), true)?;
    for i in 0..dec.layers {
        h = transformer_block(g, p, &format!("{prefix}.block.{i}"), h, dec.heads, None)?;
    }
    h = layer_norm_affine(g, p, h, &format!("{prefix}.final_ln"))?;
    nn::linear(g, p, h, &format!("{prefix}.out.w"), true)
}

/// Shuffled local decoder: down-project, four attention layers, up-project.
/// The prediction at slot i regresses the teacher token at canonical
/// position i.
pub fn local_decode<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    dec: &DecoderConfig,
    decoder_input: Var,
) -> Result<Var> {
    decoder_stack(g, p, "sdec", dec, decoder_input)
}

/// Global decoder over the visible tokens only: no shuffle, no positional
/// embedding, MAP-pooled to one prediction per sample.
pub fn global_decode<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    dec: &DecoderConfig,
    enc_heads: usize,
    visible: Var,
) -> Result<Var> {
    let vs = g.shape(visible).to_vec();
    if vs.len() != 3 || vs[1] == 0 {
        return Err(VfmError::invalid(format!(
            "global decoder needs non-empty visible tokens, got {vs:?}"
        )));
    }
    let out = decoder_stack(g, p, "gdec", dec, visible)?;
    map_pool(g, p, "gdec.map", out, enc_heads)
}

/// Mean over rows of 1 - <p_hat, t_hat>; the row norms are guarded with a
/// small epsilon so zero rows stay finite.
pub fn cosine_distance_loss<F: Scalar>(g: &mut Graph<F>, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(VfmError::shape(
            "cosine_distance_loss",
            format!("{:?} vs {:?}", g.shape(pred), g.shape(target)),
        ));
    }
    let pn = g.l2_normalize_last(pred, F::cast(COSINE_EPS))?;
    let tn = g.l2_normalize_last(target, F::cast(COSINE_EPS))?;
    let prod = g.mul(pn, tn)?;
    let sims = g.sum_last(prod)?;
    let mean = g.mean_all(sims);
    let neg = g.scale(mean, -F::one());
    let loss = g.add_scalar(neg, F::one());
    if !g.value(loss).is_finite() {
        return Err(VfmError::NonFinite { what: "cosine distance".to_string(), step: None });
    }
    Ok(loss)
}

/// All loss terms of one stage-2 batch, with handles for probing.
pub struct Stage2Loss {
    pub total: Var,
    pub token_loss: Var,
    pub global_loss: Option<Var>,
    pub predictions: Var,
    pub token_targets: Var,
}

/// Build the full stage-2 objective for one batch: teacher targets on the
/// intact clips, student encoding of the visible tokens, shuffled local
/// regression over all n positions, and (unless ablated) the global
/// distillation term. total = L_token + L_global with equal weight.
#[allow(clippy::too_many_arguments)]
pub fn stage2_loss<F: Scalar>(
    g: &mut Graph<F>,
    student: &BoundParams,
    teacher: &BoundParams,
    cfg: &Stage2Config,
    clips: &TensorData<F>,
    masks: &[MaskSpec],
    perms: &[Vec<usize>],
) -> Result<Stage2Loss> {
    let targets = teacher_targets(g, teacher, &cfg.enc, clips, cfg.token_targets_pre_norm)?;

    let grid = patchify(g, student, "encoder", &cfg.enc, clips)?;
    let grid = add_pos_emb(g, student, "encoder", grid, true)?;
    let mode = MaskMode::from_masks(masks);
    let out = encode(g, student, "encoder", &cfg.enc, grid, &mode, None, None)?;
    let visible = out.tokens;

    let mask_emb = student.var("mask_emb")?;
    let pos = student.var("dec_pos")?;
    let decoder_input = shuffle_fill(g, visible, mask_emb, pos, perms)?;
    let predictions = local_decode(g, student, &cfg.dec, decoder_input)?;

    let (pred_rows, target_rows) = if cfg.token_loss_masked_only && !masks.is_empty() {
        let b = g.shape(predictions)[0];
        let masked_idx: Vec<Vec<usize>> = masks
            .iter()
            .map(|m| (0..m.t * m.s).filter(|&i| m.grid()[i]).collect())
            .collect();
        let k = masked_idx[0].len();
        if masked_idx.iter().any(|v| v.len() != k) {
            return Err(VfmError::invalid("masked-only loss needs equal masked counts"));
        }
        if k == 0 {
            return Err(VfmError::invalid("masked-only loss with an empty mask"));
        }
        let flat: Vec<usize> = masked_idx.iter().flatten().copied().collect();
        debug_assert_eq!(flat.len(), b * k);
        (
            g.gather_batched(predictions, &flat, k)?,
            g.gather_batched(targets.token_targets, &flat, k)?,
        )
    } else {
        (predictions, targets.token_targets)
    };
    let token_loss = cosine_distance_loss(g, pred_rows, target_rows)?;

    let (total, global_loss) = if cfg.global_distill {
        let gpred = global_decode(g, student, &cfg.dec, cfg.enc.heads, visible)?;
        let gl = cosine_distance_loss(g, gpred, targets.global_target)?;
        (g.add(token_loss, gl)?, Some(gl))
    } else {
        (token_loss, None)
    };
    Ok(Stage2Loss {
        total,
        token_loss,
        global_loss,
        predictions,
        token_targets: targets.token_targets,
    })
}

// ---- training ----

pub struct Stage2Model {
    pub cfg: Stage2Config,
    pub params: ParamStore<f32>,
}

/// Student parameters: encoder initialized from the teacher checkpoint,
/// decoders and mask/pos tables fresh.
pub fn init_stage2(cfg: Stage2Config, teacher: &ParamStore<f32>) -> Result<Stage2Model> {
    let mut params = ParamStore::new();
    let mut rng = rng_from(derive_seed(cfg.seed, &[21]));
    init_encoder_params(&mut params, &mut rng, "encoder", &cfg.enc);
    init_stage2_params(&mut params, cfg.seed, &cfg.enc, &cfg.dec);
    let copied = params.load_subset(teacher, "encoder.")?;
    let expected = params.names().filter(|n| n.starts_with("encoder.")).count();
    if copied != expected {
        return Err(VfmError::Checkpoint(format!(
            "teacher checkpoint covers {copied} of {expected} encoder parameters"
        )));
    }
    Ok(Stage2Model { cfg, params })
}

fn masks_for_batch(cfg: &Stage2Config, batch: usize, step: u64) -> Result<Vec<MaskSpec>> {
    (0..batch)
        .map(|i| {
            sample_mask(
                cfg.mask_pattern,
                cfg.enc.frames,
                cfg.enc.s_h(),
                cfg.enc.s_w(),
                cfg.mask_ratio,
                derive_seed(cfg.seed, &[5, step, i as u64]),
                &cfg.blockwise,
            )
        })
        .collect()
}

fn perms_for_batch(cfg: &Stage2Config, batch: usize, step: u64) -> Vec<Vec<usize>> {
    let n = cfg.enc.tokens();
    if cfg.shuffle {
        sample_perms(batch, n, derive_seed(cfg.seed, &[7, step]))
    } else {
        identity_perms(batch, n)
    }
}

/// One optimizer step; returns (total, token, global) loss values.
pub fn stage2_step(
    model: &mut Stage2Model,
    teacher: &ParamStore<f32>,
    opt: &mut OptimizerState,
    clips: &[&VideoClip],
    step: u64,
    lr: f64,
) -> Result<(f64, f64, f64)> {
    let batch = clips_to_batch::<f32>(clips)?;
    let masks = masks_for_batch(&model.cfg, clips.len(), step)?;
    let perms = perms_for_batch(&model.cfg, clips.len(), step);

    let mut g = Graph::<f32>::new();
    let teacher_bound = bind(&mut g, teacher, |_| false);
    let student_bound = bind(&mut g, &model.params, |_| true);
    let loss =
        stage2_loss(&mut g, &student_bound, &teacher_bound, &model.cfg, &batch, &masks, &perms)?;
    let total = f64::from(g.value(loss.total).scalar_value());
    let token = f64::from(g.value(loss.token_loss).scalar_value());
    let global = loss
        .global_loss
        .map(|v| f64::from(g.value(v).scalar_value()))
        .unwrap_or(0.0);
    if !total.is_finite() {
        return Err(VfmError::NonFinite { what: "stage2 loss".to_string(), step: Some(step) });
    }
    g.backward(loss.total)?;
    let grads = collect_grads(&g, &student_bound);
    drop(g);
    adamw_step(&mut model.params, &grads, opt, lr)?;
    Ok((total, token, global))
}

/// Held-out probe of the stage-2 objective: mean cosine similarity of the
/// local decoder's predictions to the teacher's token targets under fixed
/// eval masks/permutations (1 - token loss).
pub fn eval_token_similarity(
    model: &Stage2Model,
    teacher: &ParamStore<f32>,
    clips: &[&VideoClip],
) -> Result<f64> {
    let batch = clips_to_batch::<f32>(clips)?;
    let masks = masks_for_batch(&model.cfg, clips.len(), u64::MAX)?;
    let perms = perms_for_batch(&model.cfg, clips.len(), u64::MAX);
    let mut g = Graph::<f32>::new();
    let teacher_bound = bind(&mut g, teacher, |_| false);
    let student_bound = bind(&mut g, &model.params, |_| false);
    let loss =
        stage2_loss(&mut g, &student_bound, &teacher_bound, &model.cfg, &batch, &masks, &perms)?;
    Ok(1.0 - f64::from(g.value(loss.token_loss).scalar_value()))
}

pub struct Stage2Run {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

/// Train the student against a frozen teacher checkpoint on a video-only
/// corpus. The returned checkpoint holds the student encoder plus the
/// training-only decoder/mask/pos parameters (see [`is_decoder_param`]).
pub fn train_stage2(
    config: &Config,
    teacher_ckpt: &Checkpoint,
    corpus: &Corpus,
    eval_corpus: Option<&Corpus>,
    resume: Option<Checkpoint>,
) -> Result<Stage2Run> {
    let cfg = Stage2Config::from_config(config)?;
    if corpus.is_empty() {
        return Err(VfmError::invalid("stage-2 corpus is empty"));
    }
    let seed = cfg.seed;
    let schedule = cfg.schedule;
    let total = schedule.total_steps;
    let batch_size = cfg.batch_size;
    let eval_every = cfg.eval_every;

    let teacher_hash = teacher_ckpt.params.content_hash();
    let (mut model, mut opt, start_step) = match resume {
        Some(ck) => {
            let mut m = init_stage2(cfg, &teacher_ckpt.params)?;
            if ck.params.len() != m.params.len() {
                return Err(VfmError::Checkpoint(format!(
                    "resume parameter count mismatch: {} vs {}",
                    ck.params.len(),
                    m.params.len()
                )));
            }
            m.params.load_subset(&ck.params, "")?;
            let opt =
                ck.opt.clone().unwrap_or_else(|| OptimizerState::new(AdamHyper::default()));
            (m, opt, ck.step)
        }
        None => {
            let m = init_stage2(cfg, &teacher_ckpt.params)?;
            let opt = OptimizerState::new(AdamHyper {
                weight_decay: m.cfg.weight_decay,
                ..Default::default()
            });
            (m, opt, 0)
        }
    };

    let mut metrics = Vec::new();
    for step in start_step..total {
        let idx = corpus_batch_indices(corpus.len(), step, batch_size, seed, 0);
        let clip_refs: Vec<&VideoClip> = idx.iter().map(|&i| &corpus.clips[i]).collect();
        let lr = schedule.lr_at(step);
        let (loss, token, global) =
            stage2_step(&mut model, &teacher_ckpt.params, &mut opt, &clip_refs, step, lr)?;
        let done = step + 1;
        if eval_every > 0 && (done % eval_every == 0 || done == total) {
            metrics.push(MetricRecord::new("stage2", "train", "loss", loss, seed, done));
            metrics.push(MetricRecord::new("stage2", "train", "token_loss", token, seed, done));
            metrics.push(MetricRecord::new("stage2", "train", "global_loss", global, seed, done));
            if let Some(ev) = eval_corpus {
                let refs: Vec<&VideoClip> = ev.clips.iter().collect();
                let sim = eval_token_similarity(&model, &teacher_ckpt.params, &refs)?;
                metrics.push(MetricRecord::new(
                    "stage2",
                    "eval",
                    "token_cosine_sim",
                    sim,
                    seed,
                    done,
                ));
            }
        }
    }
    debug_assert_eq!(teacher_hash, teacher_ckpt.params.content_hash());

    let checkpoint = Checkpoint::new(total, config.to_text(), model.params.clone()).with_opt(opt);
    Ok(Stage2Run { checkpoint, metrics })
}

// ---- decoder shape trace ----

/// Logical data-flow rows of the two decoder columns at a given mask ratio.
pub fn decoder_shape_trace(
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    rho: f64,
) -> (Vec<TraceRow>, Vec<TraceRow>) {
    let n = enc.tokens();
    let m = n - (rho * n as f64).round() as usize;
    let d = enc.embed_dim;
    let column = |len: usize| {
        vec![
            TraceRow::new("Data", "-", vec![len, d]),
            TraceRow::new("Projector", "MLP", vec![len, dec.hidden]),
            TraceRow::new(
                "Decoder",
                format!("MSA ({}) x {}", dec.mlp_hidden, dec.layers),
                vec![len, dec.hidden],
            ),
            TraceRow::new("Projector", "MLP", vec![len, d]),
        ]
    };
    (column(n), column(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, SyntheticCorpusSpec};
    use crate::stage1::{build_vocab, init_stage1, Stage1Config};

    fn micro_config() -> Config {
        let mut c = Config::toy_defaults();
        for (k, v) in [
            ("encoder.frames", "2"),
            ("encoder.height", "16"),
            ("encoder.width", "16"),
            ("encoder.patch_h", "8"),
            ("encoder.patch_w", "8"),
            ("encoder.embed_dim", "16"),
            ("encoder.spatial_layers", "1"),
            ("encoder.temporal_layers", "1"),
            ("encoder.heads", "2"),
            ("encoder.mlp_hidden", "32"),
            ("text.embed_dim", "16"),
            ("text.layers", "1"),
            ("text.heads", "2"),
            ("text.mlp_hidden", "32"),
            ("stage2.decoder_hidden", "8"),
            ("stage2.decoder_layers", "2"),
            ("stage2.decoder_mlp_hidden", "16"),
            ("stage2.decoder_heads", "2"),
            ("stage2.warmup_steps", "2"),
            ("stage2.total_steps", "4"),
            ("stage2.batch_size", "4"),
            ("stage2.eval_every", "0"),
        ] {
            c.set(k, v);
        }
        c
    }

    fn micro_corpus(n: usize, seed: u64) -> Corpus {
        let mut spec = SyntheticCorpusSpec::toy(n, seed);
        spec.frames = 2;
        spec.height = 16;
        spec.width = 16;
        spec.radii = vec![3.0];
        spec.speed = 1.5;
        generate(&spec).unwrap()
    }

    fn teacher_checkpoint(config: &Config, corpus: &Corpus) -> Checkpoint {
        let refs: Vec<&Corpus> = vec![corpus];
        let vocab = build_vocab(&refs, &[]);
        let cfg = Stage1Config::from_config(config, vocab.size()).unwrap();
        let model = init_stage1(cfg, vocab, 3);
        Checkpoint::new(0, config.to_text(), model.params)
    }

    #[test]
    fn teacher_targets_are_pure_and_shaped() {
        let config = micro_config();
        let corpus = micro_corpus(2, 1);
        let teacher = teacher_checkpoint(&config, &corpus);
        let cfg = Stage2Config::from_config(&config).unwrap();
        let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
        let batch = clips_to_batch::<f32>(&refs).unwrap();
        let run = || {
            let mut g = Graph::<f32>::new();
            let tb = bind(&mut g, &teacher.params, |_| false);
            let t = teacher_targets(&mut g, &tb, &cfg.enc, &batch, false).unwrap();
            (
                g.shape(t.token_targets).to_vec(),
                g.value(t.token_targets).data().to_vec(),
                g.value(t.global_target).data().to_vec(),
            )
        };
        let (shape, tok1, glob1) = run();
        let (_, tok2, glob2) = run();
        assert_eq!(shape, vec![2, 8, 16]); // [B, T*S, D] at 2x(2x2) tokens
        assert_eq!(tok1, tok2);
        assert_eq!(glob1, glob2);
    }

    #[test]
    fn shuffle_fill_identity_full_visibility() {
        // pi = identity, m = n: decoder input is tokens + pos.
        let mut g = Graph::<f64>::new();
        let vis = g.constant(TensorData::from_fn(vec![1, 4, 3], |i| i as f64));
        let mask = g.constant(TensorData::filled(vec![3], -1.0));
        let pos = g.constant(TensorData::from_fn(vec![4, 3], |i| 100.0 + i as f64));
        let out = shuffle_fill(&mut g, vis, mask, pos, &identity_perms(1, 4)).unwrap();
        for i in 0..12 {
            assert_eq!(g.value(out).data()[i], i as f64 + 100.0 + i as f64);
        }
    }

    #[test]
    fn shuffle_fill_all_masked_slots_differ_only_by_pos() {
        let mut g = Graph::<f64>::new();
        let vis = g.constant(TensorData::zeros(vec![1, 0, 3]));
        let mask = g.constant(TensorData::new(vec![3], vec![5.0, 6.0, 7.0]).unwrap());
        let pos = g.constant(TensorData::from_fn(vec![4, 3], |i| i as f64));
        let perms = sample_perms(1, 4, 9);
        let out = shuffle_fill(&mut g, vis, mask, pos, &perms).unwrap();
        let data = g.value(out).data();
        let posd = g.value(pos).data();
        for slot in 0..4 {
            for c in 0..3 {
                assert_eq!(data[slot * 3 + c] - posd[slot * 3 + c], [5.0, 6.0, 7.0][c]);
            }
        }
    }

    #[test]
    fn shuffle_fill_rejects_m_greater_than_n() {
        let mut g = Graph::<f64>::new();
        let vis = g.constant(TensorData::zeros(vec![1, 5, 3]));
        let mask = g.constant(TensorData::zeros(vec![3]));
        let pos = g.constant(TensorData::zeros(vec![4, 3]));
        assert!(shuffle_fill(&mut g, vis, mask, pos, &identity_perms(1, 4)).is_err());
    }

    #[test]
    fn decoder_input_multiset_is_visible_plus_mask_copies() {
        // Exact multiset equality of pre-position contents.
        let mut g = Graph::<f64>::new();
        let b = 2;
        let (m, n, d) = (3usize, 7usize, 4usize);
        let vis = g.constant(TensorData::from_fn(vec![b, m, d], |i| (i as f64) * 1.25 - 3.0));
        let mask = g.constant(TensorData::new(vec![d], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
        let perms = sample_perms(b, n, 31);
        let content = fill_and_shuffle(&mut g, vis, mask, &perms).unwrap();
        let data = g.value(content).data();
        let visd = g.value(vis).data();
        let maskd = g.value(mask).data();
        for bi in 0..b {
            let mut got: Vec<Vec<u64>> = (0..n)
                .map(|i| {
                    data[(bi * n + i) * d..(bi * n + i + 1) * d]
                        .iter()
                        .map(|v| v.to_bits())
                        .collect()
                })
                .collect();
            let mut want: Vec<Vec<u64>> = (0..m)
                .map(|i| {
                    visd[(bi * m + i) * d..(bi * m + i + 1) * d]
                        .iter()
                        .map(|v| v.to_bits())
                        .collect()
                })
                .collect();
            for _ in m..n {
                want.push(maskd.iter().map(|v| v.to_bits()).collect());
            }
            got.sort();
            want.sort();
            assert_eq!(got, want, "batch {bi}");
        }
    }

    #[test]
    fn cosine_distance_identities() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(TensorData::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let same = cosine_distance_loss(&mut g, a, a).unwrap();
        assert!(g.value(same).scalar_value().abs() < 1e-7);
        let x = g.constant(TensorData::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let y = g.constant(TensorData::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let orth = cosine_distance_loss(&mut g, x, y).unwrap();
        assert!((g.value(orth).scalar_value() - 1.0).abs() < 1e-7);
        let negx = g.neg(x);
        let opp = cosine_distance_loss(&mut g, x, negx).unwrap();
        assert!((g.value(opp).scalar_value() - 2.0).abs() < 1e-7);
    }

    #[test]
    fn local_decoder_shapes_match_trace() {
        let config = micro_config();
        let cfg = Stage2Config::from_config(&config).unwrap();
        let mut params = ParamStore::<f64>::new();
        init_stage2_params(&mut params, 3, &cfg.enc, &cfg.dec);
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &params, |_| false);
        let n = cfg.enc.tokens();
        let d = cfg.enc.embed_dim;
        let x = g.constant(TensorData::zeros(vec![1, n, d]));
        let out = local_decode(&mut g, &p, &cfg.dec, x).unwrap();
        assert_eq!(g.shape(out), &[1, n, d]);
        let (local, global) = decoder_shape_trace(&cfg.enc, &cfg.dec, 0.5);
        assert_eq!(local[0].dims, vec![n, d]);
        assert_eq!(local[1].dims, vec![n, cfg.dec.hidden]);
        assert_eq!(local[3].dims, vec![n, d]);
        let m = n - (0.5 * n as f64).round() as usize;
        assert_eq!(global[0].dims, vec![m, d]);
    }

    #[test]
    fn giant_decoder_trace_matches_reference() {
        let enc = EncoderConfig::giant();
        let dec = DecoderConfig::giant();
        let (local, global) = decoder_shape_trace(&enc, &dec, 0.65);
        assert_eq!(local[0].dims, vec![2048, 1408]);
        assert_eq!(local[1].dims, vec![2048, 512]);
        assert_eq!(local[2].dims, vec![2048, 512]);
        assert_eq!(local[3].dims, vec![2048, 1408]);
        assert_eq!(global[0].dims, vec![717, 1408]);
        assert_eq!(global[1].dims, vec![717, 512]);
        assert_eq!(global[3].dims, vec![717, 1408]);
    }

    #[test]
    fn global_decode_is_permutation_invariant_and_rejects_empty() {
        let config = micro_config();
        let cfg = Stage2Config::from_config(&config).unwrap();
        let mut params = ParamStore::<f64>::new();
        init_stage2_params(&mut params, 5, &cfg.enc, &cfg.dec);
        let d = cfg.enc.embed_dim;
        let toks = TensorData::from_fn(vec![1, 5, d], |i| (i as f64 * 0.37).sin());
        let run = |perm: &[usize]| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let p = bind(&mut g, &params, |_| false);
            let t = g.constant(toks.clone());
            let t = g.gather_batched(t, perm, perm.len()).unwrap();
            let out = global_decode(&mut g, &p, &cfg.dec, cfg.enc.heads, t).unwrap();
            g.value(out).data().to_vec()
        };
        let a = run(&[0, 1, 2, 3, 4]);
        let b = run(&[3, 1, 4, 0, 2]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        // Single visible token is fine; empty is not.
        let mut g = Graph::<f64>::new();
        let p = bind(&mut g, &params, |_| false);
        let one = g.constant(TensorData::zeros(vec![1, 1, d]));
        assert!(global_decode(&mut g, &p, &cfg.dec, cfg.enc.heads, one).is_ok());
        let empty = g.constant(TensorData::zeros(vec![1, 0, d]));
        assert!(global_decode(&mut g, &p, &cfg.dec, cfg.enc.heads, empty).is_err());
    }

    fn stage2_graph_setup(
        config: &Config,
        n_clips: usize,
    ) -> (Stage2Config, Checkpoint, Stage2Model, Corpus) {
        let corpus = micro_corpus(n_clips, 11);
        let teacher = teacher_checkpoint(config, &corpus);
        let cfg = Stage2Config::from_config(config).unwrap();
        let model = init_stage2(cfg.clone(), &teacher.params).unwrap();
        (cfg, teacher, model, corpus)
    }

    #[test]
    fn equal_weighting_of_loss_parts() {
        let config = micro_config();
        let (cfg, teacher, model, corpus) = stage2_graph_setup(&config, 2);
        let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
        let batch = clips_to_batch::<f32>(&refs).unwrap();
        let masks = masks_for_batch(&cfg, 2, 0).unwrap();
        let perms = perms_for_batch(&cfg, 2, 0);
        let mut g = Graph::<f32>::new();
        let tb = bind(&mut g, &teacher.params, |_| false);
        let sb = bind(&mut g, &model.params, |_| true);
        let loss = stage2_loss(&mut g, &sb, &tb, &cfg, &batch, &masks, &perms).unwrap();
        let total_v = g.value(loss.total).scalar_value();
        let token_v = g.value(loss.token_loss).scalar_value();
        let global_v = g.value(loss.global_loss.unwrap()).scalar_value();
        assert_eq!(total_v, token_v + global_v); // exact sum
        g.backward(loss.total).unwrap();
        assert_eq!(g.grad(loss.token_loss).unwrap(), &[1.0]);
        assert_eq!(g.grad(loss.global_loss.unwrap()).unwrap(), &[1.0]);
    }

    #[test]
    fn teacher_receives_no_gradients() {
        let config = micro_config();
        let (cfg, teacher, model, corpus) = stage2_graph_setup(&config, 2);
        let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
        let batch = clips_to_batch::<f32>(&refs).unwrap();
        let masks = masks_for_batch(&cfg, 2, 0).unwrap();
        let perms = perms_for_batch(&cfg, 2, 0);
        let mut g = Graph::<f32>::new();
        let tb = bind(&mut g, &teacher.params, |_| false);
        let sb = bind(&mut g, &model.params, |_| true);
        let loss = stage2_loss(&mut g, &sb, &tb, &cfg, &batch, &masks, &perms).unwrap();
        g.backward(loss.total).unwrap();
        let tgrads = collect_grads(&g, &tb);
        assert!(tgrads.is_empty(), "teacher grads: {:?}", tgrads.keys().collect::<Vec<_>>());
        let sgrads = collect_grads(&g, &sb);
        assert!(sgrads.contains_key("encoder.patch.w"));
        assert!(sgrads.contains_key("sdec.in.w"));
    }

    #[test]
    fn target_alignment_gradient_probe() {
        // Restricting the loss to canonical row i* must light up gradient
        // at prediction slot i* only.
        let config = micro_config();
        let (cfg, teacher, model, corpus) = stage2_graph_setup(&config, 1);
        let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
        let batch = clips_to_batch::<f32>(&refs).unwrap();
        let masks = masks_for_batch(&cfg, 1, 0).unwrap();
        let perms = perms_for_batch(&cfg, 1, 0);
        let n = cfg.enc.tokens();
        for target_row in [0usize, 3, n - 1] {
            let mut g = Graph::<f32>::new();
            let tb = bind(&mut g, &teacher.params, |_| false);
            let sb = bind(&mut g, &model.params, |_| true);
            let targets = teacher_targets(&mut g, &tb, &cfg.enc, &batch, false).unwrap();
            let grid = patchify(&mut g, &sb, "encoder", &cfg.enc, &batch).unwrap();
            let grid = add_pos_emb(&mut g, &sb, "encoder", grid, true).unwrap();
            let out = encode(
                &mut g,
                &sb,
                "encoder",
                &cfg.enc,
                grid,
                &MaskMode::from_masks(&masks),
                None,
                None,
            )
            .unwrap();
            let mask_emb = sb.var("mask_emb").unwrap();
            let pos = sb.var("dec_pos").unwrap();
            let dec_in = shuffle_fill(&mut g, out.tokens, mask_emb, pos, &perms).unwrap();
            let preds = local_decode(&mut g, &sb, &cfg.dec, dec_in).unwrap();
            let pred_row = g.gather_batched(preds, &[target_row], 1).unwrap();
            let target = g.gather_batched(targets.token_targets, &[target_row], 1).unwrap();
            let loss = cosine_distance_loss(&mut g, pred_row, target).unwrap();
            g.backward(loss).unwrap();
            let grad = g.grad(preds).expect("prediction grad");
            let d = cfg.enc.embed_dim;
            for slot in 0..n {
                let nonzero = grad[slot * d..(slot + 1) * d].iter().any(|&v| v != 0.0);
                assert_eq!(nonzero, slot == target_row, "slot {slot} for row {target_row}");
            }
        }
    }

    #[test]
    fn identity_no_mask_matches_straight_line_reference() {
        // pi = identity, rho = 0: stage2 loss equals a plain full-sequence
        // regression with no shuffle/fill code path, over 20 seeds.
        let config = micro_config();
        for seed in 0..20u64 {
            let corpus = micro_corpus(2, 100 + seed);
            let teacher = teacher_checkpoint(&config, &corpus);
            let mut cfg = Stage2Config::from_config(&config).unwrap();
            cfg.seed = seed;
            let model = init_stage2(cfg.clone(), &teacher.params).unwrap();
            let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
            let batch = clips_to_batch::<f32>(&refs).unwrap();
            let n = cfg.enc.tokens();
            let perms = identity_perms(2, n);

            let mut g = Graph::<f32>::new();
            let tb = bind(&mut g, &teacher.params, |_| false);
            let sb = bind(&mut g, &model.params, |_| true);
            let full = stage2_loss(&mut g, &sb, &tb, &cfg, &batch, &[], &perms).unwrap();
            let full_total = f64::from(g.value(full.total).scalar_value());

            // Reference: tokens + pos -> decoder -> cosine; global decoder on
            // the full sequence; no fill, no gather.
            let mut g2 = Graph::<f32>::new();
            let tb2 = bind(&mut g2, &teacher.params, |_| false);
            let sb2 = bind(&mut g2, &model.params, |_| true);
            let targets = teacher_targets(&mut g2, &tb2, &cfg.enc, &batch, false).unwrap();
            let grid = patchify(&mut g2, &sb2, "encoder", &cfg.enc, &batch).unwrap();
            let grid = add_pos_emb(&mut g2, &sb2, "encoder", grid, true).unwrap();
            let out =
                encode(&mut g2, &sb2, "encoder", &cfg.enc, grid, &MaskMode::None, None, None)
                    .unwrap();
            let pos = sb2.var("dec_pos").unwrap();
            let dec_in = g2.add(out.tokens, pos).unwrap();
            let preds = local_decode(&mut g2, &sb2, &cfg.dec, dec_in).unwrap();
            let tl = cosine_distance_loss(&mut g2, preds, targets.token_targets).unwrap();
            let gp = global_decode(&mut g2, &sb2, &cfg.dec, cfg.enc.heads, out.tokens).unwrap();
            let gl = cosine_distance_loss(&mut g2, gp, targets.global_target).unwrap();
            let ref_total =
                f64::from(g2.value(tl).scalar_value()) + f64::from(g2.value(gl).scalar_value());
            assert!(
                (full_total - ref_total).abs() < 1e-6,
                "seed {seed}: {full_total} vs {ref_total}"
            );
        }
    }

    #[test]
    fn stage2_loss_gradcheck() {
        use crate::check::{finite_diff_check, FD_STEP, FD_TOLERANCE};
        let config = micro_config();
        let corpus = micro_corpus(1, 17);
        let refs: Vec<&Corpus> = vec![&corpus];
        let vocab = build_vocab(&refs, &[]);
        let s1cfg = Stage1Config::from_config(&config, vocab.size()).unwrap();
        let teacher64 = init_stage1(s1cfg, vocab, 3).params.map_to::<f64>();
        let mut cfg = Stage2Config::from_config(&config).unwrap();
        cfg.mask_ratio = 0.5;
        let mut student = ParamStore::<f64>::new();
        let mut rng = rng_from(19);
        init_encoder_params(&mut student, &mut rng, "encoder", &cfg.enc);
        init_stage2_params(&mut student, 7, &cfg.enc, &cfg.dec);
        let clip_refs: Vec<&VideoClip> = corpus.clips.iter().collect();
        let batch = clips_to_batch::<f64>(&clip_refs).unwrap();
        let masks = masks_for_batch(&cfg, 1, 0).unwrap();
        let perms = perms_for_batch(&cfg, 1, 0);
        // Teacher params are constants inside the builder; only student
        // params get checked.
        let rep = finite_diff_check(&student, FD_STEP, 12, |g, sb| {
            let tb = bind(g, &teacher64, |_| false);
            let loss = stage2_loss(g, sb, &tb, &cfg, &batch, &masks, &perms)?;
            Ok(loss.total)
        })
        .unwrap();
        assert!(rep.max_rel_err < FD_TOLERANCE, "{}: {}", rep.max_rel_err, rep.worst);
    }

    #[test]
    fn zero_step_student_equals_teacher_encoder() {
        let config = {
            let mut c = micro_config();
            c.set("stage2.total_steps", "0");
            c
        };
        let corpus = micro_corpus(4, 21);
        let teacher = teacher_checkpoint(&config, &corpus);
        let run = train_stage2(&config, &teacher, &corpus, None, None).unwrap();
        let enc_only = |s: &ParamStore<f32>| s.content_hash_filtered(|n| n.starts_with("encoder."));
        assert_eq!(enc_only(&run.checkpoint.params), enc_only(&teacher.params));
    }

    #[test]
    fn teacher_hash_unchanged_by_training() {
        let config = micro_config();
        let corpus = micro_corpus(4, 23);
        let teacher = teacher_checkpoint(&config, &corpus);
        let before = teacher.params.content_hash();
        let _ = train_stage2(&config, &teacher, &corpus, None, None).unwrap();
        assert_eq!(before, teacher.params.content_hash());
    }

    #[test]
    fn stage2_resume_matches_uninterrupted() {
        let corpus = micro_corpus(6, 25);
        let mk = |steps: u64| {
            let mut c = micro_config();
            c.set("stage2.total_steps", steps.to_string());
            c
        };
        let teacher = teacher_checkpoint(&mk(4), &corpus);
        let full = train_stage2(&mk(4), &teacher, &corpus, None, None).unwrap();
        let half = train_stage2(&mk(2), &teacher, &corpus, None, None).unwrap();
        let resumed =
            train_stage2(&mk(4), &teacher, &corpus, None, Some(half.checkpoint)).unwrap();
        assert_eq!(
            full.checkpoint.params.content_hash(),
            resumed.checkpoint.params.content_hash()
        );
    }

    #[test]
    fn ablation_flags_change_the_objective() {
        let corpus = micro_corpus(2, 27);
        let base = micro_config();
        let teacher = teacher_checkpoint(&base, &corpus);
        let cfg_full = Stage2Config::from_config(&base).unwrap();
        let mut no_global = base.clone();
        no_global.set("stage2.global_distill", "false");
        let cfg_ng = Stage2Config::from_config(&no_global).unwrap();
        assert!(!cfg_ng.global_distill);
        let mut no_shuffle = base.clone();
        no_shuffle.set("stage2.shuffle", "false");
        let cfg_ns = Stage2Config::from_config(&no_shuffle).unwrap();
        assert!(!cfg_ns.shuffle);

        let model = init_stage2(cfg_full.clone(), &teacher.params).unwrap();
        let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
        let batch = clips_to_batch::<f32>(&refs).unwrap();
        let masks = masks_for_batch(&cfg_full, 2, 0).unwrap();
        let eval_with = |cfg: &Stage2Config| -> (f64, bool) {
            let perms = perms_for_batch(cfg, 2, 0);
            let mut g = Graph::<f32>::new();
            let tb = bind(&mut g, &teacher.params, |_| false);
            let sb = bind(&mut g, &model.params, |_| false);
            let loss = stage2_loss(&mut g, &sb, &tb, cfg, &batch, &masks, &perms).unwrap();
            (f64::from(g.value(loss.total).scalar_value()), loss.global_loss.is_some())
        };
        let (full_v, has_g) = eval_with(&cfg_full);
        let (ng_v, ng_has_g) = eval_with(&cfg_ng);
        assert!(has_g && !ng_has_g);
        assert!(ng_v < full_v); // dropping a non-negative part
        let (ns_v, _) = eval_with(&cfg_ns);
        assert_ne!(ns_v, full_v); // identity vs shuffled contents
    }
}
