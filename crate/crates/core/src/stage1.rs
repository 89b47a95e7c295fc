//! Stage-1 video-text contrastive training.
//!
//! A video tower (factorized encoder + MAP pooling) and a text tower are
//! aligned with a symmetric cross-entropy over in-batch similarities.
//! Video tokens are dropped per clip with tube masks; image corpora ride
//! along as one-frame videos with no masking. Multiple corpora alternate
//! as whole mini-batches on a deterministic size-proportional schedule.

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::corpus::{clips_to_batch, Corpus, VideoClip};
use crate::encoder::{
    add_pos_emb, encode, patchify, AttentionLayout, EncoderConfig, MaskMode,
};
use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::masking::{sample_tube_mask, MaskSpec};
use crate::metrics::MetricRecord;
use crate::nn::{init_map_head, map_pool};
use crate::optim::{adamw_step, AdamHyper, DecayKind, LrSchedule, OptimizerState};
use crate::params::{bind, collect_grads, BoundParams, GradMap, ParamStore};
use crate::tensor::{Scalar, TensorData};
use crate::text::{encode_text_batch, init_text_params, TextConfig, Vocab};
use crate::util::{derive_seed, rng_from, shuffle_indices};

pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Stage1Config {
    pub enc: EncoderConfig,
    pub text: TextConfig,
    pub mask_ratio: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub temperature_init: f64,
    pub temperature_min: f64,
    pub grad_clip: f64,
    pub eval_every: u64,
    pub gallery: usize,
    pub seed: u64,
}

pub fn encoder_config_from(c: &Config) -> Result<EncoderConfig> {
    let layout = match c.get("encoder.layout").unwrap_or("factorized") {
        "joint" => AttentionLayout::Joint,
        _ => AttentionLayout::Factorized,
    };
    let frames = c.require("encoder.frames")?;
    let cfg = EncoderConfig {
        frames,
        height: c.require("encoder.height")?,
        width: c.require("encoder.width")?,
        channels: c.require("encoder.channels")?,
        patch_h: c.require("encoder.patch_h")?,
        patch_w: c.require("encoder.patch_w")?,
        embed_dim: c.require("encoder.embed_dim")?,
        spatial_layers: c.require("encoder.spatial_layers")?,
        temporal_layers: c.require("encoder.temporal_layers")?,
        heads: c.require("encoder.heads")?,
        mlp_hidden: c.require("encoder.mlp_hidden")?,
        t_max: c.get_or("encoder.t_max", frames)?,
        layout,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn text_config_from(c: &Config, vocab_size: usize) -> Result<TextConfig> {
    Ok(TextConfig {
        vocab_size,
        max_len: c.require("text.max_len")?,
        embed_dim: c.require("text.embed_dim")?,
        layers: c.require("text.layers")?,
        heads: c.require("text.heads")?,
        mlp_hidden: c.require("text.mlp_hidden")?,
    })
}

impl Stage1Config {
    pub fn from_config(c: &Config, vocab_size: usize) -> Result<Self> {
        let enc = encoder_config_from(c)?;
        let text = text_config_from(c, vocab_size)?;
        if text.embed_dim != enc.embed_dim {
            return Err(VfmError::Config(format!(
                "contrastive towers need matching dims (video {}, text {})",
                enc.embed_dim, text.embed_dim
            )));
        }
        let kind = match c.get("stage1.schedule").unwrap_or("linear") {
            "cosine" => DecayKind::Cosine,
            _ => DecayKind::Linear,
        };
        Ok(Stage1Config {
            enc,
            text,
            mask_ratio: c.require("stage1.mask_ratio")?,
            schedule: LrSchedule {
                kind,
                base_lr: c.require("stage1.base_lr")?,
                warmup_steps: c.require("stage1.warmup_steps")?,
                total_steps: c.require("stage1.total_steps")?,
                floor_lr: c.require("stage1.floor_lr")?,
            },
            weight_decay: c.require("stage1.weight_decay")?,
            batch_size: c.require("stage1.batch_size")?,
            temperature_init: c.require("stage1.temperature_init")?,
            temperature_min: c.require("stage1.temperature_min")?,
            grad_clip: c.require("stage1.grad_clip")?,
            eval_every: c.require("stage1.eval_every")?,
            gallery: c.require("eval.gallery")?,
            seed: c.require("seed")?,
        })
    }
}

/// Video encoder + text encoder + MAP head + learnable temperature.
pub struct Stage1Model {
    pub cfg: Stage1Config,
    pub params: ParamStore<f32>,
    pub vocab: Vocab,
}

pub fn init_stage1(cfg: Stage1Config, vocab: Vocab, seed: u64) -> Stage1Model {
    let mut rng = rng_from(derive_seed(seed, &[10]));
    let mut params = ParamStore::new();
    crate::encoder::init_encoder_params(&mut params, &mut rng, "encoder", &cfg.enc);
    init_text_params(&mut params, &mut rng, "text", &cfg.text);
    init_map_head(&mut params, &mut rng, "head.map", cfg.enc.embed_dim, cfg.enc.mlp_hidden);
    params.insert(
        "head.log_tau",
        TensorData::new(vec![1], vec![cfg.temperature_init.ln() as f32]).expect("scalar"),
    );
    Stage1Model { cfg, params, vocab }
}

// ---- loss pieces ----

/// logits[i][j] = <v_i, t_j> / tau. Inputs must be L2-normalized [B, D].
pub fn similarity_logits<F: Scalar>(
    g: &mut Graph<F>,
    video_embs: Var,
    text_embs: Var,
    tau: Var,
) -> Result<Var> {
    let (sv, st) = (g.shape(video_embs).to_vec(), g.shape(text_embs).to_vec());
    if sv.len() != 2 || sv != st {
        return Err(VfmError::shape(
            "similarity_logits",
            format!("want matching [B, D], got {sv:?} vs {st:?}"),
        ));
    }
    if !g.value(tau).is_finite() {
        return Err(VfmError::NonFinite { what: "temperature".to_string(), step: None });
    }
    let sims = g.matmul(video_embs, text_embs, false, true)?;
    g.div(sims, tau)
}

/// Mean of row-wise CE (video -> text) and column-wise CE (text -> video),
/// targets on the diagonal.
pub fn symmetric_ce_loss<F: Scalar>(g: &mut Graph<F>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(VfmError::shape(
            "symmetric_ce_loss",
            format!("want square [B, B] with B >= 1, got {s:?}"),
        ));
    }
    let b = s[0];
    let diag: Vec<usize> = (0..b).collect();
    let row_ce = g.cross_entropy_rows(logits, &diag)?;
    let row_loss = g.mean_all(row_ce);
    let logits_t = g.permute(logits, &[1, 0])?;
    let col_ce = g.cross_entropy_rows(logits_t, &diag)?;
    let col_loss = g.mean_all(col_ce);
    let sum = g.add(row_loss, col_loss)?;
    Ok(g.scale(sum, F::cast(0.5)))
}

/// Full video tower: patchify -> pos emb -> (masked) encode -> MAP -> L2.
pub fn video_tower<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    enc_cfg: &EncoderConfig,
    clips: &TensorData<F>,
    masks: &[MaskSpec],
) -> Result<Var> {
    let grid = patchify(g, p, "encoder", enc_cfg, clips)?;
    let grid = add_pos_emb(g, p, "encoder", grid, true)?;
    let mode = MaskMode::from_masks(masks);
    let out = encode(g, p, "encoder", enc_cfg, grid, &mode, None, None)?;
    let pooled = map_pool(g, p, "head.map", out.tokens, enc_cfg.heads)?;
    g.l2_normalize_last(pooled, F::cast(L2_EPS))
}

/// Text tower: transformer class-token embedding, L2-normalized.
pub fn text_tower<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    text_cfg: &TextConfig,
    captions: &[Vec<usize>],
) -> Result<Var> {
    let embs = encode_text_batch(g, p, "text", text_cfg, captions)?;
    g.l2_normalize_last(embs, F::cast(L2_EPS))
}

/// The symmetric contrastive loss over one homogeneous batch.
pub fn stage1_loss<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    enc_cfg: &EncoderConfig,
    text_cfg: &TextConfig,
    clips: &TensorData<F>,
    captions: &[Vec<usize>],
    masks: &[MaskSpec],
) -> Result<Var> {
    let v = video_tower(g, p, enc_cfg, clips, masks)?;
    let t = text_tower(g, p, text_cfg, captions)?;
    let log_tau = p.var("head.log_tau")?;
    let tau = g.exp(log_tau);
    let logits = similarity_logits(g, v, t, tau)?;
    symmetric_ce_loss(g, logits)
}

// ---- alternating gradient descent over corpora ----

/// Deterministic size-proportional interleave (largest remainder): returns
/// the corpus index for every step in [0, steps). Empty corpora never
/// appear; ties break toward the lower index.
pub fn agd_schedule(sizes: &[usize], steps: u64) -> Result<Vec<usize>> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(VfmError::invalid("all corpora are empty"));
    }
    let w: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
    let mut counts = vec![0u64; sizes.len()];
    let mut out = Vec::with_capacity(steps as usize);
    for t in 0..steps {
        let mut best = usize::MAX;
        let mut best_score = f64::NEG_INFINITY;
        for (i, &wi) in w.iter().enumerate() {
            if sizes[i] == 0 {
                continue;
            }
            let score = wi * (t + 1) as f64 - counts[i] as f64;
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        counts[best] += 1;
        out.push(best);
    }
    Ok(out)
}

/// Indices for the `batches_before`-th batch drawn from one corpus:
/// sequential slices of a per-epoch shuffled order, wrapping across epochs.
pub fn corpus_batch_indices(
    corpus_len: usize,
    batches_before: u64,
    batch_size: usize,
    seed: u64,
    corpus_idx: usize,
) -> Vec<usize> {
    assert!(corpus_len > 0);
    let mut out = Vec::with_capacity(batch_size);
    let mut cursor = batches_before * batch_size as u64;
    while out.len() < batch_size {
        let epoch = cursor / corpus_len as u64;
        let offset = (cursor % corpus_len as u64) as usize;
        let order = shuffle_indices(
            &mut rng_from(derive_seed(seed, &[3, corpus_idx as u64, epoch])),
            corpus_len,
        );
        let take = (corpus_len - offset).min(batch_size - out.len());
        out.extend_from_slice(&order[offset..offset + take]);
        cursor += take as u64;
    }
    out
}

/// Next batch under AGD: the step's corpus plus the clip indices drawn from
/// it. Pure function of (sizes, step, seed).
pub fn agd_next_batch(
    sizes: &[usize],
    step: u64,
    batch_size: usize,
    seed: u64,
) -> Result<(usize, Vec<usize>)> {
    let schedule = agd_schedule(sizes, step + 1)?;
    let corpus_idx = schedule[step as usize];
    let batches_before = schedule[..step as usize].iter().filter(|&&c| c == corpus_idx).count();
    let idx = corpus_batch_indices(
        sizes[corpus_idx],
        batches_before as u64,
        batch_size,
        seed,
        corpus_idx,
    );
    Ok((corpus_idx, idx))
}

// ---- training ----

fn clip_grads(grads: &mut GradMap<f32>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g {
            sq += f64::from(v) * f64::from(v);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for v in g {
                *v *= scale;
            }
        }
    }
}

/// One optimizer step on one homogeneous batch. Samples a tube mask per
/// clip (multi-frame batches only), backprops the symmetric CE, applies
/// AdamW, and clamps the temperature from below.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step(
    model: &mut Stage1Model,
    opt: &mut OptimizerState,
    clips: &[&VideoClip],
    captions: &[&str],
    step: u64,
    lr: f64,
    corpus_name: &str,
) -> Result<f64> {
    let batch = clips_to_batch::<f32>(clips)?;
    let frames = batch.shape()[1];
    let masks: Vec<MaskSpec> = if frames > 1 && model.cfg.mask_ratio > 0.0 {
        clips
            .iter()
            .enumerate()
            .map(|(i, _)| {
                sample_tube_mask(
                    frames,
                    model.cfg.enc.spatial_tokens(),
                    model.cfg.mask_ratio,
                    derive_seed(model.cfg.seed, &[4, step, i as u64]),
                )
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let token_batch: Vec<Vec<usize>> =
        captions.iter().map(|c| model.vocab.encode(c)).collect::<Result<_>>()?;

    let mut g = Graph::<f32>::new();
    let bound = bind(&mut g, &model.params, |_| true);
    let loss = stage1_loss(
        &mut g,
        &bound,
        &model.cfg.enc,
        &model.cfg.text,
        &batch,
        &token_batch,
        &masks,
    )?;
    let loss_val = f64::from(g.value(loss).scalar_value());
    if !loss_val.is_finite() {
        return Err(VfmError::NonFinite {
            what: format!("stage1 loss (corpus `{corpus_name}`)"),
            step: Some(step),
        });
    }
    g.backward(loss)?;
    let mut grads = collect_grads(&g, &bound);
    drop(g);
    clip_grads(&mut grads, model.cfg.grad_clip);
    adamw_step(&mut model.params, &grads, opt, lr)?;
    // tau >= temperature_min always.
    let min_log = model.cfg.temperature_min.ln() as f32;
    let lt = model.params.get_mut("head.log_tau").expect("inserted at init");
    if lt.data()[0] < min_log {
        lt.data_mut()[0] = min_log;
    }
    Ok(loss_val)
}

/// Normalized video embeddings for a clip list (no masking), batched.
pub fn embed_videos(
    params: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    clips: &[&VideoClip],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let batch = clips_to_batch::<f32>(chunk)?;
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, params, |_| false);
        let v = video_tower(&mut g, &bound, enc_cfg, &batch, &[])?;
        let d = g.shape(v)[1];
        let data = g.value(v).data();
        for i in 0..chunk.len() {
            out.push(data[i * d..(i + 1) * d].iter().map(|&x| f64::from(x)).collect());
        }
    }
    Ok(out)
}

/// Normalized text embeddings for caption strings, batched.
pub fn embed_texts(
    params: &ParamStore<f32>,
    text_cfg: &TextConfig,
    vocab: &Vocab,
    captions: &[&str],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(batch_size.max(1)) {
        let tokens: Vec<Vec<usize>> =
            chunk.iter().map(|c| vocab.encode(c)).collect::<Result<_>>()?;
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, params, |_| false);
        let t = text_tower(&mut g, &bound, text_cfg, &tokens)?;
        let d = g.shape(t)[1];
        let data = g.value(t).data();
        for i in 0..chunk.len() {
            out.push(data[i * d..(i + 1) * d].iter().map(|&x| f64::from(x)).collect());
        }
    }
    Ok(out)
}

/// Mean in-batch retrieval R@1 over consecutive galleries of a held-out
/// corpus (both directions averaged).
pub fn eval_in_batch_retrieval(
    params: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    text_cfg: &TextConfig,
    vocab: &Vocab,
    corpus: &Corpus,
    gallery: usize,
) -> Result<f64> {
    let clips: Vec<&VideoClip> = corpus.clips.iter().collect();
    let caps: Vec<&str> = corpus.rows.iter().map(|r| r.caption.as_str()).collect();
    let v = embed_videos(params, enc_cfg, &clips, gallery)?;
    let t = embed_texts(params, text_cfg, vocab, &caps, gallery)?;
    let mut scores = Vec::new();
    let mut i = 0;
    while i + gallery <= v.len() {
        let r = crate::adapt::retrieval_eval(&v[i..i + gallery].to_vec(), &t[i..i + gallery].to_vec())?;
        scores.push((r.t2v_r1 + r.v2t_r1) / 2.0);
        i += gallery;
    }
    if scores.is_empty() {
        return Err(VfmError::invalid(format!(
            "held-out corpus smaller than one gallery of {gallery}"
        )));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Build the shared vocabulary: every corpus caption plus extra strings
/// (prompt templates, class words), in deterministic order.
pub fn build_vocab(corpora: &[&Corpus], extra: &[String]) -> Vocab {
    let mut sentences: Vec<&str> = Vec::new();
    for c in corpora {
        for row in &c.rows {
            sentences.push(&row.caption);
        }
    }
    for e in extra {
        sentences.push(e);
    }
    Vocab::build(sentences)
}

pub struct Stage1Run {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
}

/// Train from `config` over `corpora` (AGD-interleaved), optionally
/// resuming. The returned checkpoint carries towers, MAP head, temperature,
/// optimizer state, and the config snapshot.
pub fn train_stage1(
    config: &Config,
    corpora: &[Corpus],
    eval_corpus: Option<&Corpus>,
    extra_vocab: &[String],
    resume: Option<Checkpoint>,
) -> Result<Stage1Run> {
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let vocab = build_vocab(&refs, extra_vocab);
    let cfg = Stage1Config::from_config(config, vocab.size())?;
    let seed = cfg.seed;
    let schedule = cfg.schedule;
    let total = schedule.total_steps;
    let batch_size = cfg.batch_size;
    let eval_every = cfg.eval_every;
    let gallery = cfg.gallery;

    let (mut model, mut opt, start_step) = match resume {
        Some(ck) => {
            let mut m = init_stage1(cfg, vocab, seed);
            if ck.params.len() != m.params.len() {
                return Err(VfmError::Checkpoint(format!(
                    "resume parameter count mismatch: {} vs {}",
                    ck.params.len(),
                    m.params.len()
                )));
            }
            m.params.load_subset(&ck.params, "")?;
            let opt = ck
                .opt
                .clone()
                .unwrap_or_else(|| OptimizerState::new(AdamHyper::default()));
            (m, opt, ck.step)
        }
        None => {
            let m = init_stage1(cfg, vocab, seed);
            let opt = OptimizerState::new(AdamHyper {
                weight_decay: m.cfg.weight_decay,
                ..Default::default()
            });
            (m, opt, 0)
        }
    };

    let sizes: Vec<usize> = corpora.iter().map(Corpus::len).collect();
    let mut metrics = Vec::new();
    for step in start_step..total {
        let (ci, idx) = agd_next_batch(&sizes, step, batch_size, seed)?;
        let clip_refs: Vec<&VideoClip> = idx.iter().map(|&i| &corpora[ci].clips[i]).collect();
        let caps: Vec<&str> = idx.iter().map(|&i| corpora[ci].rows[i].caption.as_str()).collect();
        let lr = schedule.lr_at(step);
        let loss = stage1_step(
            &mut model,
            &mut opt,
            &clip_refs,
            &caps,
            step,
            lr,
            &format!("corpus{ci}"),
        )?;
        let done = step + 1;
        if eval_every > 0 && (done % eval_every == 0 || done == total) {
            metrics.push(MetricRecord::new("stage1", "train", "loss", loss, seed, done));
            if let Some(ev) = eval_corpus {
                let r1 = eval_in_batch_retrieval(
                    &model.params,
                    &model.cfg.enc,
                    &model.cfg.text,
                    &model.vocab,
                    ev,
                    gallery,
                )?;
                metrics.push(MetricRecord::new("retrieval", "in-batch", "r@1", r1, seed, done));
            }
        }
    }

    let mut snapshot = config.clone();
    snapshot.set("vocab.words", model.vocab.words().join(" "));
    let checkpoint =
        Checkpoint::new(total, snapshot.to_text(), model.params.clone()).with_opt(opt);
    Ok(Stage1Run { checkpoint, metrics })
}

/// Restore the vocabulary stored in a checkpoint's config snapshot.
pub fn vocab_from_checkpoint(ck: &Checkpoint) -> Result<Vocab> {
    let mut cfg = Config::new();
    cfg.parse_into(&ck.config_text, None)?;
    let words = cfg
        .get("vocab.words")
        .ok_or_else(|| VfmError::Checkpoint("checkpoint carries no vocabulary".to_string()))?;
    Ok(Vocab::from_words(words.split_whitespace().map(str::to_string).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, SyntheticCorpusSpec};

    fn micro_config(total_steps: u64, batch: usize) -> Config {
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
            ("encoder.eval_frames", "2"),
            ("text.embed_dim", "16"),
            ("text.layers", "1"),
            ("text.heads", "2"),
            ("text.mlp_hidden", "32"),
            ("stage1.warmup_steps", "2"),
            ("stage1.eval_every", "0"),
            ("eval.gallery", "4"),
        ] {
            c.set(k, v);
        }
        c.set("stage1.total_steps", total_steps.to_string());
        c.set("stage1.batch_size", batch.to_string());
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

    #[test]
    fn symmetric_ce_of_zero_logits_is_ln_b() {
        for b in [1usize, 3, 32] {
            let mut g = Graph::<f64>::new();
            let z = g.constant(TensorData::zeros(vec![b, b]));
            let loss = symmetric_ce_loss(&mut g, z).unwrap();
            let expect = (b as f64).ln();
            assert!((g.value(loss).scalar_value() - expect).abs() < 1e-9, "B={b}");
        }
    }

    #[test]
    fn symmetric_ce_strong_diagonal_approaches_zero() {
        let mut g = Graph::<f64>::new();
        let b = 4;
        let data: Vec<f64> = (0..b * b)
            .map(|i| if i % (b + 1) == 0 { 50.0 } else { 0.0 })
            .collect();
        let logits = g.constant(TensorData::new(vec![b, b], data).unwrap());
        let loss = symmetric_ce_loss(&mut g, logits).unwrap();
        assert!(g.value(loss).scalar_value() < 1e-12);
    }

    #[test]
    fn symmetric_ce_two_by_two_matches_oracle() {
        // [[2,0],[0,2]]: every row/column CE is ln(1 + e^-2).
        let mut g = Graph::<f64>::new();
        let logits = g.constant(TensorData::new(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let loss = symmetric_ce_loss(&mut g, logits).unwrap();
        let oracle = (1.0f64 + (-2.0f64).exp()).ln(); // 0.126928...
        assert!((g.value(loss).scalar_value() - oracle).abs() < 1e-12);
        assert!((oracle - 0.1269280110429726).abs() < 1e-15);
    }

    #[test]
    fn symmetric_ce_rejects_non_square() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(TensorData::zeros(vec![2, 3]));
        assert!(symmetric_ce_loss(&mut g, z).is_err());
    }

    #[test]
    fn symmetric_ce_transpose_invariant() {
        let mut r = rng_from(31);
        use rand::Rng;
        let data: Vec<f64> = (0..25).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::<f64>::new();
        let logits = g.constant(TensorData::new(vec![5, 5], data).unwrap());
        let a = symmetric_ce_loss(&mut g, logits).unwrap();
        let lt = g.permute(logits, &[1, 0]).unwrap();
        let b = symmetric_ce_loss(&mut g, lt).unwrap();
        assert!((g.value(a).scalar_value() - g.value(b).scalar_value()).abs() < 1e-12);
    }

    #[test]
    fn loss_invariant_to_joint_row_permutation() {
        use rand::Rng;
        let mut r = rng_from(37);
        let b = 6;
        let d = 8;
        let norm_rows = |data: &mut Vec<f64>| {
            for i in 0..b {
                let n: f64 = data[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
                for j in (i * d)..((i + 1) * d) {
                    data[j] /= n;
                }
            }
        };
        let mut v: Vec<f64> = (0..b * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut t: Vec<f64> = (0..b * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        norm_rows(&mut v);
        norm_rows(&mut t);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let apply = |data: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; b * d];
            for (dst, &src) in perm.iter().enumerate() {
                out[dst * d..(dst + 1) * d].copy_from_slice(&data[src * d..(src + 1) * d]);
            }
            out
        };
        let eval = |vd: Vec<f64>, td: Vec<f64>| -> f64 {
            let mut g = Graph::<f64>::new();
            let vv = g.constant(TensorData::new(vec![b, d], vd).unwrap());
            let tv = g.constant(TensorData::new(vec![b, d], td).unwrap());
            let tau = g.scalar(0.1);
            let logits = similarity_logits(&mut g, vv, tv, tau).unwrap();
            let loss = symmetric_ce_loss(&mut g, logits).unwrap();
            g.value(loss).scalar_value()
        };
        let base = eval(v.clone(), t.clone());
        let permuted = eval(apply(&v), apply(&t));
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn similarity_logits_examples() {
        // Orthonormal v == t at tau=1 -> identity matrix.
        let mut g = Graph::<f64>::new();
        let eye = TensorData::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let v = g.constant(eye.clone());
        let t = g.constant(eye);
        let tau = g.scalar(1.0);
        let logits = similarity_logits(&mut g, v, t, tau).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(g.value(logits).data()[i * 3 + j], expect);
            }
        }
        // Scaling tau by c divides logits by c; argmax rows unchanged.
        let tau2 = g.scalar(2.0);
        let logits2 = similarity_logits(&mut g, v, t, tau2).unwrap();
        for (a, b) in g.value(logits).data().to_vec().iter().zip(g.value(logits2).data()) {
            assert!((a / 2.0 - b).abs() < 1e-15);
        }
        // B=2 with v0=t0, v1=t1=-v0.
        let v2 = g.constant(TensorData::new(vec![2, 2], vec![1., 0., -1., 0.]).unwrap());
        let tau = g.scalar(0.5);
        let l = similarity_logits(&mut g, v2, v2, tau).unwrap();
        assert_eq!(g.value(l).data(), &[2.0, -2.0, -2.0, 2.0]);
        // Non-finite temperature rejected.
        let bad = g.scalar(f64::NAN);
        assert!(similarity_logits(&mut g, v2, v2, bad).is_err());
    }

    #[test]
    fn agd_single_corpus_always_selected() {
        let s = agd_schedule(&[10], 20).unwrap();
        assert!(s.iter().all(|&c| c == 0));
    }

    #[test]
    fn agd_equal_sizes_alternate_strictly() {
        let s = agd_schedule(&[8, 8], 10).unwrap();
        assert_eq!(s, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn agd_three_to_one_proportion() {
        let s = agd_schedule(&[300, 100], 4000).unwrap();
        let c0 = s.iter().filter(|&&c| c == 0).count();
        let c1 = s.len() - c0;
        assert!((c0 as f64 - 3000.0).abs() <= 40.0, "c0 = {c0}");
        assert!((c1 as f64 - 1000.0).abs() <= 40.0, "c1 = {c1}");
    }

    #[test]
    fn agd_skips_empty_and_rejects_all_empty() {
        let s = agd_schedule(&[0, 5], 10).unwrap();
        assert!(s.iter().all(|&c| c == 1));
        assert!(agd_schedule(&[0, 0], 5).is_err());
    }

    #[test]
    fn agd_batches_never_mix_and_cover_epochs() {
        // Pure function of (sizes, step, seed); batches come wholly from
        // one corpus and sweep shuffled epochs without repeats.
        let sizes = [6usize, 3];
        let (c0, b0) = agd_next_batch(&sizes, 0, 4, 9).unwrap();
        let (c0b, b0b) = agd_next_batch(&sizes, 0, 4, 9).unwrap();
        assert_eq!((c0, &b0), (c0b, &b0b));
        assert_eq!(c0, 0);
        // 2:1 weights put corpus 1 at step 1, corpus 0 again at step 2.
        let (c1, b1) = agd_next_batch(&sizes, 1, 4, 9).unwrap();
        assert_eq!(c1, 1);
        assert!(b1.iter().all(|&i| i < 3));
        let (c2, b2) = agd_next_batch(&sizes, 2, 4, 9).unwrap();
        assert_eq!(c2, 0);
        // Corpus 0's first two batches sweep its epoch 0 (6 items) exactly
        // before entering epoch 1.
        let seen: Vec<usize> = b0.iter().chain(&b2).copied().collect();
        let mut first_epoch: Vec<usize> = seen[..6].to_vec();
        first_epoch.sort_unstable();
        assert_eq!(first_epoch, vec![0, 1, 2, 3, 4, 5]);
        assert!(b0.iter().all(|&i| i < 6));
    }

    #[test]
    fn contrastive_loss_gradcheck_with_temperature() {
        use crate::check::{finite_diff_check, FD_STEP, FD_TOLERANCE};
        // Gradient w.r.t. embeddings and tau through normalize/similarity/CE.
        let mut store = ParamStore::<f64>::new();
        let mut r = rng_from(41);
        store.insert("v", TensorData::from_fn(vec![3, 5], |_| crate::util::trunc_normal(&mut r, 1.0)));
        store.insert("t", TensorData::from_fn(vec![3, 5], |_| crate::util::trunc_normal(&mut r, 1.0)));
        store.insert("log_tau", TensorData::new(vec![1], vec![(0.07f64).ln()]).unwrap());
        let rep = finite_diff_check(&store, FD_STEP, 64, |g, p| {
            let v = p.var("v")?;
            let t = p.var("t")?;
            let vn = g.l2_normalize_last(v, L2_EPS)?;
            let tn = g.l2_normalize_last(t, L2_EPS)?;
            let tau = p.var("log_tau")?;
            let tau = g.exp(tau);
            let logits = similarity_logits(g, vn, tn, tau)?;
            symmetric_ce_loss(g, logits)
        })
        .unwrap();
        assert!(rep.max_rel_err < FD_TOLERANCE, "{}: {}", rep.max_rel_err, rep.worst);
    }

    #[test]
    fn map_output_shape_is_mask_invariant() {
        // rho = 0 and rho = 0.5 produce identical pooled shapes.
        let config = micro_config(1, 4);
        let corpus = micro_corpus(4, 1);
        let refs: Vec<&Corpus> = vec![&corpus];
        let vocab = build_vocab(&refs, &[]);
        let cfg = Stage1Config::from_config(&config, vocab.size()).unwrap();
        let model = init_stage1(cfg, vocab, 0);
        let clips: Vec<&VideoClip> = corpus.clips.iter().collect();
        let batch = clips_to_batch::<f32>(&clips).unwrap();
        let shape_for = |masks: &[MaskSpec]| -> Vec<usize> {
            let mut g = Graph::<f32>::new();
            let bound = bind(&mut g, &model.params, |_| false);
            let v = video_tower(&mut g, &bound, &model.cfg.enc, &batch, masks).unwrap();
            g.shape(v).to_vec()
        };
        let no_mask = shape_for(&[]);
        let masks: Vec<MaskSpec> = (0..4)
            .map(|i| sample_tube_mask(2, 4, 0.5, i).unwrap())
            .collect();
        assert_eq!(no_mask, shape_for(&masks));
    }

    #[test]
    fn one_frame_image_batch_runs() {
        let config = micro_config(1, 4);
        let mut spec = SyntheticCorpusSpec::toy(4, 2);
        spec.frames = 1;
        spec.height = 16;
        spec.width = 16;
        spec.radii = vec![3.0];
        spec.speed = 0.0;
        let corpus = generate(&spec).unwrap();
        let refs: Vec<&Corpus> = vec![&corpus];
        let vocab = build_vocab(&refs, &[]);
        let cfg = Stage1Config::from_config(&config, vocab.size()).unwrap();
        let mut model = init_stage1(cfg, vocab, 0);
        let mut opt = OptimizerState::new(AdamHyper::default());
        let clips: Vec<&VideoClip> = corpus.clips.iter().collect();
        let caps: Vec<&str> = corpus.rows.iter().map(|r| r.caption.as_str()).collect();
        let loss = stage1_step(&mut model, &mut opt, &clips, &caps, 0, 1e-3, "images").unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn single_step_descends_on_average() {
        // Mean loss drop over 10 seeds on a fixed tiny batch.
        let config = micro_config(1, 4);
        let corpus = micro_corpus(4, 3);
        let refs: Vec<&Corpus> = vec![&corpus];
        let vocab = build_vocab(&refs, &[]);
        let mut deltas = Vec::new();
        for seed in 0..10u64 {
            let cfg = Stage1Config::from_config(&config, vocab.size()).unwrap();
            let mut model = init_stage1(cfg, vocab.clone(), seed);
            let mut opt = OptimizerState::new(AdamHyper::default());
            let clips: Vec<&VideoClip> = corpus.clips.iter().collect();
            let batch = clips_to_batch::<f32>(&clips).unwrap();
            let tokens: Vec<Vec<usize>> = corpus
                .rows
                .iter()
                .map(|r| model.vocab.encode(&r.caption).unwrap())
                .collect();
            let masks: Vec<MaskSpec> = (0..4)
                .map(|i| sample_tube_mask(2, 4, 0.5, derive_seed(seed, &[4, 0, i])).unwrap())
                .collect();
            let eval = |params: &ParamStore<f32>| -> f64 {
                let mut g = Graph::<f32>::new();
                let bound = bind(&mut g, params, |_| false);
                let loss = stage1_loss(
                    &mut g,
                    &bound,
                    &model.cfg.enc,
                    &model.cfg.text,
                    &batch,
                    &tokens,
                    &masks,
                )
                .unwrap();
                f64::from(g.value(loss).scalar_value())
            };
            let before = eval(&model.params);
            let mut g = Graph::<f32>::new();
            let bound = bind(&mut g, &model.params, |_| true);
            let loss = stage1_loss(
                &mut g,
                &bound,
                &model.cfg.enc,
                &model.cfg.text,
                &batch,
                &tokens,
                &masks,
            )
            .unwrap();
            g.backward(loss).unwrap();
            let grads = collect_grads(&g, &bound);
            drop(g);
            adamw_step(&mut model.params, &grads, &mut opt, 1e-3).unwrap();
            deltas.push(before - eval(&model.params));
        }
        let mean: f64 = deltas.iter().sum::<f64>() / deltas.len() as f64;
        assert!(mean > 0.0, "mean loss delta {mean} over seeds: {deltas:?}");
    }

    #[test]
    fn zero_step_training_returns_init() {
        let config = micro_config(0, 4);
        let corpus = micro_corpus(4, 5);
        let run = train_stage1(&config, std::slice::from_ref(&corpus), None, &[], None).unwrap();
        let refs: Vec<&Corpus> = vec![&corpus];
        let vocab = build_vocab(&refs, &[]);
        let cfg = Stage1Config::from_config(&config, vocab.size()).unwrap();
        let fresh = init_stage1(cfg, vocab, 0);
        assert_eq!(run.checkpoint.step, 0);
        assert_eq!(run.checkpoint.params.content_hash(), fresh.params.content_hash());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let corpus = micro_corpus(8, 7);
        // Uninterrupted 6 steps.
        let full = train_stage1(&micro_config(6, 4), std::slice::from_ref(&corpus), None, &[], None)
            .unwrap();
        // 3 steps, checkpoint, then resume to 6.
        let half = train_stage1(&micro_config(3, 4), std::slice::from_ref(&corpus), None, &[], None)
            .unwrap();
        let resumed = train_stage1(
            &micro_config(6, 4),
            std::slice::from_ref(&corpus),
            None,
            &[],
            Some(half.checkpoint),
        )
        .unwrap();
        assert_eq!(
            full.checkpoint.params.content_hash(),
            resumed.checkpoint.params.content_hash(),
            "resumed run diverged"
        );
    }
}
