//! Downstream harness for a frozen encoder: retrieval metrics, zero-shot
//! classification, LiT text-tower tuning, and the four adaptation regimes
//! (frozen MAP probe, MLAP, low-rank adapters, end-to-end).

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::corpus::{clips_to_batch, Corpus, VideoClip};
use crate::encoder::{add_pos_emb, encode, patchify, EncoderConfig, MaskMode};
use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::masking::{sample_tube_mask, MaskSpec};
use crate::metrics::MetricRecord;
use crate::nn::{self, layer_norm_affine, map_pool, multi_head_attention};
use crate::optim::{adamw_step, AdamHyper, OptimizerState};
use crate::params::{bind, collect_grads, BoundParams, ParamStore};
use crate::stage1::{embed_texts, embed_videos, eval_in_batch_retrieval, Stage1Config};
use crate::tensor::{Scalar, TensorData};
use crate::text::Vocab;
use crate::util::{derive_seed, rng_from, shuffle_indices, trunc_normal};

/// Recall@1/@5 for both retrieval directions over one paired gallery.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalResult {
    pub t2v_r1: f64,
    pub t2v_r5: f64,
    pub v2t_r1: f64,
    pub v2t_r5: f64,
    pub gallery: usize,
}

/// Rank-based recall from the full similarity matrix of paired rows
/// (the i-th video matches the i-th text). Ties break toward the lowest
/// index, so identical embeddings rank by position.
pub fn retrieval_eval(video_embs: &[Vec<f64>], text_embs: &[Vec<f64>]) -> Result<RetrievalResult> {
    let n = video_embs.len();
    if n == 0 || text_embs.len() != n {
        return Err(VfmError::invalid(format!(
            "retrieval needs equal non-empty sets, got {} videos / {} texts",
            n,
            text_embs.len()
        )));
    }
    let d = video_embs[0].len();
    for e in video_embs.iter().chain(text_embs) {
        if e.len() != d {
            return Err(VfmError::shape("retrieval_eval", "ragged embedding dims".to_string()));
        }
    }
    // sim[i][j] = <video_i, text_j>
    let mut sim = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = dot(&video_embs[i], &text_embs[j]);
        }
    }
    // video -> text: rank of text i among row i.
    let (mut v2t_r1, mut v2t_r5) = (0usize, 0usize);
    for i in 0..n {
        let rank = rank_of(&sim[i * n..(i + 1) * n], i);
        if rank == 0 {
            v2t_r1 += 1;
        }
        if rank < 5 {
            v2t_r5 += 1;
        }
    }
    // text -> video: rank of video j among column j.
    let (mut t2v_r1, mut t2v_r5) = (0usize, 0usize);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| sim[i * n + j]).collect();
        let rank = rank_of(&col, j);
        if rank == 0 {
            t2v_r1 += 1;
        }
        if rank < 5 {
            t2v_r5 += 1;
        }
    }
    let f = |x: usize| x as f64 / n as f64;
    Ok(RetrievalResult {
        t2v_r1: f(t2v_r1),
        t2v_r5: f(t2v_r5),
        v2t_r1: f(v2t_r1),
        v2t_r5: f(v2t_r5),
        gallery: n,
    })
}

/// Number of candidates strictly better than `target`, counting equal
/// scores at lower indices as better (lowest-index tie break).
fn rank_of(scores: &[f64], target: usize) -> usize {
    let ts = scores[target];
    let mut rank = 0;
    for (j, &s) in scores.iter().enumerate() {
        if s > ts || (s == ts && j < target) {
            rank += 1;
        }
    }
    rank
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean within each task group, then mean across groups with equal weight.
pub fn stratified_average(groups: &[(&str, Vec<f64>)]) -> Result<f64> {
    if groups.is_empty() {
        return Err(VfmError::invalid("stratified average over no groups"));
    }
    let mut acc = 0.0;
    for (name, scores) in groups {
        if scores.is_empty() {
            return Err(VfmError::invalid(format!("empty task group `{name}`")));
        }
        acc += scores.iter().sum::<f64>() / scores.len() as f64;
    }
    Ok(acc / groups.len() as f64)
}


// ---- synthetic task labels ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// shape x color classification (readable from any single frame).
    Appearance,
    /// motion-class classification (invisible in any single frame).
    Motion,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskKind::Appearance => write!(f, "appearance"),
            TaskKind::Motion => write!(f, "motion"),
        }
    }
}

/// Integer labels over a corpus for one synthetic task. Class ids follow
/// the sorted distinct factor values actually present.
#[derive(Clone, Debug)]
pub struct LabeledTask {
    pub kind: TaskKind,
    pub n_classes: usize,
    pub labels: Vec<usize>,
}

pub fn task_labels(corpus: &Corpus, kind: TaskKind) -> Result<LabeledTask> {
    let key: Vec<String> = corpus
        .rows
        .iter()
        .map(|r| match kind {
            TaskKind::Appearance => format!("{:?}|{:?}", r.shape, r.color),
            TaskKind::Motion => format!("{:?}", r.motion),
        })
        .collect();
    let mut classes: Vec<String> = key.clone();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return Err(VfmError::invalid("cannot label an empty corpus"));
    }
    let labels = key
        .iter()
        .map(|k| classes.binary_search(k).expect("key from classes"))
        .collect();
    Ok(LabeledTask { kind, n_classes: classes.len(), labels })
}

// ---- feature extraction ----

/// Frozen token features [n, D] per clip (full visibility).
pub fn extract_token_features(
    params: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    clips: &[&VideoClip],
    batch_size: usize,
    taps: Option<&[usize]>,
) -> Result<Vec<Vec<TensorData<f32>>>> {
    let mut out: Vec<Vec<TensorData<f32>>> = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let batch = clips_to_batch::<f32>(chunk)?;
        let mut g = Graph::<f32>::new();
        let p = bind(&mut g, params, |_| false);
        let grid = patchify(&mut g, &p, "encoder", enc_cfg, &batch)?;
        let grid = add_pos_emb(&mut g, &p, "encoder", grid, true)?;
        let enc = encode(&mut g, &p, "encoder", enc_cfg, grid, &MaskMode::None, taps, None)?;
        let sources: Vec<Var> = match taps {
            None => vec![enc.tokens],
            Some(_) => enc.taps.clone(),
        };
        for (bi, _) in chunk.iter().enumerate() {
            let mut per_clip = Vec::with_capacity(sources.len());
            for &src in &sources {
                let shape = g.shape(src).to_vec();
                let (n, d) = (shape[1], shape[2]);
                let data = g.value(src).data()[bi * n * d..(bi + 1) * n * d].to_vec();
                per_clip.push(TensorData::new(vec![n, d], data)?);
            }
            out.push(per_clip);
        }
    }
    Ok(out)
}

/// Evenly spaced tap layer indices over the full (spatial + temporal) depth.
pub fn mlap_tap_indices(enc_cfg: &EncoderConfig, taps: usize) -> Vec<usize> {
    let total = enc_cfg.spatial_layers + enc_cfg.temporal_layers;
    (1..=taps).map(|i| (total * i).div_ceil(taps).saturating_sub(1).min(total - 1)).collect()
}

// ---- probe heads ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    /// Trainable MAP pooler + linear classifier over frozen tokens.
    Map,
    /// Four stacked cross-attention layers over four tapped depths.
    Mlap,
    /// Linear classifier over the checkpoint's own frozen MAP embedding.
    LinearAfterMap,
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProbeKind::Map => write!(f, "map"),
            ProbeKind::Mlap => write!(f, "mlap"),
            ProbeKind::LinearAfterMap => write!(f, "linear-after-map"),
        }
    }
}

pub fn init_probe_head<F: Scalar>(
    store: &mut ParamStore<F>,
    seed: u64,
    kind: ProbeKind,
    enc_cfg: &EncoderConfig,
    n_classes: usize,
) {
    let mut rng = rng_from(derive_seed(seed, &[30]));
    let d = enc_cfg.embed_dim;
    match kind {
        ProbeKind::Map => {
            nn::init_map_head(store, &mut rng, "probe.map", d, enc_cfg.mlp_hidden);
        }
        ProbeKind::Mlap => {
            store.insert(
                "probe.mlap.query",
                TensorData::from_fn(vec![1, d], |_| trunc_normal::<F>(&mut rng, 0.02)),
            );
            for i in 0..4 {
                nn::init_layer_norm(store, &format!("probe.mlap.{i}.ln"), d);
                nn::init_attention(store, &mut rng, &format!("probe.mlap.{i}.attn"), d);
            }
            nn::init_layer_norm(store, "probe.mlap.final_ln", d);
        }
        ProbeKind::LinearAfterMap => {}
    }
    nn::init_linear(store, &mut rng, "probe.cls.w", d, n_classes, true);
}

/// Pool frozen features with the probe head and classify. `features` holds
/// one tensor per tap for MLAP, a single token tensor otherwise.
pub fn probe_logits<F: Scalar>(
    g: &mut Graph<F>,
    head: &BoundParams,
    kind: ProbeKind,
    enc_cfg: &EncoderConfig,
    features: &[Var],
) -> Result<Var> {
    let pooled = match kind {
        ProbeKind::Map => map_pool(g, head, "probe.map", features[0], enc_cfg.heads)?,
        ProbeKind::LinearAfterMap => {
            // Features are already pooled [B, D].
            features[0]
        }
        ProbeKind::Mlap => {
            let d = enc_cfg.embed_dim;
            let b = g.shape(features[0])[0];
            let query = head.var("probe.mlap.query")?;
            let q3 = g.reshape(query, &[1, 1, d])?;
            let mut q = g.broadcast_to(q3, &[b, 1, d])?;
            for (i, &tap) in features.iter().enumerate() {
                let normed = layer_norm_affine(g, head, q, &format!("probe.mlap.{i}.ln"))?;
                let att = multi_head_attention(
                    g,
                    head,
                    &format!("probe.mlap.{i}.attn"),
                    normed,
                    tap,
                    enc_cfg.heads,
                    None,
                )?;
                q = g.add(q, att)?;
            }
            let q = layer_norm_affine(g, head, q, "probe.mlap.final_ln")?;
            g.reshape(q, &[b, d])?
        }
    };
    nn::linear(g, head, pooled, "probe.cls.w", true)
}

// ---- adaptation regimes ----

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AdaptRegime {
    Frozen(ProbeKind),
    Lora { rank: usize, alpha: f64 },
    EndToEnd,
}

impl std::fmt::Display for AdaptRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AdaptRegime::Frozen(k) => write!(f, "frozen-{k}"),
            AdaptRegime::Lora { .. } => write!(f, "lora"),
            AdaptRegime::EndToEnd => write!(f, "e2e"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdaptHyper {
    pub steps: u64,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl AdaptHyper {
    pub fn from_config(c: &Config) -> Result<Self> {
        Ok(AdaptHyper {
            steps: c.require("adapt.head_steps")?,
            lr: c.require("adapt.head_lr")?,
            batch: c.require("adapt.head_batch")?,
            seed: c.require("seed")?,
        })
    }
}

pub struct AdaptOutcome {
    pub regime: AdaptRegime,
    pub accuracy: f64,
    pub trainable_scalars: usize,
    pub backbone_changed: bool,
    /// Backbone + head after training (heads under `probe.*`).
    pub params: ParamStore<f32>,
}

/// Insert low-rank adapters on every attention/MLP weight of the encoder.
/// The zero-initialized up-projection makes the adapted network equal the
/// frozen network exactly at init. Returns the adapted weight names.
pub fn lora_inject(
    params: &mut ParamStore<f32>,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if rank == 0 {
        return Err(VfmError::invalid("LoRA rank must be at least 1"));
    }
    let mut rng = rng_from(derive_seed(seed, &[31]));
    let mut targets = Vec::new();
    let names: Vec<String> = params
        .names()
        .filter(|n| {
            n.starts_with("encoder.")
                && (n.contains(".attn.") || n.contains(".mlp."))
                && !n.ends_with(".bias")
        })
        .map(str::to_string)
        .collect();
    for name in names {
        let shape = params.get(&name).expect("listed").shape().to_vec();
        if shape.len() != 2 {
            continue;
        }
        let (d_in, d_out) = (shape[0], shape[1]);
        if rank > d_in.min(d_out) {
            return Err(VfmError::invalid(format!(
                "LoRA rank {rank} exceeds min dim of `{name}` ({d_in}x{d_out})"
            )));
        }
        let std = (1.0 / d_in as f64).sqrt();
        params.insert(
            format!("{name}.lora_down"),
            TensorData::from_fn(vec![d_in, rank], |_| trunc_normal::<f32>(&mut rng, std)),
        );
        params.insert(format!("{name}.lora_up"), TensorData::zeros(vec![rank, d_out]));
        params.insert(
            format!("{name}.lora_alpha"),
            TensorData::new(vec![1], vec![alpha as f32])?,
        );
        targets.push(name);
    }
    Ok(targets)
}

/// Strip all adapter tensors, restoring the frozen network exactly.
pub fn lora_remove(params: &mut ParamStore<f32>) {
    let names: Vec<String> = params
        .names()
        .filter(|n| n.ends_with(".lora_down") || n.ends_with(".lora_up") || n.ends_with(".lora_alpha"))
        .map(str::to_string)
        .collect();
    for n in names {
        params.remove_prefix(&n);
    }
}

fn is_probe_param(name: &str) -> bool {
    name.starts_with("probe.")
}

fn is_lora_param(name: &str) -> bool {
    name.ends_with(".lora_down") || name.ends_with(".lora_up")
}

/// Train one adaptation regime on a labeled task and report eval accuracy.
///
/// Frozen regimes touch only head parameters (features are extracted once);
/// LoRA updates adapters + head; end-to-end updates everything.
#[allow(clippy::too_many_arguments)]
pub fn adapt_train(
    backbone: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    regime: AdaptRegime,
    corpus: &Corpus,
    task: &LabeledTask,
    train_idx: &[usize],
    eval_idx: &[usize],
    hyper: AdaptHyper,
) -> Result<AdaptOutcome> {
    if task.labels.len() != corpus.len() {
        return Err(VfmError::invalid(format!(
            "task has {} labels for {} clips",
            task.labels.len(),
            corpus.len()
        )));
    }
    let mut params = backbone.clone();
    let probe_kind = match regime {
        AdaptRegime::Frozen(k) => k,
        _ => ProbeKind::Map,
    };
    if let AdaptRegime::Lora { rank, alpha } = regime {
        lora_inject(&mut params, rank, alpha, hyper.seed)?;
    }
    init_probe_head(&mut params, hyper.seed, probe_kind, enc_cfg, task.n_classes);

    let trainable: Box<dyn Fn(&str) -> bool> = match regime {
        AdaptRegime::Frozen(_) => Box::new(is_probe_param),
        AdaptRegime::Lora { .. } => Box::new(|n: &str| is_probe_param(n) || is_lora_param(n)),
        AdaptRegime::EndToEnd => Box::new(|_: &str| true),
    };
    let trainable_scalars = params
        .iter()
        .filter(|(n, _)| trainable(n))
        .map(|(_, t)| t.numel())
        .sum::<usize>();
    let backbone_hash_before =
        params.content_hash_filtered(|n| !is_probe_param(n) && !is_lora_param(n) && !n.ends_with(".lora_alpha"));

    // Frozen regimes run on cached features.
    let taps_vec;
    let taps: Option<&[usize]> = match probe_kind {
        ProbeKind::Mlap => {
            taps_vec = mlap_tap_indices(enc_cfg, 4);
            Some(&taps_vec)
        }
        _ => None,
    };
    let frozen = matches!(regime, AdaptRegime::Frozen(_));
    let cached: Option<Vec<Vec<TensorData<f32>>>> = if frozen {
        let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
        match probe_kind {
            ProbeKind::LinearAfterMap => {
                let embs = frozen_map_embeddings(&params, enc_cfg, &refs, hyper.batch)?;
                Some(embs.into_iter().map(|e| vec![e]).collect())
            }
            _ => Some(extract_token_features(&params, enc_cfg, &refs, hyper.batch, taps)?),
        }
    } else {
        None
    };

    let mut opt = OptimizerState::new(AdamHyper::default());
    let order_seed = derive_seed(hyper.seed, &[32]);
    for step in 0..hyper.steps {
        let idx = batch_of(train_idx, step, hyper.batch, order_seed);
        let labels: Vec<usize> = idx.iter().map(|&i| task.labels[i]).collect();
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, &params, &trainable);
        let logits = match &cached {
            Some(feats) => {
                let stacked = stack_features(&mut g, feats, &idx)?;
                let fvars: Vec<Var> = stacked;
                probe_logits(&mut g, &bound, probe_kind, enc_cfg, &fvars)?
            }
            None => {
                let clip_refs: Vec<&VideoClip> = idx.iter().map(|&i| &corpus.clips[i]).collect();
                let batch = clips_to_batch::<f32>(&clip_refs)?;
                let grid = patchify(&mut g, &bound, "encoder", enc_cfg, &batch)?;
                let grid = add_pos_emb(&mut g, &bound, "encoder", grid, true)?;
                let enc = encode(&mut g, &bound, "encoder", enc_cfg, grid, &MaskMode::None, None, None)?;
                probe_logits(&mut g, &bound, probe_kind, enc_cfg, &[enc.tokens])?
            }
        };
        let ce = g.cross_entropy_rows(logits, &labels)?;
        let loss = g.mean_all(ce);
        if !g.value(loss).is_finite() {
            return Err(VfmError::NonFinite {
                what: format!("{regime} adaptation loss"),
                step: Some(step),
            });
        }
        g.backward(loss)?;
        let grads = collect_grads(&g, &bound);
        drop(g);
        adamw_step(&mut params, &grads, &mut opt, hyper.lr)?;
    }

    // Eval accuracy.
    let accuracy = {
        let labels: Vec<usize> = eval_idx.iter().map(|&i| task.labels[i]).collect();
        let mut correct = 0usize;
        for (chunk_idx, chunk) in eval_idx.chunks(hyper.batch.max(1)).enumerate() {
            let mut g = Graph::<f32>::new();
            let bound = bind(&mut g, &params, |_| false);
            let logits = match &cached {
                Some(feats) => {
                    let stacked = stack_features(&mut g, feats, chunk)?;
                    probe_logits(&mut g, &bound, probe_kind, enc_cfg, &stacked)?
                }
                None => {
                    let clip_refs: Vec<&VideoClip> = chunk.iter().map(|&i| &corpus.clips[i]).collect();
                    let batch = clips_to_batch::<f32>(&clip_refs)?;
                    let grid = patchify(&mut g, &bound, "encoder", enc_cfg, &batch)?;
                    let grid = add_pos_emb(&mut g, &bound, "encoder", grid, true)?;
                    let enc =
                        encode(&mut g, &bound, "encoder", enc_cfg, grid, &MaskMode::None, None, None)?;
                    probe_logits(&mut g, &bound, probe_kind, enc_cfg, &[enc.tokens])?
                }
            };
            let shape = g.shape(logits).to_vec();
            let data = g.value(logits).data();
            for (row, _) in chunk.iter().enumerate() {
                let row_logits = &data[row * shape[1]..(row + 1) * shape[1]];
                let pred = argmax(row_logits);
                if pred == labels[chunk_idx * hyper.batch.max(1) + row] {
                    correct += 1;
                }
            }
        }
        correct as f64 / eval_idx.len().max(1) as f64
    };

    let backbone_hash_after =
        params.content_hash_filtered(|n| !is_probe_param(n) && !is_lora_param(n) && !n.ends_with(".lora_alpha"));
    Ok(AdaptOutcome {
        regime,
        accuracy,
        trainable_scalars,
        backbone_changed: backbone_hash_before != backbone_hash_after,
        params,
    })
}

/// Stack cached per-clip features into per-tap batch constants.
fn stack_features<F: Scalar>(
    g: &mut Graph<F>,
    feats: &[Vec<TensorData<f32>>],
    idx: &[usize],
) -> Result<Vec<Var>> {
    let taps = feats[0].len();
    let mut out = Vec::with_capacity(taps);
    for tap in 0..taps {
        let f0 = &feats[idx[0]][tap];
        let shape = f0.shape().to_vec();
        let per = f0.numel();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(feats[i][tap].data().iter().map(|&v| F::cast(f64::from(v))));
        }
        let mut full_shape = vec![idx.len()];
        full_shape.extend(&shape);
        out.push(g.constant(TensorData::new(full_shape, data)?));
    }
    Ok(out)
}

/// Pooled (un-normalized) embeddings through a checkpoint's own MAP head.
fn frozen_map_embeddings(
    params: &ParamStore<f32>,
    enc_cfg: &EncoderConfig,
    clips: &[&VideoClip],
    batch_size: usize,
) -> Result<Vec<TensorData<f32>>> {
    if !params.contains("head.map.query") {
        return Err(VfmError::invalid(
            "linear-after-map probing needs the checkpoint's MAP head (`head.map.*`)",
        ));
    }
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let batch = clips_to_batch::<f32>(chunk)?;
        let mut g = Graph::<f32>::new();
        let p = bind(&mut g, params, |_| false);
        let grid = patchify(&mut g, &p, "encoder", enc_cfg, &batch)?;
        let grid = add_pos_emb(&mut g, &p, "encoder", grid, true)?;
        let enc = encode(&mut g, &p, "encoder", enc_cfg, grid, &MaskMode::None, None, None)?;
        let pooled = map_pool(&mut g, &p, "head.map", enc.tokens, enc_cfg.heads)?;
        let d = g.shape(pooled)[1];
        let data = g.value(pooled).data();
        for bi in 0..chunk.len() {
            out.push(TensorData::new(vec![d], data[bi * d..(bi + 1) * d].to_vec())?);
        }
    }
    Ok(out)
}

fn batch_of(pool: &[usize], step: u64, batch: usize, seed: u64) -> Vec<usize> {
    let len = pool.len();
    let mut out = Vec::with_capacity(batch);
    let mut cursor = step * batch as u64;
    while out.len() < batch {
        let epoch = cursor / len as u64;
        let offset = (cursor % len as u64) as usize;
        let order = shuffle_indices(&mut rng_from(derive_seed(seed, &[33, epoch])), len);
        let take = (len - offset).min(batch - out.len());
        out.extend(order[offset..offset + take].iter().map(|&i| pool[i]));
        cursor += take as u64;
    }
    out
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

// ---- multi-label mAP ----

/// Interpolated average precision per class, macro-averaged over classes
/// with at least one positive, excluding `excluded` class ids.
pub fn mean_average_precision(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    excluded: &[usize],
) -> Result<f64> {
    let n = scores.len();
    if n == 0 || labels.len() != n {
        return Err(VfmError::invalid("mAP needs matching non-empty scores/labels"));
    }
    let c = scores[0].len();
    let mut aps = Vec::new();
    for class in 0..c {
        if excluded.contains(&class) {
            continue;
        }
        let mut pairs: Vec<(f64, bool)> =
            (0..n).map(|i| (scores[i][class], labels[i][class])).collect();
        let n_pos = pairs.iter().filter(|(_, y)| *y).count();
        if n_pos == 0 {
            continue;
        }
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        // Precision at each positive rank, then interpolate (running max
        // from the tail).
        let mut precisions = Vec::with_capacity(n_pos);
        let mut tp = 0usize;
        for (rank, (_, y)) in pairs.iter().enumerate() {
            if *y {
                tp += 1;
                precisions.push(tp as f64 / (rank + 1) as f64);
            }
        }
        let mut best = 0.0f64;
        let mut interp = vec![0.0; precisions.len()];
        for i in (0..precisions.len()).rev() {
            best = best.max(precisions[i]);
            interp[i] = best;
        }
        aps.push(interp.iter().sum::<f64>() / n_pos as f64);
    }
    if aps.is_empty() {
        return Err(VfmError::invalid("mAP: no classes with positives"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

// ---- LiT tuning ----

pub struct LitOutcome {
    pub params: ParamStore<f32>,
    pub metrics: Vec<MetricRecord>,
}

/// LiT: lock the video encoder (taken from `video_ckpt`), initialize the
/// text tower and MAP head from the stage-1 teacher, and continue
/// contrastive training. The locked encoder's hash is asserted unchanged.
pub fn lit_tune(
    config: &Config,
    video_ckpt: &Checkpoint,
    stage1_ckpt: &Checkpoint,
    vocab: &Vocab,
    corpus: &Corpus,
    eval_corpus: Option<&Corpus>,
) -> Result<LitOutcome> {
    let s1 = Stage1Config::from_config(config, vocab.size())?;
    let steps: u64 = config.require("lit.steps")?;
    let lr: f64 = config.require("lit.base_lr")?;
    let seed: u64 = config.require("seed")?;
    let batch_size = s1.batch_size;

    // Assemble: encoder.* from the video checkpoint, text.* / head.* from
    // the stage-1 teacher.
    let mut params = ParamStore::new();
    for (name, t) in video_ckpt.params.iter() {
        if name.starts_with("encoder.") {
            params.insert(name, t.clone());
        }
    }
    for (name, t) in stage1_ckpt.params.iter() {
        if name.starts_with("text.") || name.starts_with("head.") {
            params.insert(name, t.clone());
        }
    }
    if !params.contains("encoder.patch.w") || !params.contains("text.tok_emb") {
        return Err(VfmError::Checkpoint(
            "LiT needs encoder.* in the video checkpoint and text.*/head.* in the stage-1 checkpoint"
                .to_string(),
        ));
    }
    let locked_before = params.content_hash_filtered(|n| n.starts_with("encoder."));

    let mut opt =
        OptimizerState::new(AdamHyper { weight_decay: s1.weight_decay, ..Default::default() });
    let mut metrics = Vec::new();
    let mut model = crate::stage1::Stage1Model { cfg: s1, params, vocab: vocab.clone() };
    // Only the text tower and contrastive head train.
    for step in 0..steps {
        let idx = crate::stage1::corpus_batch_indices(corpus.len(), step, batch_size, seed, 0);
        let clip_refs: Vec<&VideoClip> = idx.iter().map(|&i| &corpus.clips[i]).collect();
        let caps: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| model.vocab.encode(&corpus.rows[i].caption))
            .collect::<Result<_>>()?;
        let batch = clips_to_batch::<f32>(&clip_refs)?;
        let frames = batch.shape()[1];
        let masks: Vec<MaskSpec> = if frames > 1 && model.cfg.mask_ratio > 0.0 {
            (0..clip_refs.len())
                .map(|i| {
                    sample_tube_mask(
                        frames,
                        model.cfg.enc.spatial_tokens(),
                        model.cfg.mask_ratio,
                        derive_seed(seed, &[34, step, i as u64]),
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut g = Graph::<f32>::new();
        let bound = bind(&mut g, &model.params, |n| {
            n.starts_with("text.") || n.starts_with("head.")
        });
        let loss = crate::stage1::stage1_loss(
            &mut g,
            &bound,
            &model.cfg.enc,
            &model.cfg.text,
            &batch,
            &caps,
            &masks,
        )?;
        let loss_val = f64::from(g.value(loss).scalar_value());
        if !loss_val.is_finite() {
            return Err(VfmError::NonFinite { what: "LiT loss".to_string(), step: Some(step) });
        }
        g.backward(loss)?;
        let grads = collect_grads(&g, &bound);
        drop(g);
        adamw_step(&mut model.params, &grads, &mut opt, lr)?;
        let min_log = model.cfg.temperature_min.ln() as f32;
        let lt = model.params.get_mut("head.log_tau").expect("from stage-1 checkpoint");
        if lt.data()[0] < min_log {
            lt.data_mut()[0] = min_log;
        }
        let done = step + 1;
        if done == steps || (model.cfg.eval_every > 0 && done % model.cfg.eval_every == 0) {
            metrics.push(MetricRecord::new("lit", "train", "loss", loss_val, seed, done));
            if let Some(ev) = eval_corpus {
                let r1 = eval_in_batch_retrieval(
                    &model.params,
                    &model.cfg.enc,
                    &model.cfg.text,
                    &model.vocab,
                    ev,
                    model.cfg.gallery,
                )?;
                metrics.push(MetricRecord::new("retrieval", "lit", "r@1", r1, seed, done));
            }
        }
    }
    let locked_after = model.params.content_hash_filtered(|n| n.starts_with("encoder."));
    if locked_before != locked_after {
        return Err(VfmError::invalid("LiT modified the locked video encoder"));
    }
    Ok(LitOutcome { params: model.params, metrics })
}

// ---- zero-shot classification ----

/// score(class) = mean over templates of <video emb, text emb(template(class))>.
/// Returns per-class scores aligned to `class_words`.
pub fn zero_shot_scores(
    params: &ParamStore<f32>,
    s1: &Stage1Config,
    vocab: &Vocab,
    video_embs: &[Vec<f64>],
    class_words: &[String],
    templates: &[String],
) -> Result<Vec<Vec<f64>>> {
    if class_words.is_empty() {
        return Err(VfmError::invalid("zero-shot classification needs at least one class"));
    }
    if templates.is_empty() {
        return Err(VfmError::invalid("zero-shot classification needs at least one template"));
    }
    // One text embedding per (class, template).
    let mut prompts = Vec::with_capacity(class_words.len() * templates.len());
    for class in class_words {
        for t in templates {
            prompts.push(t.replace("{}", class));
        }
    }
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let text_embs = embed_texts(params, &s1.text, vocab, &refs, 32)?;
    let nt = templates.len();
    let mut out = Vec::with_capacity(video_embs.len());
    for v in video_embs {
        let mut scores = Vec::with_capacity(class_words.len());
        for ci in 0..class_words.len() {
            let mut s = 0.0;
            for ti in 0..nt {
                s += dot(v, &text_embs[ci * nt + ti]);
            }
            scores.push(s / nt as f64);
        }
        out.push(scores);
    }
    Ok(out)
}

/// Zero-shot accuracy of a labeled task under prompt templates
/// (single-view: one embedding per clip, no crops).
pub fn zero_shot_classify_task(
    params: &ParamStore<f32>,
    s1: &Stage1Config,
    vocab: &Vocab,
    corpus: &Corpus,
    task: &LabeledTask,
    class_words: &[String],
    templates: &[String],
) -> Result<f64> {
    let refs: Vec<&VideoClip> = corpus.clips.iter().collect();
    let v = embed_videos(params, &s1.enc, &refs, 32)?;
    let scores = zero_shot_scores(params, s1, vocab, &v, class_words, templates)?;
    let correct = scores
        .iter()
        .zip(&task.labels)
        .filter(|(s, &y)| argmax_f64(s) == y)
        .count();
    Ok(correct as f64 / corpus.len() as f64)
}

fn argmax_f64(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Multi-choice retrieval over one clip's own segment captions: accuracy of
/// picking each segment's true caption among the group.
pub fn multi_choice_accuracy(video_embs: &[Vec<f64>], text_embs: &[Vec<f64>]) -> Result<f64> {
    if video_embs.is_empty() || video_embs.len() != text_embs.len() {
        return Err(VfmError::invalid("multi-choice needs matching non-empty sets"));
    }
    let n = video_embs.len();
    let mut correct = 0;
    for i in 0..n {
        let scores: Vec<f64> = (0..n).map(|j| dot(&video_embs[i], &text_embs[j])).collect();
        if argmax_f64(&scores) == i {
            correct += 1;
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Parse the `|`-separated prompt template list from config.
pub fn templates_from_config(c: &Config) -> Vec<String> {
    c.get("eval.prompt_templates")
        .unwrap_or("a video of a {}")
        .split('|')
        .map(str::to_string)
        .collect()
}
