//! Transformer building blocks shared by the video encoder, text encoder,
//! decoders, and pooling heads.
//!
//! Parameters are addressed by dotted names inside a [`BoundParams`]; a
//! linear layer transparently picks up a low-rank adapter if
//! `{weight}.lora_down` / `{weight}.lora_up` are bound alongside it.

use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Scalar, TensorData};
use crate::util::trunc_normal;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-6;
/// Additive attention-mask value for hidden keys.
pub const MASKED_SCORE: f64 = -1e9;

/// y = x W (+ b), x [.., d_in], W [d_in, d_out]. Applies a low-rank adapter
/// when one is bound for this weight: y += (x A) B * (alpha / r).
pub fn linear<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    x: Var,
    w_name: &str,
    bias: bool,
) -> Result<Var> {
    let w = p.var(w_name)?;
    let mut y = g.matmul(x, w, false, false)?;
    if let Ok(down) = p.var(&format!("{w_name}.lora_down")) {
        let up = p.var(&format!("{w_name}.lora_up"))?;
        let alpha = p.var(&format!("{w_name}.lora_alpha"))?;
        let rank = g.shape(down)[1];
        let scale = F::cast(g.value(alpha).data()[0].to_f64c() / rank as f64);
        let xa = g.matmul(x, down, false, false)?;
        let xab = g.matmul(xa, up, false, false)?;
        let xab = g.scale(xab, scale);
        y = g.add(y, xab)?;
    }
    if bias {
        let b = p.var(&format!("{w_name}.bias"))?;
        y = g.add(y, b)?;
    }
    Ok(y)
}

/// LayerNorm with learned scale/shift at `{prefix}.g` / `{prefix}.b`.
pub fn layer_norm_affine<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let normed = g.layer_norm_last(x, F::cast(LN_EPS))?;
    let gamma = p.var(&format!("{prefix}.g"))?;
    let beta = p.var(&format!("{prefix}.b"))?;
    let scaled = g.mul(normed, gamma)?;
    g.add(scaled, beta)
}

/// Multi-head attention. `x_q` [B, Lq, D], `x_kv` [B, Lk, D];
/// `key_mask` is an additive score mask broadcastable to [B, H, Lq, Lk]
/// (0 keeps a key, `MASKED_SCORE` hides it).
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    key_mask: Option<Var>,
) -> Result<Var> {
    let (b, lq, d) = dims3(g, x_q, "attention query")?;
    let (_, lk, _) = dims3(g, x_kv, "attention keys")?;
    if d % heads != 0 {
        return Err(VfmError::shape(
            "attention",
            format!("embed dim {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let q = linear(g, p, x_q, &format!("{prefix}.wq"), true)?;
    let k = linear(g, p, x_kv, &format!("{prefix}.wk"), true)?;
    let v = linear(g, p, x_kv, &format!("{prefix}.wv"), true)?;
    let split = |g: &mut Graph<F>, x: Var, l: usize| -> Result<Var> {
        let x = g.reshape(x, &[b, l, heads, dh])?;
        g.permute(x, &[0, 2, 1, 3]) // [B, H, L, dh]
    };
    let q = split(g, q, lq)?;
    let k = split(g, k, lk)?;
    let v = split(g, v, lk)?;
    let mut scores = g.matmul(q, k, false, true)?; // [B, H, Lq, Lk]
    scores = g.scale(scores, F::cast(1.0 / (dh as f64).sqrt()));
    if let Some(m) = key_mask {
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax_last(scores)?;
    let ctx = g.matmul(attn, v, false, false)?; // [B, H, Lq, dh]
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, lq, d])?;
    linear(g, p, ctx, &format!("{prefix}.wo"), true)
}

/// Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x)).
pub fn transformer_block<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    heads: usize,
    key_mask: Option<Var>,
) -> Result<Var> {
    let h = layer_norm_affine(g, p, x, &format!("{prefix}.ln1"))?;
    let a = multi_head_attention(g, p, &format!("{prefix}.attn"), h, h, heads, key_mask)?;
    let x = g.add(x, a)?;
    let h = layer_norm_affine(g, p, x, &format!("{prefix}.ln2"))?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    g.add(x, m)
}

/// Two-layer GELU MLP at `{prefix}.w1` / `{prefix}.w2`.
pub fn mlp<F: Scalar>(g: &mut Graph<F>, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, x, &format!("{prefix}.w1"), true)?;
    let h = g.gelu(h);
    linear(g, p, h, &format!("{prefix}.w2"), true)
}

/// Attention pooling: one learned query cross-attends the token sequence,
/// then a residual MLP; output [B, D] is independent of sequence length.
///
/// Tokens are re-ordered into a canonical (lexicographic-by-content) order
/// before any arithmetic, so the pooled output is bit-identical under any
/// permutation of the input sequence.
pub fn map_pool<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    tokens: Var,
    heads: usize,
) -> Result<Var> {
    let (b, l, d) = dims3(g, tokens, "map_pool tokens")?;
    if l == 0 {
        return Err(VfmError::invalid("map_pool on an empty token sequence"));
    }
    // Canonical content order per batch row.
    let idx = canonical_order(g.value(tokens).data(), b, l, d);
    let tokens = g.gather_batched(tokens, &idx, l)?;

    let query = p.var(&format!("{prefix}.query"))?; // [1, D]
    let q3 = g.reshape(query, &[1, 1, d])?;
    let q = g.broadcast_to(q3, &[b, 1, d])?;
    let pooled = multi_head_attention(g, p, &format!("{prefix}.attn"), q, tokens, heads, None)?;
    let h = layer_norm_affine(g, p, pooled, &format!("{prefix}.ln"))?;
    let m = mlp(g, p, &format!("{prefix}.mlp"), h)?;
    let out = g.add(pooled, m)?;
    g.reshape(out, &[b, d])
}

/// Per-batch argsort of rows by lexicographic content (total order on the
/// raw values), flattened for `gather_batched`.
fn canonical_order<F: Scalar>(data: &[F], b: usize, l: usize, d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(b * l);
    for bi in 0..b {
        let base = bi * l * d;
        let mut idx: Vec<usize> = (0..l).collect();
        idx.sort_by(|&i, &j| {
            let ri = &data[base + i * d..base + i * d + d];
            let rj = &data[base + j * d..base + j * d + d];
            for t in 0..d {
                match ri[t].partial_cmp(&rj[t]) {
                    Some(std::cmp::Ordering::Equal) | None => continue,
                    Some(o) => return o,
                }
            }
            std::cmp::Ordering::Equal
        });
        out.extend(idx);
    }
    out
}

// ---- initialization ----

/// Fan-in scaled truncated normal for a [d_in, d_out] weight.
pub fn init_linear<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
) {
    let std = (1.0 / d_in as f64).sqrt();
    store.insert(
        name,
        TensorData::from_fn(vec![d_in, d_out], |_| trunc_normal::<F>(rng, std)),
    );
    if bias {
        store.insert(format!("{name}.bias"), TensorData::zeros(vec![d_out]));
    }
}

pub fn init_layer_norm<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), TensorData::filled(vec![d], F::one()));
    store.insert(format!("{prefix}.b"), TensorData::zeros(vec![d]));
}

pub fn init_attention<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
) {
    for w in ["wq", "wk", "wv", "wo"] {
        init_linear(store, rng, &format!("{prefix}.{w}"), d, d, true);
    }
}

pub fn init_block<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_attention(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, rng, &format!("{prefix}.mlp.w1"), d, mlp_hidden, true);
    init_linear(store, rng, &format!("{prefix}.mlp.w2"), mlp_hidden, d, true);
}

pub fn init_map_head<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d: usize,
    mlp_hidden: usize,
) {
    store.insert(
        format!("{prefix}.query"),
        TensorData::from_fn(vec![1, d], |_| trunc_normal::<F>(rng, 0.02)),
    );
    init_attention(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln"), d);
    init_linear(store, rng, &format!("{prefix}.mlp.w1"), d, mlp_hidden, true);
    init_linear(store, rng, &format!("{prefix}.mlp.w2"), mlp_hidden, d, true);
}

fn dims3<F: Scalar>(g: &Graph<F>, v: Var, what: &'static str) -> Result<(usize, usize, usize)> {
    let s = g.shape(v);
    if s.len() != 3 {
        return Err(VfmError::shape(what, format!("want [B, L, D], got {s:?}")));
    }
    Ok((s[0], s[1], s[2]))
}

/// Additive key mask [rows, 1, 1, l] from a visibility predicate
/// (true = visible).
pub fn key_mask_from<F: Scalar>(
    g: &mut Graph<F>,
    rows: usize,
    l: usize,
    visible: impl Fn(usize, usize) -> bool,
) -> Var {
    let mut data = vec![F::zero(); rows * l];
    for r in 0..rows {
        for j in 0..l {
            if !visible(r, j) {
                data[r * l + j] = F::cast(MASKED_SCORE);
            }
        }
    }
    let t = TensorData::new(vec![rows, 1, 1, l], data).expect("shape");
    g.constant(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::bind;
    use crate::util::rng_from;

    fn store_with_map(d: usize) -> ParamStore<f64> {
        let mut rng = rng_from(11);
        let mut s = ParamStore::new();
        init_map_head(&mut s, &mut rng, "map", d, d * 2);
        s
    }

    fn random_tokens(b: usize, l: usize, d: usize, seed: u64) -> TensorData<f64> {
        let mut rng = rng_from(seed);
        TensorData::from_fn(vec![b, l, d], |_| trunc_normal::<f64>(&mut rng, 1.0))
    }

    #[test]
    fn map_pool_is_bit_exact_under_permutation() {
        let d = 8;
        let store = store_with_map(d);
        let toks = random_tokens(2, 7, d, 3);

        let run = |perm: &[usize]| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let bound = bind(&mut g, &store, |_| false);
            let t = g.constant(toks.clone());
            let idx: Vec<usize> = (0..2).flat_map(|_| perm.iter().copied()).collect();
            let t = g.gather_batched(t, &idx, perm.len()).unwrap();
            let out = map_pool(&mut g, &bound, "map", t, 2).unwrap();
            g.value(out).data().to_vec()
        };

        let id: Vec<usize> = (0..7).collect();
        let shuffled = vec![4, 0, 6, 2, 5, 1, 3];
        assert_eq!(run(&id), run(&shuffled));
    }

    #[test]
    fn map_pool_identical_tokens_match_single() {
        let d = 6;
        let store = store_with_map(d);
        let mut row = Vec::new();
        let mut rng = rng_from(9);
        for _ in 0..d {
            row.push(trunc_normal::<f64>(&mut rng, 1.0));
        }
        let many: Vec<f64> = row.iter().cycle().take(5 * d).cloned().collect();

        let run = |l: usize, data: Vec<f64>| -> Vec<f64> {
            let mut g = Graph::<f64>::new();
            let bound = bind(&mut g, &store, |_| false);
            let t = g.constant(TensorData::new(vec![1, l, d], data).unwrap());
            let out = map_pool(&mut g, &bound, "map", t, 2).unwrap();
            g.value(out).data().to_vec()
        };

        let a = run(5, many);
        let b = run(1, row);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn map_pool_rejects_empty() {
        let store = store_with_map(4);
        let mut g = Graph::<f64>::new();
        let bound = bind(&mut g, &store, |_| false);
        let t = g.constant(TensorData::zeros(vec![1, 0, 4]));
        assert!(map_pool(&mut g, &bound, "map", t, 2).is_err());
    }

    #[test]
    fn attention_key_mask_hides_tokens() {
        // Output with a masked key must equal output with that key removed.
        let d = 4;
        let mut rng = rng_from(5);
        let mut store = ParamStore::<f64>::new();
        init_attention(&mut store, &mut rng, "attn", d);

        let toks = random_tokens(1, 3, d, 8);
        let q = random_tokens(1, 2, d, 13);

        let masked = {
            let mut g = Graph::<f64>::new();
            let bound = bind(&mut g, &store, |_| false);
            let t = g.constant(toks.clone());
            let qv = g.constant(q.clone());
            let mask = key_mask_from(&mut g, 1, 3, |_, j| j != 2);
            let out = multi_head_attention(&mut g, &bound, "attn", qv, t, 2, Some(mask)).unwrap();
            g.value(out).data().to_vec()
        };
        let removed = {
            let mut g = Graph::<f64>::new();
            let bound = bind(&mut g, &store, |_| false);
            let t = g.constant(toks.clone());
            let t = g.gather(t, 1, &[0, 1]).unwrap();
            let qv = g.constant(q);
            let out = multi_head_attention(&mut g, &bound, "attn", qv, t, 2, None).unwrap();
            g.value(out).data().to_vec()
        };
        for (a, b) in masked.iter().zip(&removed) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn block_gradcheck() {
        use crate::check::{finite_diff_check, FD_STEP, FD_TOLERANCE};
        let d = 6;
        let mut rng = rng_from(21);
        let mut store = ParamStore::<f64>::new();
        init_block(&mut store, &mut rng, "blk", d, 12);
        store.insert("x", random_tokens(2, 3, d, 31));
        let rep = finite_diff_check(&store, FD_STEP, 48, |g, b| {
            let x = b.var("x")?;
            let y = transformer_block(g, b, "blk", x, 2, None)?;
            Ok(g.mean_all(y))
        })
        .unwrap();
        assert!(rep.max_rel_err < FD_TOLERANCE, "{}: {}", rep.max_rel_err, rep.worst);
    }

    #[test]
    fn map_head_gradcheck() {
        use crate::check::{finite_diff_check, FD_STEP, FD_TOLERANCE};
        let d = 6;
        let mut store = store_with_map(d);
        store.insert("x", random_tokens(1, 4, d, 17));
        let rep = finite_diff_check(&store, FD_STEP, 48, |g, b| {
            let x = b.var("x")?;
            let y = map_pool(g, b, "map", x, 2)?;
            Ok(g.mean_all(y))
        })
        .unwrap();
        assert!(rep.max_rel_err < FD_TOLERANCE, "{}: {}", rep.max_rel_err, rep.worst);
    }
}
