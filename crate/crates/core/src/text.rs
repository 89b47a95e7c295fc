//! Word-level vocabulary and the text encoder tower.
//!
//! Captions tokenize by lowercase whitespace splitting; the table is built
//! from the corpus plus any prompt-template words. A learnable class token
//! is appended at the end of each (truncated) sentence and its output
//! position supplies the text embedding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::nn::{self, key_mask_from, layer_norm_affine, transformer_block};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Scalar, TensorData};
use crate::util::trunc_normal;
use rand_chacha::ChaCha8Rng;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
const RESERVED: usize = 2;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from an iterator of sentences; word ids follow first-seen order
    /// after the reserved PAD/CLS slots.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        for sentence in sentences {
            for w in tokenize_words(sentence) {
                if !index.contains_key(&w) {
                    index.insert(w.clone(), RESERVED + words.len());
                    words.push(w);
                }
            }
        }
        Vocab { words, index }
    }

    /// Rebuild from an explicit word list (checkpoint restore path).
    pub fn from_words(words: Vec<String>) -> Self {
        let mut v = Vocab { words, index: HashMap::new() };
        v.rebuild_index();
        v
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), RESERVED + i))
            .collect();
    }

    pub fn size(&self) -> usize {
        RESERVED + self.words.len()
    }

    pub fn id_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Tokenize a caption to ids; unknown words are an error.
    pub fn encode(&self, caption: &str) -> Result<Vec<usize>> {
        tokenize_words(caption)
            .into_iter()
            .map(|w| self.id_of(&w).ok_or(VfmError::Vocab(w)))
            .collect()
    }
}

pub fn tokenize_words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl TextConfig {
    pub fn toy(vocab_size: usize) -> Self {
        TextConfig { vocab_size, max_len: 16, embed_dim: 64, layers: 2, heads: 4, mlp_hidden: 256 }
    }
}

pub fn init_text_params<F: Scalar>(
    store: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &TextConfig,
) {
    let d = cfg.embed_dim;
    store.insert(
        format!("{prefix}.tok_emb"),
        TensorData::from_fn(vec![cfg.vocab_size, d], |_| trunc_normal::<F>(rng, 0.02)),
    );
    store.insert(
        format!("{prefix}.pos_emb"),
        TensorData::from_fn(vec![cfg.max_len + 1, d], |_| trunc_normal::<F>(rng, 0.02)),
    );
    for i in 0..cfg.layers {
        nn::init_block(store, rng, &format!("{prefix}.block.{i}"), d, cfg.mlp_hidden);
    }
    nn::init_layer_norm(store, &format!("{prefix}.final_ln"), d);
}

/// Encode a batch of tokenized captions to [B, D] embeddings taken at each
/// sentence's appended class token. Captions longer than `max_len` are
/// truncated before the class token is appended.
pub fn encode_text_batch<F: Scalar>(
    g: &mut Graph<F>,
    p: &BoundParams,
    prefix: &str,
    cfg: &TextConfig,
    token_batch: &[Vec<usize>],
) -> Result<Var> {
    let b = token_batch.len();
    if b == 0 {
        return Err(VfmError::invalid("empty text batch"));
    }
    for ids in token_batch {
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(VfmError::invalid(format!(
                "token id {bad} out of range for vocab of {}",
                cfg.vocab_size
            )));
        }
    }
    let lens: Vec<usize> = token_batch.iter().map(|t| t.len().min(cfg.max_len) + 1).collect();
    let l_max = *lens.iter().max().expect("non-empty");
    // PAD-filled id matrix with CLS at each sentence end.
    let mut ids = vec![PAD_ID; b * l_max];
    for (bi, toks) in token_batch.iter().enumerate() {
        let n = toks.len().min(cfg.max_len);
        ids[bi * l_max..bi * l_max + n].copy_from_slice(&toks[..n]);
        ids[bi * l_max + n] = CLS_ID;
    }

    let tok_emb = p.var(&format!("{prefix}.tok_emb"))?;
    let emb = g.gather(tok_emb, 0, &ids)?;
    let mut x = g.reshape(emb, &[b, l_max, cfg.embed_dim])?;
    let pos = p.var(&format!("{prefix}.pos_emb"))?;
    let pos_rows: Vec<usize> = (0..l_max).collect();
    let pos = g.gather(pos, 0, &pos_rows)?;
    x = g.add(x, pos)?;

    let mask = key_mask_from(g, b, l_max, |bi, j| j < lens[bi]);
    for i in 0..cfg.layers {
        x = transformer_block(g, p, &format!("{prefix}.block.{i}"), x, cfg.heads, Some(mask))?;
    }
    x = layer_norm_affine(g, p, x, &format!("{prefix}.final_ln"))?;

    // Class-token rows: position len-1 of each sample.
    let flat = g.reshape(x, &[b * l_max, cfg.embed_dim])?;
    let cls_rows: Vec<usize> = lens.iter().enumerate().map(|(bi, &l)| bi * l_max + l - 1).collect();
    g.gather(flat, 0, &cls_rows)
}
