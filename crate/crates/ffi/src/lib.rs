//! C ABI over the trained models: load a checkpoint, embed videos/captions,
//! and read token features from other languages.
//!
//! All entry points are panic-safe, return a `VfmStatus`, and report detail
//! through `vfm_last_error`. Handles are opaque; a loaded model is
//! immutable and safe to share across threads for concurrent inference
//! calls that use separate output buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use vidfm::checkpoint::Checkpoint;
use vidfm::config::Config;
use vidfm::corpus::VideoClip;
use vidfm::stage1::{
    embed_texts, embed_videos, encoder_config_from, text_config_from, vocab_from_checkpoint,
};
use vidfm::text::Vocab;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VfmStatus {
    Ok = 0,
    NullArgument = 1,
    Io = 2,
    Parse = 3,
    Shape = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Unsupported = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty"));
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Message for the most recent error on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn vfm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque model handle: checkpoint parameters plus the configs and
/// vocabulary recovered from the checkpoint snapshot.
pub struct VfmModel {
    ck: Checkpoint,
    cfg: Config,
    enc: vidfm::encoder::EncoderConfig,
    vocab: Option<Vocab>,
}

impl VfmModel {
    fn load(path: &Path) -> Result<Self, (VfmStatus, String)> {
        let ck = Checkpoint::load(path).map_err(|e| (VfmStatus::Io, e.to_string()))?;
        let mut cfg = Config::new();
        cfg.parse_into(&ck.config_text, None)
            .map_err(|e| (VfmStatus::Parse, e.to_string()))?;
        let enc = encoder_config_from(&cfg).map_err(|e| (VfmStatus::Parse, e.to_string()))?;
        let vocab = vocab_from_checkpoint(&ck).ok();
        Ok(VfmModel { ck, cfg, enc, vocab })
    }
}

fn catch<F: FnOnce() -> VfmStatus>(f: F) -> VfmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            VfmStatus::Runtime
        }
    }
}

/// Load a checkpoint file into a model handle. On success `*out` owns the
/// model; release it with `vfm_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be valid for a
/// pointer write.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_load(path: *const c_char, out: *mut *mut VfmModel) -> VfmStatus {
    catch(|| {
        if path.is_null() || out.is_null() {
            set_error("null argument");
            return VfmStatus::NullArgument;
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return VfmStatus::Parse;
            }
        };
        match VfmModel::load(Path::new(path)) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                VfmStatus::Ok
            }
            Err((status, msg)) => {
                set_error(&msg);
                status
            }
        }
    })
}

/// Release a model handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must have come from `vfm_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_free(model: *mut VfmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding dimensionality of the video tower (also the token feature
/// width). Returns 0 for NULL handles.
///
/// # Safety
/// `model` must be a live handle from `vfm_model_load`.
#[no_mangle]
pub unsafe extern "C" fn vfm_embed_dim(model: *const VfmModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).enc.embed_dim
}

/// Training step stored in the checkpoint.
///
/// # Safety
/// `model` must be a live handle from `vfm_model_load`.
#[no_mangle]
pub unsafe extern "C" fn vfm_model_step(model: *const VfmModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).ck.step
}

/// Token count the encoder produces for a full-visibility clip at the
/// model's native frame count.
///
/// # Safety
/// `model` must be a live handle from `vfm_model_load`.
#[no_mangle]
pub unsafe extern "C" fn vfm_token_count(model: *const VfmModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).enc.tokens()
}

unsafe fn clip_from_raw(
    model: &VfmModel,
    frames: *const u8,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<VideoClip, (VfmStatus, String)> {
    if frames.is_null() {
        return Err((VfmStatus::NullArgument, "null frame buffer".to_string()));
    }
    if h != model.enc.height || w != model.enc.width || c != model.enc.channels {
        return Err((
            VfmStatus::Shape,
            format!(
                "clip {h}x{w}x{c} does not match the model input {}x{}x{}",
                model.enc.height, model.enc.width, model.enc.channels
            ),
        ));
    }
    let len = t * h * w * c;
    let data = std::slice::from_raw_parts(frames, len).to_vec();
    Ok(VideoClip { frames: t, height: h, width: w, channels: c, fps: 1.0, data })
}

/// Pooled, L2-normalized video embedding of one clip (`t*h*w*c` raw u8
/// pixels, frame-major). Requires a checkpoint that carries the MAP head
/// (stage-1 or LiT). `out` receives `vfm_embed_dim` floats.
///
/// # Safety
/// `model` must be live; `frames` must hold `t*h*w*c` bytes; `out` must
/// hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vfm_embed_video(
    model: *const VfmModel,
    frames: *const u8,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    out: *mut f32,
    out_len: usize,
) -> VfmStatus {
    catch(|| {
        if model.is_null() || out.is_null() {
            set_error("null argument");
            return VfmStatus::NullArgument;
        }
        let model = &*model;
        if !model.ck.params.contains("head.map.query") {
            set_error("checkpoint has no MAP pooling head; use vfm_token_features");
            return VfmStatus::Unsupported;
        }
        let d = model.enc.embed_dim;
        if out_len < d {
            set_error("output buffer smaller than the embedding dim");
            return VfmStatus::BufferTooSmall;
        }
        let clip = match clip_from_raw(model, frames, t, h, w, c) {
            Ok(cl) => cl,
            Err((s, m)) => {
                set_error(&m);
                return s;
            }
        };
        match embed_videos(&model.ck.params, &model.enc, &[&clip], 1) {
            Ok(embs) => {
                for (i, v) in embs[0].iter().enumerate() {
                    *out.add(i) = *v as f32;
                }
                VfmStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                VfmStatus::Runtime
            }
        }
    })
}

/// Merged encoder token features of one clip in canonical temporal-major
/// order: `t * h/patch_h * w/patch_w` rows of `vfm_embed_dim` floats.
/// Works for any checkpoint with an encoder (stage-1, stage-2, LiT).
///
/// # Safety
/// As `vfm_embed_video`; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vfm_token_features(
    model: *const VfmModel,
    frames: *const u8,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    out: *mut f32,
    out_len: usize,
) -> VfmStatus {
    catch(|| {
        if model.is_null() || out.is_null() {
            set_error("null argument");
            return VfmStatus::NullArgument;
        }
        let model = &*model;
        let clip = match clip_from_raw(model, frames, t, h, w, c) {
            Ok(cl) => cl,
            Err((s, m)) => {
                set_error(&m);
                return s;
            }
        };
        let d = model.enc.embed_dim;
        let n = t * (h / model.enc.patch_h) * (w / model.enc.patch_w);
        if out_len < n * d {
            set_error("output buffer smaller than token_count * embed_dim");
            return VfmStatus::BufferTooSmall;
        }
        match vidfm::adapt::extract_token_features(&model.ck.params, &model.enc, &[&clip], 1, None)
        {
            Ok(feats) => {
                let tokens = &feats[0][0];
                for (i, v) in tokens.data().iter().enumerate() {
                    *out.add(i) = *v;
                }
                VfmStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                VfmStatus::Runtime
            }
        }
    })
}

/// Pooled, L2-normalized text embedding of a caption. Requires a
/// checkpoint carrying the text tower and vocabulary (stage-1 or LiT).
///
/// # Safety
/// `model` must be live; `caption` NUL-terminated; `out` must hold
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn vfm_embed_text(
    model: *const VfmModel,
    caption: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> VfmStatus {
    catch(|| {
        if model.is_null() || caption.is_null() || out.is_null() {
            set_error("null argument");
            return VfmStatus::NullArgument;
        }
        let model = &*model;
        let Some(vocab) = &model.vocab else {
            set_error("checkpoint has no vocabulary/text tower");
            return VfmStatus::Unsupported;
        };
        if !model.ck.params.contains("text.tok_emb") {
            set_error("checkpoint has no text tower");
            return VfmStatus::Unsupported;
        }
        let d = model.enc.embed_dim;
        if out_len < d {
            set_error("output buffer smaller than the embedding dim");
            return VfmStatus::BufferTooSmall;
        }
        let caption = match CStr::from_ptr(caption).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("caption is not valid UTF-8");
                return VfmStatus::Parse;
            }
        };
        let text_cfg = match text_config_from(&model.cfg, vocab.size()) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return VfmStatus::Parse;
            }
        };
        match embed_texts(&model.ck.params, &text_cfg, vocab, &[caption], 1) {
            Ok(embs) => {
                for (i, v) in embs[0].iter().enumerate() {
                    *out.add(i) = *v as f32;
                }
                VfmStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                VfmStatus::Runtime
            }
        }
    })
}

/// Cosine similarity between two embeddings of equal length.
///
/// # Safety
/// `a` and `b` must hold `len` floats; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn vfm_similarity(
    a: *const f32,
    b: *const f32,
    len: usize,
    out: *mut f32,
) -> VfmStatus {
    if a.is_null() || b.is_null() || out.is_null() {
        set_error("null argument");
        return VfmStatus::NullArgument;
    }
    let av = std::slice::from_raw_parts(a, len);
    let bv = std::slice::from_raw_parts(b, len);
    let dot: f32 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
    let na: f32 = av.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = bv.iter().map(|x| x * x).sum::<f32>().sqrt();
    *out = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
    VfmStatus::Ok
}
