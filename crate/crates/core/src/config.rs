//! Flat key=value configuration with include support.
//!
//! `#` starts a comment, `include <path>` splices another file, later keys
//! win. The default table carries every pretraining constant as a named
//! key at reference scale; the toy preset overrides the sizes that matter
//! for desk-scale runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, VfmError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    map: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Self {
        Config::default()
    }

    /// Reference-scale defaults: both stages' optimizer constants, mask
    /// ratios, encoder/decoder dims, and the eval/adaptation knobs.
    pub fn paper_defaults() -> Self {
        let mut c = Config::new();
        for (k, v) in [
            ("seed", "0"),
            // encoder (giant scale)
            ("encoder.frames", "8"),
            ("encoder.height", "288"),
            ("encoder.width", "288"),
            ("encoder.channels", "3"),
            ("encoder.patch_h", "18"),
            ("encoder.patch_w", "18"),
            ("encoder.embed_dim", "1408"),
            ("encoder.spatial_layers", "40"),
            ("encoder.temporal_layers", "4"),
            ("encoder.heads", "16"),
            ("encoder.mlp_hidden", "6144"),
            ("encoder.layout", "factorized"),
            ("encoder.eval_frames", "16"),
            // text tower
            ("text.max_len", "16"),
            ("text.embed_dim", "1408"),
            ("text.layers", "4"),
            ("text.heads", "16"),
            ("text.mlp_hidden", "6144"),
            // stage 1
            ("stage1.base_lr", "5e-4"),
            ("stage1.schedule", "linear"),
            ("stage1.floor_lr", "0"),
            ("stage1.warmup_steps", "20000"),
            ("stage1.total_steps", "200000"),
            ("stage1.weight_decay", "1e-4"),
            ("stage1.batch_size", "4096"),
            ("stage1.mask_ratio", "0.5"),
            ("stage1.mask_pattern", "tube"),
            ("stage1.temperature_init", "0.07"),
            ("stage1.temperature_min", "0.01"),
            ("stage1.grad_clip", "0"),
            ("stage1.eval_every", "500"),
            ("stage1.checkpoint_every", "1000"),
            // stage 2
            ("stage2.base_lr", "5e-4"),
            ("stage2.schedule", "cosine"),
            ("stage2.floor_lr", "1e-5"),
            ("stage2.warmup_steps", "25000"),
            ("stage2.total_steps", "300000"),
            ("stage2.weight_decay", "0.05"),
            ("stage2.batch_size", "4096"),
            ("stage2.mask_ratio", "0.65"),
            ("stage2.mask_pattern", "blockwise"),
            ("stage2.decoder_hidden", "512"),
            ("stage2.decoder_layers", "4"),
            ("stage2.decoder_mlp_hidden", "2048"),
            ("stage2.shuffle", "true"),
            ("stage2.global_distill", "true"),
            ("stage2.token_loss_masked_only", "false"),
            ("stage2.token_targets_pre_norm", "false"),
            ("stage2.eval_every", "500"),
            ("stage2.grad_clip", "0"),
            // blockwise mask sampler
            ("mask.min_block_area", "4"),
            ("mask.aspect_min", "0.3"),
            ("mask.tube_blocks", "false"),
            ("mask.exact_count", "true"),
            // synthetic corpus
            ("corpus.n_clips", "512"),
            ("corpus.fps", "4"),
            ("corpus.shapes", "circle,square,triangle,cross"),
            ("corpus.colors", "red,blue"),
            ("corpus.motions", "left,right,up,down"),
            ("corpus.radii", "5,7"),
            ("corpus.speed", "2.5"),
            ("corpus.templates", "motion"),
            ("corpus.tier", "clean"),
            ("corpus.corruption_rate", "0.3"),
            ("corpus.background_noise", "0"),
            // adaptation / eval
            ("adapt.lora_rank", "64"),
            ("adapt.lora_alpha", "64"),
            ("adapt.head_steps", "500"),
            ("adapt.head_lr", "1e-3"),
            ("adapt.head_batch", "32"),
            ("adapt.mlap_taps", "4"),
            ("lit.steps", "1000"),
            ("lit.base_lr", "5e-4"),
            ("eval.gallery", "32"),
            (
                "eval.prompt_templates",
                "a video of a {}|a photo of a {}|a {}|one {} in the scene|footage of a {}|a clip showing a {}|the {}",
            ),
        ] {
            c.map.insert(k.to_string(), v.to_string());
        }
        c
    }

    /// Desk-scale preset: toy encoder dims and short schedules.
    pub fn toy_defaults() -> Self {
        let mut c = Self::paper_defaults();
        for (k, v) in [
            ("encoder.frames", "4"),
            ("encoder.height", "32"),
            ("encoder.width", "32"),
            ("encoder.patch_h", "8"),
            ("encoder.patch_w", "8"),
            ("encoder.embed_dim", "64"),
            ("encoder.spatial_layers", "2"),
            ("encoder.temporal_layers", "2"),
            ("encoder.heads", "4"),
            ("encoder.mlp_hidden", "256"),
            ("encoder.eval_frames", "4"),
            ("text.embed_dim", "64"),
            ("text.layers", "2"),
            ("text.heads", "4"),
            ("text.mlp_hidden", "256"),
            ("stage1.warmup_steps", "100"),
            ("stage1.total_steps", "2000"),
            ("stage1.batch_size", "32"),
            ("stage2.warmup_steps", "100"),
            ("stage2.total_steps", "1000"),
            ("stage2.batch_size", "16"),
            ("stage2.decoder_hidden", "48"),
            ("stage2.decoder_mlp_hidden", "192"),
        ] {
            c.map.insert(k.to_string(), v.to_string());
        }
        c
    }

    pub fn parse_into(&mut self, text: &str, base_dir: Option<&Path>) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("include ") {
                let inc = rest.trim();
                let path = match base_dir {
                    Some(d) => d.join(inc),
                    None => Path::new(inc).to_path_buf(),
                };
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    VfmError::Config(format!("include `{}`: {e}", path.display()))
                })?;
                self.parse_into(&text, path.parent())?;
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(VfmError::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Config::new();
        let text = std::fs::read_to_string(path)?;
        c.parse_into(&text, path.parent())?;
        Ok(c)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.map.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| VfmError::Config(format!("missing key `{key}`")))?;
        raw.parse()
            .map_err(|_| VfmError::Config(format!("key `{key}`: cannot parse `{raw}`")))
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| VfmError::Config(format!("key `{key}`: cannot parse `{raw}`"))),
        }
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            None => Ok(false),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(other) => Err(VfmError::Config(format!("key `{key}`: not a bool `{other}`"))),
        }
    }

    /// Canonical text form (sorted keys), used as the checkpoint snapshot.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}
