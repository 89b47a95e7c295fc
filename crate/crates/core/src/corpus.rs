//! Synthetic video-caption corpus.
//!
//! Clips show a single colored shape on a black background following a
//! motion law; captions are templated from the factor sets. Two properties
//! are load-bearing and asserted at generation time:
//!   - captions are a deterministic function of (factors, template, seed);
//!   - motion classes are indistinguishable from frame 0 alone (every
//!     motion draws its start pose from the same distribution and renders
//!     identically at t = 0).
//!
//! Storage is codec-free: raw u8 frames behind a tiny header, one file per
//! clip, plus a line-delimited JSON manifest.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VfmError};
use crate::tensor::{Scalar, TensorData};
use crate::util::{derive_seed, rng_from};

pub const CLIP_MAGIC: &[u8; 4] = b"VCLP";
pub const CLIP_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ColorKind {
    pub fn word(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::Magenta => "magenta",
            ColorKind::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorKind::Red => [225, 55, 45],
            ColorKind::Green => [55, 200, 70],
            ColorKind::Blue => [60, 90, 225],
            ColorKind::Yellow => [230, 220, 50],
            ColorKind::Magenta => [210, 60, 200],
            ColorKind::Cyan => [60, 210, 215],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Left,
    Right,
    Up,
    Down,
    UpLeft,
    UpRight,
    DownLeft,
    DownRight,
    Static,
    Rotate,
}

impl MotionKind {
    pub fn word(self) -> &'static str {
        match self {
            MotionKind::Left => "left",
            MotionKind::Right => "right",
            MotionKind::Up => "up",
            MotionKind::Down => "down",
            MotionKind::UpLeft => "upleft",
            MotionKind::UpRight => "upright",
            MotionKind::DownLeft => "downleft",
            MotionKind::DownRight => "downright",
            MotionKind::Static => "still",
            MotionKind::Rotate => "spinning",
        }
    }

    pub fn phrase(self) -> String {
        match self {
            MotionKind::Static => "staying still".to_string(),
            MotionKind::Rotate => "spinning in place".to_string(),
            m => format!("moving {}", m.word()),
        }
    }

    fn velocity(self, speed: f64) -> (f64, f64) {
        let diag = speed / std::f64::consts::SQRT_2;
        match self {
            MotionKind::Left => (-speed, 0.0),
            MotionKind::Right => (speed, 0.0),
            MotionKind::Up => (0.0, -speed),
            MotionKind::Down => (0.0, speed),
            MotionKind::UpLeft => (-diag, -diag),
            MotionKind::UpRight => (diag, -diag),
            MotionKind::DownLeft => (-diag, diag),
            MotionKind::DownRight => (diag, diag),
            MotionKind::Static | MotionKind::Rotate => (0.0, 0.0),
        }
    }

    fn spin(self) -> f64 {
        // Radians per frame for rotating shapes.
        if self == MotionKind::Rotate {
            0.5
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Clean,
    Noisy,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tier::Clean => write!(f, "clean"),
            Tier::Noisy => write!(f, "noisy"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<ColorKind>,
    pub motions: Vec<MotionKind>,
    /// Object radii in pixels; one entry disables the size factor.
    pub radii: Vec<f64>,
    /// Pixels per frame for translating motions.
    pub speed: f64,
    /// Caption templates with {color}/{shape}/{motion}/{size} placeholders;
    /// templates without {motion} yield appearance-only captions.
    pub caption_templates: Vec<String>,
    pub tier: Tier,
    /// Per-word probability of replacement in the noisy tier.
    pub corruption_rate: f64,
    /// Amplitude (0..1) of static per-clip background pixel noise. The
    /// noise field is drawn independently of the motion class and repeats
    /// across frames, so frame 0 still hides the motion.
    pub background_noise: f64,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn default_templates_with_motion() -> Vec<String> {
        vec![
            "a {color} {shape} {motion}".to_string(),
            "a video of a {color} {shape} {motion}".to_string(),
            "the {color} {shape} is {motion}".to_string(),
            "one {color} {shape} {motion}".to_string(),
        ]
    }

    pub fn default_templates_appearance_only() -> Vec<String> {
        vec![
            "a {color} {shape}".to_string(),
            "a video of a {color} {shape}".to_string(),
            "the {color} {shape}".to_string(),
            "one {color} {shape}".to_string(),
        ]
    }

    /// Small clean corpus matching the toy encoder input dims.
    pub fn toy(n_clips: usize, seed: u64) -> Self {
        SyntheticCorpusSpec {
            n_clips,
            frames: 4,
            height: 32,
            width: 32,
            fps: 4.0,
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross],
            colors: vec![ColorKind::Red, ColorKind::Blue],
            motions: vec![MotionKind::Left, MotionKind::Right, MotionKind::Up, MotionKind::Down],
            radii: vec![5.0, 7.0],
            speed: 2.5,
            caption_templates: Self::default_templates_with_motion(),
            tier: Tier::Clean,
            corruption_rate: 0.3,
            background_noise: 0.0,
            seed,
        }
    }

    fn max_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }

    /// Margin keeping every motion in-bounds for the whole clip; identical
    /// across motion classes so frame 0 cannot reveal the motion.
    fn margin(&self) -> f64 {
        self.max_radius() + self.speed * (self.frames.saturating_sub(1)) as f64 + 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() || self.motions.is_empty() {
            return Err(VfmError::invalid("corpus spec needs at least one shape/color/motion"));
        }
        if self.radii.is_empty() || self.caption_templates.is_empty() {
            return Err(VfmError::invalid("corpus spec needs radii and caption templates"));
        }
        let m = self.margin();
        if 2.0 * m >= self.width as f64 || 2.0 * m >= self.height as f64 {
            return Err(VfmError::invalid(format!(
                "no safe start region: margin {m:.1} too large for {}x{} frames",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Every word any caption from this spec can contain (pre-corruption
    /// words plus the corruption pool), for vocabulary building.
    pub fn word_pool(&self) -> Vec<String> {
        let mut pool: Vec<String> = Vec::new();
        for t in &self.caption_templates {
            for w in crate::text::tokenize_words(t) {
                pool.push(w);
            }
        }
        for s in &self.shapes {
            pool.push(s.word().to_string());
        }
        for c in &self.colors {
            pool.push(c.word().to_string());
        }
        for m in &self.motions {
            for w in crate::text::tokenize_words(&m.phrase()) {
                pool.push(w);
            }
        }
        pool.push("small".to_string());
        pool.push("large".to_string());
        pool.sort();
        pool.dedup();
        pool
    }
}

/// Raw frames plus dims; the unit of ingestion.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub fps: f64,
    pub data: Vec<u8>,
}

impl VideoClip {
    /// Normalize to [-1, 1] as [T, H, W, C].
    pub fn to_tensor<F: Scalar>(&self) -> TensorData<F> {
        TensorData::new(
            vec![self.frames, self.height, self.width, self.channels],
            self.data
                .iter()
                .map(|&v| F::cast(f64::from(v) / 255.0 * 2.0 - 1.0))
                .collect(),
        )
        .expect("consistent dims")
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len());
        buf.extend_from_slice(CLIP_MAGIC);
        buf.extend_from_slice(&CLIP_VERSION.to_le_bytes());
        for dim in [self.frames, self.height, self.width, self.channels] {
            buf.extend_from_slice(&(dim as u16).to_le_bytes());
        }
        buf.extend_from_slice(&(self.fps as f32).to_le_bytes());
        buf.extend_from_slice(&self.data);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut header = [0u8; 18];
        f.read_exact(&mut header)?;
        if &header[0..4] != CLIP_MAGIC {
            return Err(VfmError::invalid(format!("{}: not a clip file", path.display())));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != CLIP_VERSION {
            return Err(VfmError::invalid(format!("unsupported clip version {version}")));
        }
        let dim = |i: usize| u16::from_le_bytes([header[6 + 2 * i], header[7 + 2 * i]]) as usize;
        let (frames, height, width, channels) = (dim(0), dim(1), dim(2), dim(3));
        let fps = f64::from(f32::from_le_bytes([header[14], header[15], header[16], header[17]]));
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        let expect = frames * height * width * channels;
        if data.len() != expect {
            return Err(VfmError::invalid(format!(
                "{}: clip payload {} bytes, header implies {expect}",
                path.display(),
                data.len()
            )));
        }
        Ok(VideoClip { frames, height, width, channels, fps, data })
    }
}

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub caption: String,
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub motion: MotionKind,
    pub size_idx: usize,
    pub tier: Tier,
}

/// Latent factors drawn for one clip.
#[derive(Clone, Debug)]
pub struct ClipFactors {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub motion: MotionKind,
    pub size_idx: usize,
    pub template_idx: usize,
    pub start_x: f64,
    pub start_y: f64,
    pub noise_seed: u64,
    pub caption: String,
}

/// Deterministically draw factors for clip `index`. The start pose comes
/// from a motion-independent safe region.
pub fn clip_factors(spec: &SyntheticCorpusSpec, index: usize) -> ClipFactors {
    let mut rng = rng_from(derive_seed(spec.seed, &[1, index as u64]));
    let shape = spec.shapes[rng.gen_range(0..spec.shapes.len())];
    let color = spec.colors[rng.gen_range(0..spec.colors.len())];
    let motion = spec.motions[rng.gen_range(0..spec.motions.len())];
    let size_idx = rng.gen_range(0..spec.radii.len());
    let template_idx = rng.gen_range(0..spec.caption_templates.len());
    let m = spec.margin();
    let start_x = rng.gen_range(m..spec.width as f64 - m);
    let start_y = rng.gen_range(m..spec.height as f64 - m);
    let caption = render_caption(spec, shape, color, motion, size_idx, template_idx, index);
    let noise_seed = derive_seed(spec.seed, &[8, index as u64]);
    ClipFactors { shape, color, motion, size_idx, template_idx, start_x, start_y, noise_seed, caption }
}

fn size_word(spec: &SyntheticCorpusSpec, size_idx: usize) -> &'static str {
    if spec.radii.len() < 2 {
        ""
    } else if size_idx == 0 {
        "small"
    } else {
        "large"
    }
}

fn render_caption(
    spec: &SyntheticCorpusSpec,
    shape: ShapeKind,
    color: ColorKind,
    motion: MotionKind,
    size_idx: usize,
    template_idx: usize,
    index: usize,
) -> String {
    let template = &spec.caption_templates[template_idx];
    let mut caption = template
        .replace("{color}", color.word())
        .replace("{shape}", shape.word())
        .replace("{motion}", &motion.phrase())
        .replace("{size}", size_word(spec, size_idx));
    caption = caption.split_whitespace().collect::<Vec<_>>().join(" ");
    if spec.tier == Tier::Noisy {
        let pool = spec.word_pool();
        let mut rng = rng_from(derive_seed(spec.seed, &[2, index as u64]));
        let words: Vec<String> = caption
            .split_whitespace()
            .map(|w| {
                if rng.gen_range(0.0..1.0) < spec.corruption_rate {
                    pool[rng.gen_range(0..pool.len())].clone()
                } else {
                    w.to_string()
                }
            })
            .collect();
        caption = words.join(" ");
    }
    caption
}

/// Render one clip from its factors.
pub fn render_clip(spec: &SyntheticCorpusSpec, f: &ClipFactors) -> VideoClip {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut data = vec![0u8; t * h * w * 3];
    let radius = spec.radii[f.size_idx];
    let (vx, vy) = f.motion.velocity(spec.speed);
    let spin = f.motion.spin();
    // Static background field shared by all frames.
    let background: Option<Vec<u8>> = if spec.background_noise > 0.0 {
        let mut rng = rng_from(f.noise_seed);
        let amp = (spec.background_noise * 255.0).clamp(0.0, 255.0) as u32;
        Some((0..h * w * 3).map(|_| rng.gen_range(0..=amp) as u8).collect())
    } else {
        None
    };
    for ti in 0..t {
        let cx = f.start_x + vx * ti as f64;
        let cy = f.start_y + vy * ti as f64;
        let angle = spin * ti as f64;
        let frame = &mut data[ti * h * w * 3..(ti + 1) * h * w * 3];
        if let Some(bg) = &background {
            frame.copy_from_slice(bg);
        }
        rasterize(frame, h, w, f.shape, f.color.rgb(), cx, cy, radius, angle);
    }
    VideoClip { frames: t, height: h, width: w, channels: 3, fps: spec.fps, data }
}

#[allow(clippy::too_many_arguments)]
fn rasterize(
    frame: &mut [u8],
    h: usize,
    w: usize,
    shape: ShapeKind,
    rgb: [u8; 3],
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
) {
    let (sin, cos) = angle.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let dx0 = x as f64 + 0.5 - cx;
            let dy0 = y as f64 + 0.5 - cy;
            // Rotate the sample point into the shape frame.
            let dx = cos * dx0 + sin * dy0;
            let dy = -sin * dx0 + cos * dy0;
            let inside = match shape {
                ShapeKind::Circle => dx0 * dx0 + dy0 * dy0 <= radius * radius,
                ShapeKind::Square => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
                ShapeKind::Triangle => {
                    // Upright triangle: apex up, base down, circumradius r.
                    let yy = dy / radius;
                    let xx = dx.abs() / radius;
                    yy >= -1.0 && yy <= 0.5 && xx <= (yy + 1.0) * 0.577
                }
                ShapeKind::Cross => {
                    (dx.abs() <= radius * 0.35 && dy.abs() <= radius)
                        || (dy.abs() <= radius * 0.35 && dx.abs() <= radius)
                }
            };
            if inside {
                let o = (y * w + x) * 3;
                frame[o] = rgb[0];
                frame[o + 1] = rgb[1];
                frame[o + 2] = rgb[2];
            }
        }
    }
}

/// In-memory corpus: rows plus decoded clips, index-aligned; `spec` rides
/// along when the corpus came from a generator spec.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub rows: Vec<ManifestRow>,
    pub clips: Vec<VideoClip>,
    pub spec: Option<SyntheticCorpusSpec>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Generate a corpus fully in memory.
pub fn generate(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.n_clips);
    let mut clips = Vec::with_capacity(spec.n_clips);
    let reference_motion = spec.motions[0];
    for i in 0..spec.n_clips {
        let f = clip_factors(spec, i);
        let clip = render_clip(spec, &f);
        // Frame-0 indistinguishability: the first frame must be identical
        // under any other motion with the same remaining factors.
        if f.motion != reference_motion {
            let alt = ClipFactors { motion: reference_motion, ..f.clone() };
            let alt_clip = render_clip(spec, &alt);
            let fsz = spec.height * spec.width * 3;
            debug_assert_eq!(&clip.data[..fsz], &alt_clip.data[..fsz]);
            if clip.data[..fsz] != alt_clip.data[..fsz] {
                return Err(VfmError::invalid(format!(
                    "clip {i}: frame 0 leaks the motion class"
                )));
            }
        }
        rows.push(ManifestRow {
            path: format!("clip_{i:05}.vclp"),
            caption: f.caption.clone(),
            shape: f.shape,
            color: f.color,
            motion: f.motion,
            size_idx: f.size_idx,
            tier: spec.tier,
        });
        clips.push(clip);
    }
    Ok(Corpus { rows, clips, spec: Some(spec.clone()) })
}

/// Generate and write to `dir`: clip files, `manifest.jsonl`, `spec.json`.
pub fn generate_to_dir(spec: &SyntheticCorpusSpec, dir: &Path) -> Result<Corpus> {
    let corpus = generate(spec)?;
    fs::create_dir_all(dir)?;
    for (row, clip) in corpus.rows.iter().zip(&corpus.clips) {
        clip.write_to(&dir.join(&row.path))?;
    }
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    for row in &corpus.rows {
        serde_json::to_writer(&mut manifest, row)
            .map_err(|e| VfmError::invalid(format!("manifest write: {e}")))?;
        manifest.write_all(b"\n")?;
    }
    fs::write(
        dir.join("spec.json"),
        serde_json::to_vec_pretty(spec).map_err(|e| VfmError::invalid(e.to_string()))?,
    )?;
    Ok(corpus)
}

/// Load a corpus directory written by `generate_to_dir`.
pub fn load_dir(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path)?;
    let mut rows = Vec::new();
    let mut clips = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| VfmError::Manifest {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let clip = VideoClip::read_from(&dir.join(&row.path))?;
        rows.push(row);
        clips.push(clip);
    }
    let spec = match fs::read_to_string(dir.join("spec.json")) {
        Ok(text) => serde_json::from_str(&text).ok(),
        Err(_) => None,
    };
    Ok(Corpus { rows, clips, spec })
}

/// Stack equally-dimensioned clips into one [B, T, H, W, C] tensor.
pub fn clips_to_batch<F: Scalar>(clips: &[&VideoClip]) -> Result<TensorData<F>> {
    let first = clips.first().ok_or_else(|| VfmError::invalid("empty clip batch"))?;
    let (t, h, w, c) = (first.frames, first.height, first.width, first.channels);
    for clip in clips {
        if (clip.frames, clip.height, clip.width, clip.channels) != (t, h, w, c) {
            return Err(VfmError::shape(
                "clips_to_batch",
                format!(
                    "mixed clip dims: {}x{}x{}x{} vs {t}x{h}x{w}x{c}",
                    clip.frames, clip.height, clip.width, clip.channels
                ),
            ));
        }
    }
    let mut data = Vec::with_capacity(clips.len() * t * h * w * c);
    for clip in clips {
        data.extend(clip.data.iter().map(|&v| F::cast(f64::from(v) / 255.0 * 2.0 - 1.0)));
    }
    TensorData::new(vec![clips.len(), t, h, w, c], data)
}

// ---- statistics ----

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Histogram {
    pub name: String,
    pub bin_labels: Vec<String>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Histograms over a manifest: clip duration (seconds) and caption length
/// (words). Alignment scoring needs towers and lives in the eval harness.
pub fn corpus_stats(corpus: &Corpus) -> Vec<Histogram> {
    let mut durations: Vec<f64> = Vec::new();
    for clip in &corpus.clips {
        durations.push(clip.frames as f64 / clip.fps);
    }
    let mut dur_labels: Vec<String> = durations.iter().map(|d| format!("{d:.2}s")).collect();
    dur_labels.sort();
    dur_labels.dedup();
    let dur_counts: Vec<usize> = dur_labels
        .iter()
        .map(|l| durations.iter().filter(|d| format!("{d:.2}s") == *l).count())
        .collect();

    let lengths: Vec<usize> =
        corpus.rows.iter().map(|r| r.caption.split_whitespace().count()).collect();
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    let len_labels: Vec<String> = (0..=max_len).map(|l| format!("{l}")).collect();
    let len_counts: Vec<usize> =
        (0..=max_len).map(|l| lengths.iter().filter(|&&x| x == l).count()).collect();

    vec![
        Histogram { name: "clip_duration".to_string(), bin_labels: dur_labels, counts: dur_counts },
        Histogram { name: "caption_words".to_string(), bin_labels: len_labels, counts: len_counts },
    ]
}


/// Build a corpus spec from `corpus.*` config keys; frame/image dims
/// default to the encoder's input dims.
pub fn spec_from_config(c: &crate::config::Config, seed: u64) -> Result<SyntheticCorpusSpec> {
    fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|_| VfmError::Config(format!("bad {what} entry `{s}`")))
            })
            .collect()
    }
    let shapes: Vec<ShapeKind> = c
        .get("corpus.shapes")
        .unwrap_or("circle,square,triangle,cross")
        .split(',')
        .map(|s| match s.trim() {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            "triangle" => Ok(ShapeKind::Triangle),
            "cross" => Ok(ShapeKind::Cross),
            other => Err(VfmError::Config(format!("unknown shape `{other}`"))),
        })
        .collect::<Result<_>>()?;
    let colors: Vec<ColorKind> = c
        .get("corpus.colors")
        .unwrap_or("red,blue")
        .split(',')
        .map(|s| match s.trim() {
            "red" => Ok(ColorKind::Red),
            "green" => Ok(ColorKind::Green),
            "blue" => Ok(ColorKind::Blue),
            "yellow" => Ok(ColorKind::Yellow),
            "magenta" => Ok(ColorKind::Magenta),
            "cyan" => Ok(ColorKind::Cyan),
            other => Err(VfmError::Config(format!("unknown color `{other}`"))),
        })
        .collect::<Result<_>>()?;
    let motions: Vec<MotionKind> = c
        .get("corpus.motions")
        .unwrap_or("left,right,up,down")
        .split(',')
        .map(|s| match s.trim() {
            "left" => Ok(MotionKind::Left),
            "right" => Ok(MotionKind::Right),
            "up" => Ok(MotionKind::Up),
            "down" => Ok(MotionKind::Down),
            "upleft" => Ok(MotionKind::UpLeft),
            "upright" => Ok(MotionKind::UpRight),
            "downleft" => Ok(MotionKind::DownLeft),
            "downright" => Ok(MotionKind::DownRight),
            "static" => Ok(MotionKind::Static),
            "rotate" => Ok(MotionKind::Rotate),
            other => Err(VfmError::Config(format!("unknown motion `{other}`"))),
        })
        .collect::<Result<_>>()?;
    let caption_templates = match c.get("corpus.templates").unwrap_or("motion") {
        "motion" => SyntheticCorpusSpec::default_templates_with_motion(),
        "appearance" => SyntheticCorpusSpec::default_templates_appearance_only(),
        custom => custom.split('|').map(str::to_string).collect(),
    };
    let tier = match c.get("corpus.tier").unwrap_or("clean") {
        "noisy" => Tier::Noisy,
        _ => Tier::Clean,
    };
    let spec = SyntheticCorpusSpec {
        n_clips: c.require("corpus.n_clips")?,
        frames: c.get_or("corpus.frames", c.require::<usize>("encoder.frames")?)?,
        height: c.get_or("corpus.height", c.require::<usize>("encoder.height")?)?,
        width: c.get_or("corpus.width", c.require::<usize>("encoder.width")?)?,
        fps: c.require("corpus.fps")?,
        shapes,
        colors,
        motions,
        radii: parse_list(c.get("corpus.radii").unwrap_or("5,7"), "radius")?,
        speed: c.require("corpus.speed")?,
        caption_templates,
        tier,
        corruption_rate: c.require("corpus.corruption_rate")?,
        background_noise: c.get_or("corpus.background_noise", 0.0)?,
        seed,
    };
    spec.validate()?;
    Ok(spec)
}
