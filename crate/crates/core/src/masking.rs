//! Visibility masks over the token grid: tube masks (a spatial subset
//! removed from every frame) and blockwise masks (unions of spatial
//! rectangles replicated over sampled temporal extents).
//!
//! Canonical token order everywhere is temporal-major: frame 0's spatial
//! tokens first, matching the encoder's merge step.

use rand::Rng;

use crate::error::{Result, VfmError};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, TensorData};
use crate::util::{rng_from, sample_without_replacement};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPattern {
    Tube,
    Blockwise,
}

impl std::fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskPattern::Tube => write!(f, "tube"),
            MaskPattern::Blockwise => write!(f, "blockwise"),
        }
    }
}

impl std::str::FromStr for MaskPattern {
    type Err = VfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tube" => Ok(MaskPattern::Tube),
            "blockwise" | "bevt" => Ok(MaskPattern::Blockwise),
            other => Err(VfmError::invalid(format!("unknown mask pattern `{other}`"))),
        }
    }
}

/// One spatial rectangle replicated over a temporal extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskBlock {
    pub t0: usize,
    pub dt: usize,
    pub y0: usize,
    pub bh: usize,
    pub x0: usize,
    pub bw: usize,
}

/// Boolean visibility grid over [T, S]; `true` means masked (hidden).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub pattern: MaskPattern,
    pub ratio: f64,
    pub t: usize,
    pub s: usize,
    pub seed: u64,
    grid: Vec<bool>,
    pub achieved_ratio: f64,
    /// Footprints placed by the blockwise sampler (empty for tube masks).
    pub blocks: Vec<MaskBlock>,
}

impl MaskSpec {
    /// All-visible mask.
    pub fn empty(t: usize, s: usize) -> Self {
        MaskSpec {
            pattern: MaskPattern::Tube,
            ratio: 0.0,
            t,
            s,
            seed: 0,
            grid: vec![false; t * s],
            achieved_ratio: 0.0,
            blocks: Vec::new(),
        }
    }

    pub fn is_masked(&self, ti: usize, si: usize) -> bool {
        self.grid[ti * self.s + si]
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn visible_count(&self) -> usize {
        self.t * self.s - self.masked_count()
    }

    /// Temporal-major indices of visible tokens into the flattened [T*S] grid.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.t * self.s).filter(|&i| !self.grid[i]).collect()
    }

    /// Spatial indices visible in frame `ti`.
    pub fn visible_in_frame(&self, ti: usize) -> Vec<usize> {
        (0..self.s).filter(|&si| !self.is_masked(ti, si)).collect()
    }
}

/// Sample a tube mask: round(ratio * S) spatial positions hidden in every
/// frame, uniformly without replacement.
pub fn sample_tube_mask(t: usize, s: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let k = (ratio * s as f64).round() as usize;
    let mut rng = rng_from(seed);
    let masked = sample_without_replacement(&mut rng, s, k);
    let mut grid = vec![false; t * s];
    for ti in 0..t {
        for &si in &masked {
            grid[ti * s + si] = true;
        }
    }
    Ok(MaskSpec {
        pattern: MaskPattern::Tube,
        ratio,
        t,
        s,
        seed,
        achieved_ratio: (t * k) as f64 / (t * s) as f64,
        grid,
        blocks: Vec::new(),
    })
}

/// Blockwise sampler parameters. Aspect bounds and the minimum block area
/// follow BEiT/BEVT conventions; the temporal extent of each block is
/// sampled uniformly in [1, T] (`tube_blocks` forces full tubes instead).
#[derive(Clone, Copy, Debug)]
pub struct BlockwiseParams {
    pub min_block_area: usize,
    pub aspect_min: f64,
    pub tube_blocks: bool,
    /// Trim the final block so the masked count hits round(ratio*T*S) exactly.
    pub exact_count: bool,
}

impl Default for BlockwiseParams {
    fn default() -> Self {
        BlockwiseParams { min_block_area: 4, aspect_min: 0.3, tube_blocks: false, exact_count: true }
    }
}

/// Sample a blockwise mask over a [T, S_h, S_w] grid: rectangular spatial
/// blocks with bounded aspect, each replicated over a sampled temporal
/// extent, unioned until the target count is reached.
pub fn sample_blockwise_mask(
    t: usize,
    s_h: usize,
    s_w: usize,
    ratio: f64,
    seed: u64,
    params: &BlockwiseParams,
) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let s = s_h * s_w;
    let total = t * s;
    let target = (ratio * total as f64).round() as usize;
    let mut grid = vec![false; total];
    if target == 0 {
        return Ok(MaskSpec {
            pattern: MaskPattern::Blockwise,
            ratio,
            t,
            s,
            seed,
            achieved_ratio: 0.0,
            grid,
            blocks: Vec::new(),
        });
    }
    if params.min_block_area > target {
        return Err(VfmError::invalid(format!(
            "blockwise mask infeasible: min block area {} exceeds target {} cells",
            params.min_block_area, target
        )));
    }
    let mut rng = rng_from(seed);
    let mut masked = 0usize;
    let mut guard = 0usize;
    let mut blocks = Vec::new();
    while masked < target {
        guard += 1;
        if guard > 10_000 {
            return Err(VfmError::invalid(
                "blockwise mask sampler failed to reach its target".to_string(),
            ));
        }
        let remaining = target - masked;
        let max_area = remaining.max(params.min_block_area);
        let area = rng.gen_range(params.min_block_area..=max_area);
        let aspect = (rng.gen_range(params.aspect_min.ln()..=(1.0 / params.aspect_min).ln())).exp();
        let bh = (((area as f64) * aspect).sqrt().round() as usize).clamp(1, s_h);
        let bw = (((area as f64) / aspect).sqrt().round() as usize).clamp(1, s_w);
        let y0 = rng.gen_range(0..=(s_h - bh));
        let x0 = rng.gen_range(0..=(s_w - bw));
        let (t0, dt) = if params.tube_blocks {
            (0, t)
        } else {
            let dt = rng.gen_range(1..=t);
            (rng.gen_range(0..=(t - dt)), dt)
        };
        blocks.push(MaskBlock { t0, dt, y0, bh, x0, bw });
        let mut added: Vec<usize> = Vec::new();
        for ti in t0..t0 + dt {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let cell = ti * s + y * s_w + x;
                    if !grid[cell] {
                        grid[cell] = true;
                        added.push(cell);
                    }
                }
            }
        }
        masked += added.len();
        if params.exact_count && masked > target {
            // Un-mask the most recently added cells of this block.
            for &cell in added.iter().rev().take(masked - target) {
                grid[cell] = false;
            }
            masked = target;
        }
    }
    let achieved_ratio = masked as f64 / total as f64;
    Ok(MaskSpec {
        pattern: MaskPattern::Blockwise,
        ratio,
        t,
        s,
        seed,
        achieved_ratio,
        grid,
        blocks,
    })
}

pub fn sample_mask(
    pattern: MaskPattern,
    t: usize,
    s_h: usize,
    s_w: usize,
    ratio: f64,
    seed: u64,
    params: &BlockwiseParams,
) -> Result<MaskSpec> {
    match pattern {
        MaskPattern::Tube => sample_tube_mask(t, s_h * s_w, ratio, seed),
        MaskPattern::Blockwise => sample_blockwise_mask(t, s_h, s_w, ratio, seed, params),
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(VfmError::invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Gather visible tokens of a flattened grid [B, n, D] in canonical
/// temporal-major order. Returns the gathered [B, m, D] plus each clip's
/// index map (original position of every visible token).
pub fn apply_mask_batched<F: Scalar>(
    g: &mut Graph<F>,
    grid: Var,
    masks: &[MaskSpec],
) -> Result<(Var, Vec<Vec<usize>>)> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 3 {
        return Err(VfmError::shape("apply_mask", format!("want [B, n, D], got {shape:?}")));
    }
    let (b, n) = (shape[0], shape[1]);
    if masks.len() != b {
        return Err(VfmError::shape(
            "apply_mask",
            format!("{} masks for batch of {b}", masks.len()),
        ));
    }
    let maps: Vec<Vec<usize>> = masks.iter().map(MaskSpec::visible_indices).collect();
    let m = maps[0].len();
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if mask.t * mask.s != n {
            return Err(VfmError::shape(
                "apply_mask",
                format!("mask {i} covers {}x{} tokens, grid has {n}", mask.t, mask.s),
            ));
        }
        if map.len() != m {
            return Err(VfmError::shape(
                "apply_mask",
                format!("mask {i} keeps {} tokens, mask 0 keeps {m}", map.len()),
            ));
        }
    }
    let flat: Vec<usize> = maps.iter().flat_map(|map| map.iter().copied()).collect();
    let visible = g.gather_batched(grid, &flat, m)?;
    Ok((visible, maps))
}

/// Single-clip variant: grid [n, D] -> visible [m, D] + index map.
pub fn apply_mask<F: Scalar>(
    g: &mut Graph<F>,
    grid: Var,
    mask: &MaskSpec,
) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(grid).to_vec();
    if shape.len() != 2 {
        return Err(VfmError::shape("apply_mask", format!("want [n, D], got {shape:?}")));
    }
    if mask.t * mask.s != shape[0] {
        return Err(VfmError::shape(
            "apply_mask",
            format!("mask covers {} tokens, grid has {}", mask.t * mask.s, shape[0]),
        ));
    }
    let map = mask.visible_indices();
    let visible = g.gather(grid, 0, &map)?;
    Ok((visible, map))
}

/// Inverse of `apply_mask`: scatter visible rows back to their canonical
/// positions, zeros elsewhere.
pub fn scatter_visible<F: Scalar>(
    g: &mut Graph<F>,
    visible: Var,
    index_map: &[usize],
    n: usize,
) -> Result<Var> {
    let shape = g.shape(visible).to_vec();
    if shape.len() != 2 || shape[0] != index_map.len() {
        return Err(VfmError::shape(
            "scatter_visible",
            format!("visible {shape:?} vs {} indices", index_map.len()),
        ));
    }
    let d = shape[1];
    let zero_row = g.constant(TensorData::zeros(vec![1, d]));
    let padded = g.concat(&[visible, zero_row], 0)?;
    let mut pick = vec![index_map.len(); n]; // default: the zero row
    for (j, &i) in index_map.iter().enumerate() {
        pick[i] = j;
    }
    g.gather(padded, 0, &pick)
}
