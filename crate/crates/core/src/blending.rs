//! Subject-guided latent blending.
//!
//! The attention paid by target-image queries to the subject token's key is
//! averaged over a set of (step, block) pairs into a saliency map. An Otsu
//! threshold turns it into a rough mask, greedy peak picking yields up to
//! four seed points, and region growing on the clean-image estimate refines
//! the mask. Outside the mask the target latent is replaced by the source:
//!
//! ```text
//! Z_target = M ⊙ Z_target + (1 - M) ⊙ Z_source
//! ```

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Latent;
use crate::model::{AttentionOutput, AttentionRecorder, AttentionState, BlockInfo};

/// Non-negative saliency over the image grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectAttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SubjectAttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "saliency values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }

    /// Divides by the maximum; an all-zero map is returned unchanged.
    pub fn normalized(mut self) -> Self {
        let m = self.max();
        if m > 0.0 {
            for v in &mut self.values {
                *v /= m;
            }
        }
        self
    }
}

/// Boolean grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            cells: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                cells.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            cells,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// Rows of booleans, the JSON export layout.
    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.cells.chunks(self.width).map(|r| r.to_vec()).collect()
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::ShapeMismatch("ragged mask rows".into()));
        }
        Ok(Self {
            height,
            width,
            cells: rows.concat(),
        })
    }

    fn neighbors4(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (idx / self.width, idx % self.width);
        let (h, w) = (self.height, self.width);
        [
            (r > 0).then(|| idx - w),
            (r + 1 < h).then(|| idx + w),
            (c > 0).then(|| idx - 1),
            (c + 1 < w).then(|| idx + 1),
        ]
        .into_iter()
        .flatten()
    }

    /// One step of 4-neighbourhood dilation.
    pub fn dilate(&self) -> Mask {
        let mut out = self.clone();
        for (i, &on) in self.cells.iter().enumerate() {
            if on {
                for n in self.neighbors4(i) {
                    out.cells[n] = true;
                }
            }
        }
        out
    }

    /// 4-connected components as lists of cell indices, in scan order.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.cells.len()];
        let mut out = Vec::new();
        for start in 0..self.cells.len() {
            if !self.cells[start] || seen[start] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                comp.push(i);
                for n in self.neighbors4(i) {
                    if self.cells[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
            out.push(comp);
        }
        out
    }
}

/// Attention of one recorded block, kept for aggregation.
#[derive(Clone, Debug)]
pub struct RecordedAttention {
    pub step: usize,
    pub block: usize,
    pub state: AttentionState,
    pub output: AttentionOutput,
}

/// Which (step, block) pairs feed the subject map.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStepSet {
    pub steps: Vec<usize>,
    pub blocks: Vec<usize>,
}

impl LayerStepSet {
    pub fn contains(&self, step: usize, block: usize) -> bool {
        self.steps.contains(&step) && self.blocks.contains(&block)
    }
}

/// Keeps full attention for the configured (step, block) pairs.
#[derive(Clone, Debug, Default)]
pub struct SubjectRecorder {
    pub selection: LayerStepSet,
    pub records: Vec<RecordedAttention>,
}

impl SubjectRecorder {
    pub fn new(selection: LayerStepSet) -> Self {
        Self {
            selection,
            records: Vec::new(),
        }
    }
}

impl AttentionRecorder for SubjectRecorder {
    fn record(&mut self, info: &BlockInfo, state: &AttentionState, output: &AttentionOutput) {
        if self.selection.contains(info.step, info.block) {
            self.records.push(RecordedAttention {
                step: info.step,
                block: info.block,
                state: state.clone(),
                output: output.clone(),
            });
        }
    }
}

/// Head-averaged attention from each target query to the subject key.
pub fn subject_grid(output: &AttentionOutput, subject_index: usize) -> Result<Vec<f64>> {
    if subject_index >= output.n_prompt {
        return Err(Error::InvalidInput(format!(
            "subject index {subject_index} outside prompt of {} tokens",
            output.n_prompt
        )));
    }
    let col = output.prompt_key_offset() + subject_index;
    let n_heads = output.heads.len() as f64;
    Ok((0..output.n_target)
        .map(|t| {
            output
                .heads
                .iter()
                .map(|h| h.probs[[output.n_prompt + t, col]])
                .sum::<f64>()
                / n_heads
        })
        .collect())
}

/// Mean of the per-record subject grids, normalised by its maximum.
pub fn aggregate_subject_attention(
    records: &[RecordedAttention],
    subject_index: Option<usize>,
    grid: (usize, usize),
) -> Result<SubjectAttentionMap> {
    let subject = subject_index
        .ok_or_else(|| Error::InvalidInput("prompt has no subject token".into()))?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no recorded attention to aggregate".into()));
    }
    let n = grid.0 * grid.1;
    let mut acc = vec![0.0; n];
    for rec in records {
        let g = subject_grid(&rec.output, subject)?;
        if g.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "recorded attention has {} target tokens, grid has {n}",
                g.len()
            )));
        }
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    }
    let k = records.len() as f64;
    for a in &mut acc {
        *a /= k;
    }
    Ok(SubjectAttentionMap::new(grid.0, grid.1, acc)?.normalized())
}

/// Outcome of Otsu thresholding over a `num_bins` histogram spanning
/// `[min, max]` of the map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtsuResult {
    /// Cells in bins `>= boundary` form the upper class.
    pub boundary: usize,
    pub threshold: f64,
    pub between_variance: f64,
    pub min: f64,
    pub max: f64,
    pub num_bins: usize,
}

impl OtsuResult {
    pub fn bin_of(&self, v: f64) -> usize {
        histogram_bin(v, self.min, self.max, self.num_bins)
    }

    pub fn is_foreground(&self, v: f64) -> bool {
        self.bin_of(v) >= self.boundary
    }
}

/// Bin of `v` among `bins` equal-width bins over `[min, max]`.
pub fn histogram_bin(v: f64, min: f64, max: f64, bins: usize) -> usize {
    let rel = (v - min) / (max - min);
    ((rel * bins as f64).floor() as usize).min(bins - 1)
}

pub const DEFAULT_OTSU_BINS: usize = 64;

/// Boundary maximising the between-class variance `w0·w1·(μ0 - μ1)²`
/// over bin centres; ties go to the lowest boundary.
pub fn otsu_threshold(map: &SubjectAttentionMap, num_bins: usize) -> Result<OtsuResult> {
    if num_bins < 2 {
        return Err(Error::InvalidInput("Otsu needs at least two bins".into()));
    }
    let min = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(Error::Degenerate("saliency map is constant".into()));
    }
    let width = (max - min) / num_bins as f64;
    let mut hist = vec![0.0; num_bins];
    for &v in &map.values {
        hist[histogram_bin(v, min, max, num_bins)] += 1.0;
    }
    let center = |i: usize| min + (i as f64 + 0.5) * width;
    let total: f64 = hist.iter().sum();
    let sum_total: f64 = hist.iter().enumerate().map(|(i, h)| h * center(i)).sum();

    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for b in 1..num_bins {
        w0 += hist[b - 1];
        sum0 += hist[b - 1] * center(b - 1);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_total - sum0) / w1;
        let between = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, v)| between > v) {
            best = Some((b, between));
        }
    }
    let (boundary, between_variance) = best.expect("a non-constant map has two occupied bins");
    Ok(OtsuResult {
        boundary,
        threshold: min + boundary as f64 * width,
        between_variance,
        min,
        max,
        num_bins,
    })
}

/// Rough mask `M_r`: cells in the upper Otsu class.
pub fn rough_mask(map: &SubjectAttentionMap, otsu: &OtsuResult) -> Mask {
    Mask {
        height: map.height,
        width: map.width,
        cells: map.values.iter().map(|v| otsu.is_foreground(*v)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSampling {
    pub max_points: usize,
    /// Stop once the next peak falls below `stop_ratio · p_max`.
    pub stop_ratio: f64,
    /// Cells within this Euclidean distance of a chosen point are excluded.
    pub exclusion_radius: f64,
}

impl PointSampling {
    /// Four points, 0.35 stop ratio, radius `ceil(max(h, w) / 8)`.
    pub fn for_grid(height: usize, width: usize) -> Self {
        Self {
            max_points: 4,
            stop_ratio: 0.35,
            exclusion_radius: height.max(width).div_ceil(8) as f64,
        }
    }
}

fn is_local_max(map: &SubjectAttentionMap, r: usize, c: usize) -> bool {
    let v = map.get(r, c);
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if (dr, dc) == (0, 0) || nr < 0 || nc < 0 || nr >= map.height as i64 || nc >= map.width as i64 {
                continue;
            }
            if map.get(nr as usize, nc as usize) > v {
                return false;
            }
        }
    }
    true
}

/// Greedy peak picking: repeatedly take the highest remaining local maximum
/// (row-major first on ties), then exclude the disk around it.
pub fn sample_points(map: &SubjectAttentionMap, cfg: &PointSampling) -> Vec<(usize, usize)> {
    let p_max = map.max();
    let mut available: Vec<bool> = (0..map.height * map.width)
        .map(|i| is_local_max(map, i / map.width, i % map.width))
        .collect();
    let mut points = Vec::new();
    let r2 = cfg.exclusion_radius * cfg.exclusion_radius;
    while points.len() < cfg.max_points {
        let mut best: Option<(usize, f64)> = None;
        for (i, &ok) in available.iter().enumerate() {
            if ok && best.is_none_or(|(_, v)| map.values[i] > v) {
                best = Some((i, map.values[i]));
            }
        }
        let Some((idx, value)) = best else { break };
        if !points.is_empty() && value < cfg.stop_ratio * p_max {
            break;
        }
        let (pr, pc) = (idx / map.width, idx % map.width);
        points.push((pr, pc));
        for (i, a) in available.iter_mut().enumerate() {
            let dr = (i / map.width) as f64 - pr as f64;
            let dc = (i % map.width) as f64 - pc as f64;
            if dr * dr + dc * dc <= r2 {
                *a = false;
            }
        }
    }
    points
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Growth tolerance as a multiple of the intensity field's standard
    /// deviation.
    pub tolerance_factor: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            tolerance_factor: 0.2,
        }
    }
}

/// Per-token channel norms of the clean estimate, the field regions grow on.
pub fn intensity_field(x0: &Latent) -> Vec<f64> {
    x0.channel_norms()
}

pub fn growth_tolerance(field: &[f64], cfg: &RefineConfig) -> f64 {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    cfg.tolerance_factor * var.sqrt()
}

/// Grows a 4-connected region from each point while the intensity stays
/// within tolerance of the seed's, then adds rough-mask cells adjacent to the
/// grown regions: `M = G ∪ (M_r ∩ dilate(G))`.
pub fn refine_mask(
    x0: &Latent,
    rough: &Mask,
    points: &[(usize, usize)],
    cfg: &RefineConfig,
) -> Result<Mask> {
    if points.is_empty() {
        return Err(Error::InvalidInput("refinement needs at least one point".into()));
    }
    if rough.height != x0.height || rough.width != x0.width {
        return Err(Error::ShapeMismatch("rough mask and latent grids differ".into()));
    }
    let field = intensity_field(x0);
    let tol = growth_tolerance(&field, cfg);
    let mut grown = Mask::filled(x0.height, x0.width, false);
    for &(r, c) in points {
        if r >= x0.height || c >= x0.width {
            return Err(Error::InvalidInput(format!("point ({r}, {c}) outside grid")));
        }
        let seed = r * x0.width + c;
        let seed_value = field[seed];
        let mut queue = VecDeque::from([seed]);
        let mut visited = vec![false; field.len()];
        visited[seed] = true;
        while let Some(i) = queue.pop_front() {
            grown.cells[i] = true;
            let nbrs: Vec<usize> = grown.neighbors4(i).collect();
            for n in nbrs {
                if !visited[n] && (field[n] - seed_value).abs() <= tol {
                    visited[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    let ring = grown.dilate();
    let cells = grown
        .cells
        .iter()
        .zip(&rough.cells)
        .zip(&ring.cells)
        .map(|((g, r), d)| *g || (*r && *d))
        .collect();
    Ok(Mask {
        height: grown.height,
        width: grown.width,
        cells,
    })
}

/// Inside the mask the target token is kept, outside the source token.
pub fn blend_latents(z_target: &Latent, z_source: &Latent, mask: &Mask) -> Result<Latent> {
    z_target.ensure_same_shape(z_source, "blend_latents")?;
    if mask.height != z_target.height || mask.width != z_target.width {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs latent grid {}x{}",
            mask.height, mask.width, z_target.height, z_target.width
        )));
    }
    let mut out = z_target.clone();
    for (i, &keep) in mask.cells.iter().enumerate() {
        if !keep {
            let d = out.dim;
            out.data[i * d..(i + 1) * d].copy_from_slice(&z_source.data[i * d..(i + 1) * d]);
        }
    }
    Ok(out)
}

/// Every product of the localisation stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMask {
    pub saliency: SubjectAttentionMap,
    pub otsu: OtsuResult,
    pub rough: Mask,
    pub refined: Mask,
    pub points: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub otsu_bins: usize,
    pub sampling: PointSampling,
    pub refine: RefineConfig,
}

impl MaskConfig {
    pub fn for_grid(height: usize, width: usize) -> Self {
        Self {
            otsu_bins: DEFAULT_OTSU_BINS,
            sampling: PointSampling::for_grid(height, width),
            refine: RefineConfig::default(),
        }
    }
}

/// Otsu threshold, point sampling and refinement in sequence.
pub fn build_subject_mask(map: SubjectAttentionMap, x0: &Latent, cfg: &MaskConfig) -> Result<SubjectMask> {
    let otsu = otsu_threshold(&map, cfg.otsu_bins)?;
    let rough = rough_mask(&map, &otsu);
    let points = sample_points(&map, &cfg.sampling);
    let refined = refine_mask(x0, &rough, &points, &cfg.refine)?;
    Ok(SubjectMask {
        saliency: map,
        otsu,
        rough,
        refined,
        points,
    })
}
