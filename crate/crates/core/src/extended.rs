//! Weighted extended attention.
//!
//! The target stream's queries attend over keys and values from three
//! partitions, in order: the source image, the prompt and the target image.
//! Each partition's keys are scaled before the dot product:
//!
//! ```text
//! A = softmax([Q_p, Q_target] [γ_s·K_source, γ_p·K_p, γ_t·K_target]ᵀ / √d_k)
//! h = A · [V_source, V_p, V_target]
//! ```
//!
//! Source tokens contribute keys and values only; they never query.
//!
//! The balance factor γ (applied as `γ_p = γ_t = γ`, `γ_s = 1`) can be solved
//! for so that the prompt queries spend equal attention mass on the source
//! and target images.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::attention::{weighted_attention, AttentionOutput, AttentionState, Matrix};
use crate::model::{AttentionRecorder, BlockInfo, HeadState, PositionalOffset, RopeConfig, TokenPosition};

/// Per-partition key scales `(γ_s, γ_p, γ_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub gamma_source: f64,
    pub gamma_prompt: f64,
    pub gamma_target: f64,
}

impl AttentionWeights {
    pub const UNIT: AttentionWeights = AttentionWeights {
        gamma_source: 1.0,
        gamma_prompt: 1.0,
        gamma_target: 1.0,
    };

    /// `γ_s = 1`, `γ_p = γ_t = gamma`.
    pub fn balanced(gamma: f64) -> Self {
        Self {
            gamma_source: 1.0,
            gamma_prompt: gamma,
            gamma_target: gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("gamma_source", self.gamma_source),
            ("gamma_prompt", self.gamma_prompt),
            ("gamma_target", self.gamma_target),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::NonPositiveWeight { name, value });
            }
        }
        Ok(())
    }
}

impl Default for AttentionWeights {
    fn default() -> Self {
        Self::UNIT
    }
}

/// Extended attention; fails unless the state carries a source partition.
pub fn extended_attention(state: &AttentionState, weights: &AttentionWeights) -> Result<AttentionOutput> {
    if !state.has_source() || state.heads.iter().any(|h| !h.has_source()) {
        return Err(Error::MissingSource);
    }
    weighted_attention(state, weights)
}

/// Share of prompt-query attention landing on each key partition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadFractions {
    pub source: f64,
    pub prompt: f64,
    pub target: f64,
}

/// Averages, over heads and prompt query rows, the attention mass per key
/// partition.
pub fn spread_from_output(out: &AttentionOutput) -> SpreadFractions {
    let (s_end, p_end) = (out.prompt_key_offset(), out.target_key_offset());
    let mut acc = [0.0; 3];
    let mut rows = 0usize;
    for head in &out.heads {
        for row in head.probs.rows().into_iter().take(out.n_prompt) {
            let mut part = [0.0; 3];
            for (j, p) in row.iter().enumerate() {
                let idx = if j < s_end {
                    0
                } else if j < p_end {
                    1
                } else {
                    2
                };
                part[idx] += p;
            }
            let total: f64 = part.iter().sum();
            for i in 0..3 {
                acc[i] += part[i] / total;
            }
            rows += 1;
        }
    }
    let n = rows.max(1) as f64;
    SpreadFractions {
        source: acc[0] / n,
        prompt: acc[1] / n,
        target: acc[2] / n,
    }
}

/// Attention spread of the prompt queries under the given key scales.
pub fn attention_spread(state: &AttentionState, weights: &AttentionWeights) -> Result<SpreadFractions> {
    Ok(spread_from_output(&weighted_attention(state, weights)?))
}

/// One row of the spread series: which step and block it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadRecord {
    pub step: usize,
    pub label: u32,
    pub block: usize,
    pub source_frac: f64,
    pub prompt_frac: f64,
    pub target_frac: f64,
}

/// Recorder that keeps the spread of every block it sees.
#[derive(Clone, Debug, Default)]
pub struct SpreadRecorder {
    pub records: Vec<SpreadRecord>,
}

impl AttentionRecorder for SpreadRecorder {
    fn record(&mut self, info: &BlockInfo, _state: &AttentionState, output: &AttentionOutput) {
        let f = spread_from_output(output);
        self.records.push(SpreadRecord {
            step: info.step,
            label: info.label,
            block: info.block,
            source_frac: f.source,
            prompt_frac: f.prompt,
            target_frac: f.target,
        });
    }
}

/// Writes `step,block,source_frac,prompt_frac,target_frac` rows.
pub fn write_spread_csv(records: &[SpreadRecord], out: &mut impl Write) -> Result<()> {
    writeln!(out, "step,block,source_frac,prompt_frac,target_frac")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.12},{:.12},{:.12}",
            r.step, r.block, r.source_frac, r.prompt_frac, r.target_frac
        )?;
    }
    Ok(())
}

/// Precomputed prompt-query logits for evaluating the balance function
/// `f(γ) = A_source - A_target` cheaply at many γ.
#[derive(Clone, Debug)]
pub struct BalanceProbe {
    // per head, per prompt row: (source, prompt, target) raw logits
    rows: Vec<[Vec<f64>; 3]>,
}

impl BalanceProbe {
    pub fn new(state: &AttentionState) -> Result<Self> {
        state.validate()?;
        if !state.has_source() {
            return Err(Error::MissingSource);
        }
        let mut rows = Vec::new();
        for head in &state.heads {
            let inv = 1.0 / (head.head_dim() as f64).sqrt();
            let ks = head.k_source.as_ref().expect("validated source");
            for q in head.q_prompt.rows() {
                let logits = |k: &Matrix| k.rows().into_iter().map(|kr| q.dot(&kr) * inv).collect::<Vec<_>>();
                rows.push([logits(ks), logits(&head.k_prompt), logits(&head.k_target)]);
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidInput("probe state has no prompt queries".into()));
        }
        Ok(Self { rows })
    }

    /// Mean over heads and prompt rows of source mass minus target mass,
    /// with keys scaled by `(1, γ, γ)`.
    pub fn residual(&self, gamma: f64) -> f64 {
        let mut total = 0.0;
        for [src, prm, tgt] in &self.rows {
            let max = src
                .iter()
                .copied()
                .chain(prm.iter().map(|l| gamma * l))
                .chain(tgt.iter().map(|l| gamma * l))
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = src.iter().map(|l| (l - max).exp()).sum();
            let p: f64 = prm.iter().map(|l| (gamma * l - max).exp()).sum();
            let t: f64 = tgt.iter().map(|l| (gamma * l - max).exp()).sum();
            total += (s - t) / (s + p + t);
        }
        total / self.rows.len() as f64
    }
}

/// Bracketing root solver for the balance factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSolver {
    pub lo: f64,
    pub hi: f64,
    /// Required `|f(γ)|` at the returned root.
    pub tolerance: f64,
    /// Bisection continues until the bracket is narrower than this.
    pub x_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for GammaSolver {
    fn default() -> Self {
        Self {
            lo: 0.5,
            hi: 2.0,
            tolerance: 1e-4,
            x_tolerance: 1e-9,
            max_iterations: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSolution {
    pub gamma: f64,
    pub residual: f64,
    pub iterations: usize,
}

impl GammaSolver {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn solve(&self, probe: &AttentionState) -> Result<GammaSolution> {
        let probe = BalanceProbe::new(probe)?;
        self.solve_fn(|g| probe.residual(g))
    }

    /// Bisection on `[lo, hi]`, then one secant step between the final
    /// bracket ends when it lowers `|f|`.
    pub fn solve_fn(&self, f: impl Fn(f64) -> f64) -> Result<GammaSolution> {
        if !(self.tolerance > 0.0) || !(self.lo > 0.0) || !(self.hi > self.lo) {
            return Err(Error::InvalidInput(format!(
                "bad solver settings: bracket [{}, {}], tolerance {}",
                self.lo, self.hi, self.tolerance
            )));
        }
        let (mut lo, mut hi) = (self.lo, self.hi);
        let (mut f_lo, f_hi) = (f(lo), f(hi));
        if f_lo == 0.0 {
            return Ok(GammaSolution { gamma: lo, residual: 0.0, iterations: 0 });
        }
        if f_hi == 0.0 {
            return Ok(GammaSolution { gamma: hi, residual: 0.0, iterations: 0 });
        }
        if f_lo.signum() == f_hi.signum() || !f_lo.is_finite() || !f_hi.is_finite() {
            return Err(Error::Bracketing { lo, hi, f_lo, f_hi });
        }
        let mut f_hi = f_hi;
        let mut iterations = 0;
        let mut best = if f_lo.abs() < f_hi.abs() { (lo, f_lo) } else { (hi, f_hi) };
        while iterations < self.max_iterations {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            let f_mid = f(mid);
            if f_mid.abs() < best.1.abs() {
                best = (mid, f_mid);
            }
            if f_mid == 0.0 {
                break;
            }
            if f_mid.signum() == f_lo.signum() {
                lo = mid;
                f_lo = f_mid;
            } else {
                hi = mid;
                f_hi = f_mid;
            }
            if hi - lo < self.x_tolerance && best.1.abs() <= self.tolerance {
                break;
            }
        }
        if f_hi != f_lo {
            let secant = hi - f_hi * (hi - lo) / (f_hi - f_lo);
            if secant > lo && secant < hi {
                let f_sec = f(secant);
                if f_sec.abs() < best.1.abs() {
                    best = (secant, f_sec);
                }
            }
        }
        if best.1.abs() > self.tolerance {
            return Err(Error::Degenerate(format!(
                "balance residual {} above tolerance {} at gamma {}",
                best.1, self.tolerance, best.0
            )));
        }
        Ok(GammaSolution {
            gamma: best.0,
            residual: best.1,
            iterations,
        })
    }
}

/// Solves `f(γ) = 0` on the default bracket `[0.5, 2.0]`.
pub fn solve_gamma(probe: &AttentionState, tolerance: f64) -> Result<GammaSolution> {
    GammaSolver::with_tolerance(tolerance).solve(probe)
}

/// Pre-rotary projections of one head for the positional-shift probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftProbeHead {
    pub q_prompt: Matrix,
    pub k_prompt: Matrix,
    pub v_prompt: Matrix,
    pub q_target: Matrix,
    pub k_target: Matrix,
    pub v_target: Matrix,
    pub k_source: Matrix,
    pub v_source: Matrix,
}

/// Inputs of the positional-shift probe: raw projections plus the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftProbeInput {
    pub heads: Vec<ShiftProbeHead>,
    pub grid: (usize, usize),
    pub subject_index: usize,
    pub rope: RopeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub offset: PositionalOffset,
    /// Target-grid argmax `(row, col)` with unshifted source encodings.
    pub before: (usize, usize),
    /// Target-grid argmax with the source encodings shifted by `offset`.
    pub after: (usize, usize),
}

impl ShiftReport {
    pub fn displacement(&self) -> (i64, i64) {
        (
            self.after.0 as i64 - self.before.0 as i64,
            self.after.1 as i64 - self.before.1 as i64,
        )
    }
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl ShiftProbeInput {
    fn state(&self, offset: PositionalOffset) -> AttentionState {
        let (h, w) = self.grid;
        let n_p = self.heads[0].q_prompt.nrows();
        let text_pos: Vec<TokenPosition> = crate::model::rope::text_positions(n_p);
        let target_pos = PositionalOffset::ZERO.grid_positions(h, w);
        let source_pos = offset.grid_positions(h, w);
        let rot = |m: &Matrix, pos: &[TokenPosition]| {
            let mut m = m.clone();
            self.rope.apply(&mut m, pos);
            m
        };
        AttentionState {
            heads: self
                .heads
                .iter()
                .map(|hd| HeadState {
                    q_prompt: rot(&hd.q_prompt, &text_pos),
                    k_prompt: rot(&hd.k_prompt, &text_pos),
                    v_prompt: hd.v_prompt.clone(),
                    q_target: rot(&hd.q_target, &target_pos),
                    k_target: rot(&hd.k_target, &target_pos),
                    v_target: hd.v_target.clone(),
                    k_source: Some(rot(&hd.k_source, &source_pos)),
                    v_source: Some(hd.v_source.clone()),
                })
                .collect(),
        }
    }

    /// Target-grid location that attends most to the source token the
    /// subject query attends to most (head-averaged, row-major ties).
    pub fn locate(&self, offset: PositionalOffset) -> Result<(usize, usize)> {
        let (h, w) = self.grid;
        if self.subject_index >= self.heads.first().map_or(0, |hd| hd.q_prompt.nrows()) {
            return Err(Error::InvalidInput("subject index outside prompt".into()));
        }
        let out = extended_attention(&self.state(offset), &AttentionWeights::UNIT)?;
        let n_heads = out.heads.len() as f64;
        let n_s = out.n_source;
        let subject_row: Vec<f64> = (0..n_s)
            .map(|j| out.heads.iter().map(|hd| hd.probs[[self.subject_index, j]]).sum::<f64>() / n_heads)
            .collect();
        let salient = argmax_first(subject_row.into_iter());
        let cross = (0..h * w).map(|p| {
            out.heads
                .iter()
                .map(|hd| hd.probs[[out.n_prompt + p, salient]])
                .sum::<f64>()
                / n_heads
        });
        let best = argmax_first(cross);
        Ok((best / w, best % w))
    }

    pub fn report(&self, offset: PositionalOffset) -> Result<ShiftReport> {
        let (h, w) = self.grid;
        if offset.drow.unsigned_abs() as usize >= h || offset.dcol.unsigned_abs() as usize >= w {
            return Err(Error::InvalidInput(format!(
                "offset ({}, {}) outside grid {h}x{w}",
                offset.drow, offset.dcol
            )));
        }
        Ok(ShiftReport {
            offset,
            before: self.locate(PositionalOffset::ZERO)?,
            after: self.locate(offset)?,
        })
    }
}
