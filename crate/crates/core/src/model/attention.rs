//! Joint attention over prompt and image tokens.
//!
//! Queries are always `[prompt; target]`. Keys and values are
//! `[source; prompt; target]` when a source partition is present and
//! `[prompt; target]` otherwise. Each key partition may carry its own scale,
//! applied to the keys before the dot product.

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};
use crate::extended::AttentionWeights;

pub type Matrix = Array2<f64>;

/// Projections of one attention head, partitioned by token origin.
/// Rows are tokens, columns are head channels.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadState {
    pub q_prompt: Matrix,
    pub q_target: Matrix,
    pub k_prompt: Matrix,
    pub k_target: Matrix,
    pub v_prompt: Matrix,
    pub v_target: Matrix,
    pub k_source: Option<Matrix>,
    pub v_source: Option<Matrix>,
}

impl HeadState {
    pub fn head_dim(&self) -> usize {
        self.q_prompt.ncols()
    }

    pub fn n_prompt(&self) -> usize {
        self.q_prompt.nrows()
    }

    pub fn n_target(&self) -> usize {
        self.q_target.nrows()
    }

    pub fn n_source(&self) -> usize {
        self.k_source.as_ref().map_or(0, |k| k.nrows())
    }

    pub fn has_source(&self) -> bool {
        self.k_source.is_some()
    }

    /// Same head with the source partition removed.
    pub fn without_source(&self) -> HeadState {
        HeadState {
            k_source: None,
            v_source: None,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.head_dim();
        let shapes_ok = self.q_target.ncols() == d
            && self.k_prompt.ncols() == d
            && self.k_target.ncols() == d
            && self.v_prompt.ncols() == d
            && self.v_target.ncols() == d
            && self.k_prompt.nrows() == self.q_prompt.nrows()
            && self.v_prompt.nrows() == self.q_prompt.nrows()
            && self.k_target.nrows() == self.q_target.nrows()
            && self.v_target.nrows() == self.q_target.nrows();
        if !shapes_ok {
            return Err(Error::ShapeMismatch(
                "prompt/target projections disagree in shape".into(),
            ));
        }
        match (&self.k_source, &self.v_source) {
            (None, None) => {}
            (Some(k), Some(v)) => {
                if k.ncols() != d || v.ncols() != d || k.nrows() != v.nrows() {
                    return Err(Error::ShapeMismatch(
                        "source keys/values disagree in shape".into(),
                    ));
                }
            }
            _ => {
                return Err(Error::ShapeMismatch(
                    "source keys and values must be present together".into(),
                ))
            }
        }
        let all_finite = [
            &self.q_prompt,
            &self.q_target,
            &self.k_prompt,
            &self.k_target,
            &self.v_prompt,
            &self.v_target,
        ]
        .into_iter()
        .chain(self.k_source.iter())
        .chain(self.v_source.iter())
        .all(|m| m.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(Error::NonFinite("attention inputs".into()));
        }
        Ok(())
    }
}

/// All heads of one block at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub heads: Vec<HeadState>,
}

impl AttentionState {
    pub fn has_source(&self) -> bool {
        self.heads.first().is_some_and(|h| h.has_source())
    }

    pub fn n_prompt(&self) -> usize {
        self.heads.first().map_or(0, |h| h.n_prompt())
    }

    pub fn n_target(&self) -> usize {
        self.heads.first().map_or(0, |h| h.n_target())
    }

    pub fn n_source(&self) -> usize {
        self.heads.first().map_or(0, |h| h.n_source())
    }

    pub fn without_source(&self) -> AttentionState {
        AttentionState {
            heads: self.heads.iter().map(HeadState::without_source).collect(),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| Error::InvalidInput("attention state has no heads".into()))?;
        for h in &self.heads {
            h.validate()?;
            if h.n_prompt() != first.n_prompt()
                || h.n_target() != first.n_target()
                || h.n_source() != first.n_source()
                || h.has_source() != first.has_source()
            {
                return Err(Error::ShapeMismatch("heads disagree in partition sizes".into()));
            }
        }
        Ok(())
    }
}

/// Result for one head: the row-stochastic matrix `A` and `h = A · V`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `(n_prompt + n_target) × (n_source + n_prompt + n_target)`.
    pub probs: Matrix,
    /// `(n_prompt + n_target) × head_dim`.
    pub hidden: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub heads: Vec<HeadOutput>,
    pub n_source: usize,
    pub n_prompt: usize,
    pub n_target: usize,
}

impl AttentionOutput {
    /// Column offset of the first prompt key.
    pub fn prompt_key_offset(&self) -> usize {
        self.n_source
    }

    /// Column offset of the first target key.
    pub fn target_key_offset(&self) -> usize {
        self.n_source + self.n_prompt
    }
}

/// Plain joint attention `softmax([Q_p, Q_img][K_p, K_img]ᵀ/√d_k)·[V_p, V_img]`.
pub fn baseline_attention(state: &AttentionState) -> Result<AttentionOutput> {
    if state.has_source() {
        return Err(Error::InvalidInput(
            "baseline attention takes no source partition".into(),
        ));
    }
    weighted_attention(state, &AttentionWeights::UNIT)
}

/// Attention with per-partition key scales. The source partition is used
/// when present and ignored otherwise.
pub fn weighted_attention(state: &AttentionState, weights: &AttentionWeights) -> Result<AttentionOutput> {
    state.validate()?;
    weights.validate()?;
    let heads = state
        .heads
        .iter()
        .map(|h| attend_head(h, weights))
        .collect();
    Ok(AttentionOutput {
        heads,
        n_source: state.n_source(),
        n_prompt: state.n_prompt(),
        n_target: state.n_target(),
    })
}

fn attend_head(head: &HeadState, weights: &AttentionWeights) -> HeadOutput {
    let inv_sqrt = 1.0 / (head.head_dim() as f64).sqrt();

    let mut keys = Vec::with_capacity(3);
    let mut values = Vec::with_capacity(3);
    if let (Some(k), Some(v)) = (&head.k_source, &head.v_source) {
        keys.push(k * weights.gamma_source);
        values.push(v.view());
    }
    keys.push(&head.k_prompt * weights.gamma_prompt);
    values.push(head.v_prompt.view());
    keys.push(&head.k_target * weights.gamma_target);
    values.push(head.v_target.view());

    let key_views: Vec<_> = keys.iter().map(|k| k.view()).collect();
    let k_all = concatenate(Axis(0), &key_views).expect("key widths agree");
    let v_all = concatenate(Axis(0), &values).expect("value widths agree");
    let q_all = concatenate(Axis(0), &[head.q_prompt.view(), head.q_target.view()])
        .expect("query widths agree");

    let mut probs = q_all.dot(&k_all.t());
    for mut row in probs.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l * inv_sqrt));
        let mut total = 0.0;
        row.mapv_inplace(|l| {
            let e = (l * inv_sqrt - max).exp();
            total += e;
            e
        });
        row.mapv_inplace(|e| e / total);
    }
    let hidden = probs.dot(&v_all);
    HeadOutput { probs, hidden }
}
