//! Three-axis rotary positional encoding.
//!
//! Head channels are split into three contiguous blocks: a text axis (the
//! token's sequence index), a row axis and a column axis. Text tokens sit at
//! `(index, 0, 0)` and image tokens at `(0, row + drow, col + dcol)`. Within
//! an axis block of width `n`, channel pair `(2i, 2i + 1)` is rotated by
//! `pos · θ^(-2i/n)` with `θ = 10000` by default.

use serde::{Deserialize, Serialize};

use super::attention::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    /// Channel widths of the (text, row, col) axes; each even, summing to
    /// the head dimension.
    pub axes: [usize; 3],
    pub theta: f64,
}

impl RopeConfig {
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim < 6 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {head_dim} must be even and at least 6"
            )));
        }
        let pairs = head_dim / 2;
        let image_pairs = (pairs - 1) / 2;
        let text_pairs = pairs - 2 * image_pairs;
        Ok(Self {
            axes: [2 * text_pairs, 2 * image_pairs, 2 * image_pairs],
            theta: 10_000.0,
        })
    }

    pub fn validate(&self, head_dim: usize) -> Result<()> {
        if self.axes.iter().any(|a| a % 2 != 0 || *a == 0) || self.axes.iter().sum::<usize>() != head_dim {
            return Err(Error::Config(format!(
                "rope axes {:?} must be even, non-zero and sum to head_dim {head_dim}",
                self.axes
            )));
        }
        if !(self.theta > 1.0) {
            return Err(Error::Config("rope theta must exceed 1".into()));
        }
        Ok(())
    }

    fn frequency(&self, axis_width: usize, pair: usize) -> f64 {
        self.theta.powf(-2.0 * pair as f64 / axis_width as f64)
    }

    /// Rotation angles `(cos, sin)` for every channel pair of a token.
    pub fn phases(&self, pos: TokenPosition) -> Vec<(f64, f64)> {
        let coords = [pos.text, pos.row, pos.col];
        let mut out = Vec::with_capacity(self.axes.iter().sum::<usize>() / 2);
        for (axis, &width) in self.axes.iter().enumerate() {
            for pair in 0..width / 2 {
                let angle = coords[axis] as f64 * self.frequency(width, pair);
                out.push((angle.cos(), angle.sin()));
            }
        }
        out
    }

    /// Rotates each row of `m` in place by the phases of its position.
    pub fn apply(&self, m: &mut Matrix, positions: &[TokenPosition]) {
        debug_assert_eq!(m.nrows(), positions.len());
        for (mut row, &pos) in m.rows_mut().into_iter().zip(positions) {
            for (p, (cos, sin)) in self.phases(pos).into_iter().enumerate() {
                let a = row[2 * p];
                let b = row[2 * p + 1];
                row[2 * p] = a * cos - b * sin;
                row[2 * p + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Integer position of a token along the three rotary axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenPosition {
    pub text: i64,
    pub row: i64,
    pub col: i64,
}

impl TokenPosition {
    pub fn text(index: usize) -> Self {
        Self {
            text: index as i64,
            row: 0,
            col: 0,
        }
    }

    pub fn image(row: usize, col: usize) -> Self {
        Self {
            text: 0,
            row: row as i64,
            col: col as i64,
        }
    }
}

/// Image-token positions for a grid with an integer `(drow, dcol)` offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalOffset {
    pub drow: i64,
    pub dcol: i64,
}

impl PositionalOffset {
    pub const ZERO: PositionalOffset = PositionalOffset { drow: 0, dcol: 0 };

    pub fn new(drow: i64, dcol: i64) -> Self {
        Self { drow, dcol }
    }

    pub fn then(self, other: PositionalOffset) -> Self {
        Self::new(self.drow + other.drow, self.dcol + other.dcol)
    }

    pub fn inverse(self) -> Self {
        Self::new(-self.drow, -self.dcol)
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// Row-major positions of a `height × width` grid shifted by the offset.
    pub fn grid_positions(&self, height: usize, width: usize) -> Vec<TokenPosition> {
        let mut out = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                out.push(TokenPosition {
                    text: 0,
                    row: r as i64 + self.drow,
                    col: c as i64 + self.dcol,
                });
            }
        }
        out
    }
}

pub fn text_positions(len: usize) -> Vec<TokenPosition> {
    (0..len).map(TokenPosition::text).collect()
}
