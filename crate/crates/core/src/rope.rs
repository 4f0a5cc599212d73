//! Axial 2D rotary position embedding and position-index assignment.
//!
//! Each head's feature vector is split into dimension pairs. The first half of
//! the pairs rotates with the row index `i`, the second half with the column
//! index `j`. Within an axis, pair `k` uses frequency
//! `theta_k = base^(-2k / (d_head / 2))`.

use serde::{Deserialize, Serialize};

use crate::attention::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Position2D {
    pub i: u32,
    pub j: u32,
}

impl Position2D {
    pub const ORIGIN: Position2D = Position2D { i: 0, j: 0 };

    pub fn new(i: u32, j: u32) -> Self {
        Self { i, j }
    }

    pub fn offset(self, delta: Position2D) -> Self {
        Self {
            i: self.i + delta.i,
            j: self.j + delta.j,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Aligned,
    NonAligned,
}

/// How condition-image tokens are indexed relative to the noisy-image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionPolicy {
    pub mode: PositionMode,
    pub delta: Position2D,
}

impl PositionPolicy {
    pub fn aligned() -> Self {
        Self {
            mode: PositionMode::Aligned,
            delta: Position2D::ORIGIN,
        }
    }

    /// Non-aligned policy with the default shift `(0, W)`, which places the
    /// condition grid immediately to the right of the image grid.
    pub fn shifted(grid_w: u32) -> Self {
        Self {
            mode: PositionMode::NonAligned,
            delta: Position2D::new(0, grid_w),
        }
    }

    pub fn for_mode(mode: PositionMode, grid_w: u32) -> Self {
        match mode {
            PositionMode::Aligned => Self::aligned(),
            PositionMode::NonAligned => Self::shifted(grid_w),
        }
    }

    /// Checks the policy against an `h x w` grid.
    pub fn validate(&self, grid_h: u32, grid_w: u32) -> Result<()> {
        match self.mode {
            PositionMode::Aligned if self.delta != Position2D::ORIGIN => Err(Error::Policy(
                "aligned mode requires a zero offset".into(),
            )),
            PositionMode::Aligned => Ok(()),
            PositionMode::NonAligned => {
                // Shifted grid [di, di+h) x [dj, dj+w) must miss [0,h) x [0,w).
                let disjoint = self.delta.i >= grid_h || self.delta.j >= grid_w;
                if disjoint {
                    Ok(())
                } else {
                    Err(Error::Policy(format!(
                        "offset ({}, {}) overlaps the {grid_h}x{grid_w} image grid",
                        self.delta.i, self.delta.j
                    )))
                }
            }
        }
    }
}

/// Row-major enumeration of an `h x w` grid.
pub fn grid_positions(grid_h: u32, grid_w: u32) -> Vec<Position2D> {
    (0..grid_h)
        .flat_map(|i| (0..grid_w).map(move |j| Position2D::new(i, j)))
        .collect()
}

/// Assigns 2D positions to every token: text at the origin, the noisy image on
/// its grid, and the condition on the grid (aligned) or the grid shifted by the
/// policy offset (non-aligned).
pub fn assign_positions(seq: &TokenSequence, policy: PositionPolicy) -> Result<TokenSequence> {
    let (h, w) = seq.grid();
    policy.validate(h, w)?;
    let lengths = seq.lengths();
    let grid = grid_positions(h, w);
    let mut positions = Vec::with_capacity(lengths.total());
    positions.extend(std::iter::repeat(Position2D::ORIGIN).take(lengths.text));
    positions.extend(grid.iter().copied());
    if lengths.cond > 0 {
        positions.extend(grid.iter().map(|p| p.offset(policy.delta)));
    }
    let mut out = seq.clone();
    out.set_positions(positions);
    Ok(out)
}

/// Rotation angle table for `positions`, laid out `[n, d_head / 2]`.
pub(crate) struct RopeTable {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub half: usize,
}

pub(crate) fn check_head_dim(d_head: usize, base: f64) -> Result<()> {
    if d_head == 0 || d_head % 4 != 0 {
        return Err(Error::Config(format!(
            "per-head dimension {d_head} must be a positive multiple of 4"
        )));
    }
    if !(base > 1.0) {
        return Err(Error::Config(format!("rope base must exceed 1, got {base}")));
    }
    Ok(())
}

pub(crate) fn rope_table(positions: &[Position2D], d_head: usize, base: f64) -> RopeTable {
    let half = d_head / 2;
    let per_axis = d_head / 4;
    let freqs: Vec<f64> = (0..per_axis)
        .map(|k| base.powf(-2.0 * k as f64 / half as f64))
        .collect();
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for p in positions {
        for q in 0..half {
            let (coord, k) = if q < per_axis {
                (p.i, q)
            } else {
                (p.j, q - per_axis)
            };
            let angle = coord as f64 * freqs[k];
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    RopeTable { cos, sin, half }
}

/// Rotates each head-slice of row `t` in `x[n, heads * d_head]` in place.
/// `sign = -1.0` applies the inverse rotation (used by the backward pass).
pub(crate) fn rotate_rows(x: &mut [f64], width: usize, d_head: usize, table: &RopeTable, sign: f64) {
    let half = table.half;
    for (t, row) in x.chunks_mut(width).enumerate() {
        let cos = &table.cos[t * half..(t + 1) * half];
        let sin = &table.sin[t * half..(t + 1) * half];
        for head in row.chunks_mut(d_head) {
            for q in 0..half {
                let (c, s) = (cos[q], sign * sin[q]);
                let a = head[2 * q];
                let b = head[2 * q + 1];
                head[2 * q] = a * c - b * s;
                head[2 * q + 1] = a * s + b * c;
            }
        }
    }
}

/// Applies 2D RoPE to `x[heads, n, d_head]`.
pub fn rope_rotate(x: &Tensor, positions: &[Position2D], base: f64) -> Result<Tensor> {
    let [heads, n, d_head] = match *x.shape() {
        [h, n, d] => [h, n, d],
        _ => {
            return Err(Error::Dimension(format!(
                "rope expects [heads, n, d_head], got {:?}",
                x.shape()
            )))
        }
    };
    check_head_dim(d_head, base)?;
    if positions.len() != n {
        return Err(Error::Dimension(format!(
            "{} positions for {n} tokens",
            positions.len()
        )));
    }
    let table = rope_table(positions, d_head, base);
    let mut out = x.data().to_vec();
    for h in 0..heads {
        let block = &mut out[h * n * d_head..(h + 1) * n * d_head];
        rotate_rows(block, d_head, d_head, &table, 1.0);
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn origin_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let out = rope_rotate(&x, &[Position2D::ORIGIN; 3], DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn unit_row_index_rotates_first_pair_by_one_radian() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 0.5, -0.3, 2.0]).unwrap();
        let out = rope_rotate(&x, &[Position2D::new(1, 0)], 10_000.0).unwrap();
        let (c, s) = (1.0f64.cos(), 1.0f64.sin());
        let expect = [1.0 * c - 0.5 * s, 1.0 * s + 0.5 * c, -0.3, 2.0];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn head_dim_must_be_multiple_of_four() {
        let x = Tensor::zeros(&[1, 1, 6]);
        assert!(matches!(
            rope_rotate(&x, &[Position2D::ORIGIN], 10_000.0),
            Err(Error::Config(_))
        ));
    }

    fn two_by_two(cond: bool) -> TokenSequence {
        let x = Tensor::zeros(&[4, 4]);
        let t = Tensor::zeros(&[1, 4]);
        TokenSequence::from_parts(&t, &x, cond.then_some(&x), (2, 2)).unwrap()
    }

    #[test]
    fn aligned_condition_shares_image_positions() {
        let s = assign_positions(&two_by_two(true), PositionPolicy::aligned()).unwrap();
        let p = s.positions().unwrap();
        assert_eq!(p[0], Position2D::ORIGIN);
        assert_eq!(&p[1..5], &p[5..9]);
        assert_eq!(p[1..5], grid_positions(2, 2)[..]);
    }

    #[test]
    fn shifted_condition_is_disjoint() {
        let s = assign_positions(&two_by_two(true), PositionPolicy::shifted(2)).unwrap();
        let p = s.positions().unwrap();
        assert!(p[5..9].iter().all(|q| q.j >= 2));
        assert!(p[1..5].iter().all(|q| q.j < 2));
        let zero = PositionPolicy {
            mode: PositionMode::NonAligned,
            delta: Position2D::ORIGIN,
        };
        assert!(matches!(
            assign_positions(&two_by_two(true), zero),
            Err(Error::Policy(_))
        ));
    }

    #[test]
    fn assignment_is_idempotent() {
        let once = assign_positions(&two_by_two(true), PositionPolicy::shifted(2)).unwrap();
        let twice = assign_positions(&once, PositionPolicy::shifted(2)).unwrap();
        assert_eq!(once, twice);
        let no_cond = assign_positions(&two_by_two(false), PositionPolicy::shifted(2)).unwrap();
        assert_eq!(no_cond.positions().unwrap().len(), 5);
    }

    #[test]
    fn policy_validation() {
        assert!(PositionPolicy::shifted(2).validate(2, 2).is_ok());
        let zero = PositionPolicy {
            mode: PositionMode::NonAligned,
            delta: Position2D::ORIGIN,
        };
        assert!(matches!(zero.validate(2, 2), Err(Error::Policy(_))));
        let partial = PositionPolicy {
            mode: PositionMode::NonAligned,
            delta: Position2D::new(1, 1),
        };
        assert!(partial.validate(2, 2).is_err());
        let bad_aligned = PositionPolicy {
            mode: PositionMode::Aligned,
            delta: Position2D::new(0, 1),
        };
        assert!(bad_aligned.validate(2, 2).is_err());
    }
}
