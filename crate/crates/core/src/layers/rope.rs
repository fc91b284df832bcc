//! Rotary position embeddings.
//!
//! Coordinates are rotated in consecutive pairs `(x[2i], x[2i+1])`. In 1D mode
//! pair `i` turns by `pos · θ^(−2i/d)`. In 2D mode the first half of the head
//! dimension is rotated by the row index and the second half by the column
//! index, each half using the 1D frequencies for a `d/2`-wide head.

use serde::{Deserialize, Serialize};

use super::LayerError;
use crate::numcore::{BackwardRule, Tape, Tensor, Var};

pub const DEFAULT_THETA: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    OneDimensional,
    TwoDimensional,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeParams {
    head_dim: usize,
    theta_base: f64,
    mode: RopeMode,
}

impl RopeParams {
    pub fn new(head_dim: usize, theta_base: f64, mode: RopeMode) -> Result<Self, LayerError> {
        let multiple = match mode {
            RopeMode::OneDimensional => 2,
            RopeMode::TwoDimensional => 4,
        };
        if head_dim == 0 || head_dim % multiple != 0 {
            return Err(LayerError::InvalidConfig(format!(
                "{mode:?} RoPE needs head_dim divisible by {multiple}, got {head_dim}"
            )));
        }
        if !(theta_base > 0.0 && theta_base.is_finite()) {
            return Err(LayerError::InvalidConfig(format!(
                "theta_base must be positive, got {theta_base}"
            )));
        }
        Ok(Self {
            head_dim,
            theta_base,
            mode,
        })
    }

    pub fn one_d(head_dim: usize) -> Result<Self, LayerError> {
        Self::new(head_dim, DEFAULT_THETA, RopeMode::OneDimensional)
    }

    pub fn two_d(head_dim: usize) -> Result<Self, LayerError> {
        Self::new(head_dim, DEFAULT_THETA, RopeMode::TwoDimensional)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn mode(&self) -> RopeMode {
        self.mode
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    fn inv_freq(&self, pair: usize, width: usize) -> f64 {
        self.theta_base.powf(-2.0 * pair as f64 / width as f64)
    }

    pub fn table_1d(&self, positions: &[usize]) -> Result<RopeTable, LayerError> {
        if self.mode != RopeMode::OneDimensional {
            return Err(LayerError::ModeMismatch {
                expected: RopeMode::OneDimensional,
                got: self.mode,
            });
        }
        let pairs = self.head_dim / 2;
        let freqs: Vec<f64> = (0..pairs)
            .map(|i| self.inv_freq(i, self.head_dim))
            .collect();
        Ok(RopeTable::build(positions.len(), pairs, |t, i| {
            positions[t] as f64 * freqs[i]
        }))
    }

    pub fn table_2d(&self, rows: &[usize], cols: &[usize]) -> Result<RopeTable, LayerError> {
        if self.mode != RopeMode::TwoDimensional {
            return Err(LayerError::ModeMismatch {
                expected: RopeMode::TwoDimensional,
                got: self.mode,
            });
        }
        if rows.len() != cols.len() {
            return Err(LayerError::ShapeMismatch(format!(
                "{} row indices for {} column indices",
                rows.len(),
                cols.len()
            )));
        }
        let half = self.head_dim / 2;
        let quarter = half / 2;
        let freqs: Vec<f64> = (0..quarter).map(|i| self.inv_freq(i, half)).collect();
        Ok(RopeTable::build(rows.len(), half, |t, i| {
            if i < quarter {
                rows[t] as f64 * freqs[i]
            } else {
                cols[t] as f64 * freqs[i - quarter]
            }
        }))
    }
}

/// Per-position cosines and sines for every coordinate pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    positions: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    fn build(positions: usize, pairs: usize, angle: impl Fn(usize, usize) -> f64) -> Self {
        let mut cos = Vec::with_capacity(positions * pairs);
        let mut sin = Vec::with_capacity(positions * pairs);
        for t in 0..positions {
            for i in 0..pairs {
                let (s, c) = angle(t, i).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self {
            positions,
            pairs,
            cos,
            sin,
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn head_dim(&self) -> usize {
        self.pairs * 2
    }

    /// Rotates `data` in place. `pos_axis` indexes the dimension of `shape`
    /// that carries positions; it must precede the head dimension (last).
    fn rotate(&self, data: &mut [f64], shape: &[usize], pos_axis: usize, inverse: bool) {
        let d = shape[shape.len() - 1];
        let outer: usize = shape[..pos_axis].iter().product();
        let inner: usize = shape[pos_axis + 1..shape.len() - 1].iter().product();
        let t_len = shape[pos_axis];
        let sign = if inverse { -1.0 } else { 1.0 };
        for o in 0..outer {
            for t in 0..t_len {
                let cos = &self.cos[t * self.pairs..(t + 1) * self.pairs];
                let sin = &self.sin[t * self.pairs..(t + 1) * self.pairs];
                for j in 0..inner {
                    let base = ((o * t_len + t) * inner + j) * d;
                    let v = &mut data[base..base + d];
                    for i in 0..self.pairs {
                        let (x0, x1) = (v[2 * i], v[2 * i + 1]);
                        let (c, s) = (cos[i], sign * sin[i]);
                        v[2 * i] = x0 * c - x1 * s;
                        v[2 * i + 1] = x0 * s + x1 * c;
                    }
                }
            }
        }
    }

    fn check(&self, shape: &[usize], pos_axis: usize) -> Result<(), LayerError> {
        if shape.len() < 2 || pos_axis >= shape.len() - 1 {
            return Err(LayerError::ShapeMismatch(format!(
                "RoPE input {shape:?} has no position axis {pos_axis} before the head dimension"
            )));
        }
        if shape[shape.len() - 1] != self.head_dim() {
            return Err(LayerError::ShapeMismatch(format!(
                "head dimension {} against RoPE head_dim {}",
                shape[shape.len() - 1],
                self.head_dim()
            )));
        }
        if shape[pos_axis] != self.positions {
            return Err(LayerError::ShapeMismatch(format!(
                "{} positions along axis {pos_axis}, table has {}",
                shape[pos_axis], self.positions
            )));
        }
        Ok(())
    }

    /// Applies the rotation to `x`, whose axis `pos_axis` indexes positions.
    pub fn apply(&self, x: &Tensor, pos_axis: usize) -> Result<Tensor, LayerError> {
        self.check(x.shape(), pos_axis)?;
        let mut out = x.clone();
        self.rotate(out.data_mut(), x.shape(), pos_axis, false);
        Ok(out)
    }

    /// Differentiable rotation recorded on `tape`.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        pos_axis: usize,
    ) -> Result<Var, LayerError> {
        let out = self.apply(tape.value(x), pos_axis)?;
        let rule = RopeRule {
            table: self.clone(),
            shape: out.shape().to_vec(),
            pos_axis,
        };
        Ok(tape.custom(&[x], out, Box::new(rule))?)
    }
}

struct RopeRule {
    table: RopeTable,
    shape: Vec<usize>,
    pos_axis: usize,
}

impl BackwardRule for RopeRule {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        if !needs[0] {
            return vec![None];
        }
        // Rotations are orthogonal: the adjoint is the inverse rotation.
        let mut g = grad_out.to_vec();
        self.table.rotate(&mut g, &self.shape, self.pos_axis, true);
        vec![Some(g)]
    }
}

fn position_axis(x: &Tensor) -> usize {
    x.ndim().saturating_sub(2)
}

/// 1D RoPE over `x` of shape `[… × T × head_dim]`.
pub fn rope_1d_apply(
    x: &Tensor,
    positions: &[usize],
    params: &RopeParams,
) -> Result<Tensor, LayerError> {
    params.table_1d(positions)?.apply(x, position_axis(x))
}

/// 2D RoPE over `x` of shape `[… × N × head_dim]` with per-token grid
/// coordinates.
pub fn rope_2d_apply(
    x: &Tensor,
    rows: &[usize],
    cols: &[usize],
    params: &RopeParams,
) -> Result<Tensor, LayerError> {
    params.table_2d(rows, cols)?.apply(x, position_axis(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;

    #[test]
    fn position_zero_is_identity() {
        let mut rng = SeededRng::new(1);
        let x = rng.normal_tensor(&[3, 8], 1.0);
        let p = RopeParams::one_d(8).unwrap();
        assert_eq!(rope_1d_apply(&x, &[0, 0, 0], &p).unwrap(), x);
        let p2 = RopeParams::two_d(8).unwrap();
        assert_eq!(rope_2d_apply(&x, &[0; 3], &[0; 3], &p2).unwrap(), x);
    }

    #[test]
    fn mode_and_shape_errors() {
        let x = Tensor::zeros(&[2, 8]);
        let p1 = RopeParams::one_d(8).unwrap();
        let p2 = RopeParams::two_d(8).unwrap();
        assert!(matches!(
            rope_2d_apply(&x, &[0, 1], &[0, 1], &p1),
            Err(LayerError::ModeMismatch { .. })
        ));
        assert!(matches!(
            rope_1d_apply(&x, &[0, 1], &p2),
            Err(LayerError::ModeMismatch { .. })
        ));
        assert!(RopeParams::two_d(6).is_err());
        assert!(RopeParams::one_d(7).is_err());
        assert!(matches!(
            rope_1d_apply(&Tensor::zeros(&[2, 6]), &[0, 1], &p1),
            Err(LayerError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn first_pair_turns_by_position() {
        let x = Tensor::new(vec![1, 4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let p = RopeParams::one_d(4).unwrap();
        let y = rope_1d_apply(&x, &[2], &p).unwrap();
        assert!((y.data()[0] - 2f64.cos()).abs() < 1e-15);
        assert!((y.data()[1] - 2f64.sin()).abs() < 1e-15);
        let f = 10_000f64.powf(-0.5) * 2.0;
        assert!((y.data()[2] - f.cos()).abs() < 1e-15);
        assert!((y.data()[3] - f.sin()).abs() < 1e-15);
    }
}
