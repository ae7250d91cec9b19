//! Standalone (non-tape) parameter containers for a single attention head.

use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

use super::method::MethodKind;

/// Per-head projection matrices.
///
/// `w_q`, `w_k`, `w_v` are `d_x × d_z`. The position-side matrices are
/// `d_z × d_z` (`w_r`, `w_t` for DeBERTa; `u_q`, `u_k` for TUPE) and `p` is
/// TUPE's `n × d_z` absolute table.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_r: Option<Tensor>,
    pub w_t: Option<Tensor>,
    pub u_q: Option<Tensor>,
    pub u_k: Option<Tensor>,
    pub p: Option<Tensor>,
}

impl HeadProjections {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Self {
        Self {
            w_q,
            w_k,
            w_v,
            w_r: None,
            w_t: None,
            u_q: None,
            u_k: None,
            p: None,
        }
    }

    pub fn d_x(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_z(&self) -> usize {
        self.w_q.shape()[1]
    }

    /// Checks shapes and that optional matrices are present exactly for `kind`.
    pub fn validate(&self, kind: MethodKind) -> Result<()> {
        let (dx, dz) = self.w_q.dims2()?;
        for (name, w) in [("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.dims2()? != (dx, dz) {
                return Err(shape_err("projections", format!("{name} {:?} vs w_q {:?}", w.shape(), self.w_q.shape())));
            }
        }
        let deberta = kind == MethodKind::Deberta;
        let tupe = kind == MethodKind::Tupe;
        let square = [
            ("w_r", &self.w_r, deberta),
            ("w_t", &self.w_t, deberta),
            ("u_q", &self.u_q, tupe),
            ("u_k", &self.u_k, tupe),
        ];
        for (name, m, wanted) in square {
            match (m, wanted) {
                (Some(m), true) => {
                    if m.dims2()? != (dz, dz) {
                        return Err(shape_err("projections", format!("{name} must be [{dz},{dz}], got {:?}", m.shape())));
                    }
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::Config(format!("{name} is not used by {kind}")));
                }
                (None, true) => return Err(Error::Config(format!("{kind} requires {name}"))),
            }
        }
        match (&self.p, tupe) {
            (Some(p), true) => {
                if p.dims2()?.1 != dz {
                    return Err(shape_err("projections", format!("p must have width {dz}, got {:?}", p.shape())));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::Config(format!("p is not used by {kind}"))),
            (None, true) => return Err(Error::Config("tupe requires p".into())),
        }
        Ok(())
    }
}

/// Clipped vector table `w_{-k}, …, w_k`, one `d_z`-wide row per offset.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeTable {
    clip_k: usize,
    weights: Tensor,
}

impl RelativeTable {
    pub fn new(clip_k: usize, weights: Tensor) -> Result<Self> {
        let (rows, _) = weights.dims2()?;
        if clip_k == 0 || rows != 2 * clip_k + 1 {
            return Err(shape_err(
                "relative table",
                format!("clip {clip_k} needs {} rows, got {rows}", 2 * clip_k + 1),
            ));
        }
        Ok(Self { clip_k, weights })
    }

    pub fn zeros(clip_k: usize, d_z: usize) -> Self {
        Self::new(clip_k, Tensor::zeros(&[2 * clip_k + 1, d_z])).expect("consistent rows")
    }

    pub fn clip_k(&self) -> usize {
        self.clip_k
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    /// `w_offset` after clipping.
    pub fn row(&self, offset: i64) -> &[f64] {
        let k = self.clip_k as i64;
        self.weights.row((offset.clamp(-k, k) + k) as usize)
    }
}

/// Unclipped scalar table `w_{1-n}, …, w_{n-1}` stored as `[1, 2n−1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarRelativeTable {
    max_len: usize,
    weights: Tensor,
}

impl ScalarRelativeTable {
    pub fn new(max_len: usize, weights: Tensor) -> Result<Self> {
        if max_len == 0 || weights.len() != 2 * max_len - 1 {
            return Err(shape_err(
                "scalar table",
                format!("length {max_len} needs {} entries, got {}", 2 * max_len - 1, weights.len()),
            ));
        }
        let weights = weights.reshape(&[1, 2 * max_len - 1])?;
        Ok(Self { max_len, weights })
    }

    pub fn filled(max_len: usize, value: f64) -> Self {
        Self::new(max_len, Tensor::full(&[1, 2 * max_len - 1], value)).expect("consistent length")
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// `w_{offset}` for `1−n ≤ offset ≤ n−1`.
    pub fn get(&self, offset: i64) -> f64 {
        self.weights.data()[(offset + self.max_len as i64 - 1) as usize]
    }
}

/// Learned logits for the classification position's row (`theta1`) and
/// column (`theta2`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResetParams {
    pub theta1: f64,
    pub theta2: f64,
}

/// Position parameters a single head's logits may read.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PositionInputs {
    pub table: Option<RelativeTable>,
    pub scalar: Option<ScalarRelativeTable>,
    pub reset: Option<ResetParams>,
}

impl PositionInputs {
    pub fn vector(table: RelativeTable) -> Self {
        Self {
            table: Some(table),
            ..Self::default()
        }
    }

    pub fn scalar(table: ScalarRelativeTable) -> Self {
        Self {
            scalar: Some(table),
            ..Self::default()
        }
    }

    pub fn with_reset(mut self, reset: ResetParams) -> Self {
        self.reset = Some(reset);
        self
    }
}
