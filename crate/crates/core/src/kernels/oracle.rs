//! Pair-by-pair reference for every logits kernel.
//!
//! Nothing here touches the tape or the relative-index helpers: each `e_ij`
//! comes from explicit loops and scalar dot products, straight from the
//! per-method formulas.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::containers::{HeadProjections, PositionInputs};
use super::method::{MethodKind, MethodSpec};

pub const ORACLE_MAX_LEN: usize = 64;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() {
        s += a[t] * b[t];
    }
    s
}

/// Row vector `v M` for `v` of length `rows(M)`.
fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; cols];
    for c in 0..cols {
        let mut s = 0.0;
        for r in 0..rows {
            s += v[r] * m.at(r, c);
        }
        out[c] = s;
    }
    out
}

fn missing(what: &str) -> Error {
    Error::Config(format!("naive oracle needs {what}"))
}

/// Logits by explicit double loop. May contain non-finite values; callers
/// compare that against the kernel's error.
pub fn naive_oracle(
    spec: &MethodSpec,
    x: &Tensor,
    proj: &HeadProjections,
    pos: &PositionInputs,
) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    if n > ORACLE_MAX_LEN {
        return Err(Error::Input(format!("naive oracle is limited to {ORACLE_MAX_LEN} positions, got {n}")));
    }
    let d_z = proj.w_q.shape()[1];
    let s = (f64::from(spec.scaling_factor) * d_z as f64).sqrt();
    let q: Vec<Vec<f64>> = (0..n).map(|i| vec_mat(x.row(i), &proj.w_q)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| vec_mat(x.row(i), &proj.w_k)).collect();

    let vector_row = |i: usize, j: usize| -> Result<&[f64]> {
        let table = pos.table.as_ref().ok_or_else(|| missing("a relative table"))?;
        let kk = spec.clip_k as i64;
        let d = (j as i64 - i as i64).max(-kk).min(kk);
        Ok(table.weights().row((d + kk) as usize))
    };
    let scalar_at = |i: usize, j: usize| -> Result<f64> {
        let table = pos.scalar.as_ref().ok_or_else(|| missing("a scalar table"))?;
        let offset = j as i64 - i as i64;
        Ok(table.weights().data()[(offset + table.max_len() as i64 - 1) as usize])
    };

    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let qk = dot(&q[i], &k[j]);
            let e = match spec.kind {
                MethodKind::None
                | MethodKind::AbsoluteLearned
                | MethodKind::AbsoluteSinusoid
                | MethodKind::AbsoluteRealSentence => qk / s,
                MethodKind::Shaw => {
                    let a = vector_row(i, j)?;
                    // (q_i)(k_j + a_ij)ᵀ
                    let mut num = 0.0;
                    for t in 0..d_z {
                        num += q[i][t] * (k[j][t] + a[t]);
                    }
                    num / s
                }
                MethodKind::Raffel => (qk + scalar_at(i, j)?) / s,
                MethodKind::M2 => qk * scalar_at(i, j)? / s,
                MethodKind::M4 => {
                    let a = vector_row(i, j)?;
                    (qk + dot(&q[i], a) + dot(&k[j], a)) / s
                }
                MethodKind::M4M => {
                    let a = vector_row(i, j)?;
                    qk * dot(&q[i], a) * dot(&k[j], a) / s
                }
                MethodKind::Deberta => {
                    let a = vector_row(i, j)?;
                    let w_r = proj.w_r.as_ref().ok_or_else(|| missing("W^R"))?;
                    let w_t = proj.w_t.as_ref().ok_or_else(|| missing("W^T"))?;
                    (qk + dot(&q[i], &vec_mat(a, w_r)) + dot(&k[j], &vec_mat(a, w_t))) / s
                }
                MethodKind::Tupe => {
                    let p = proj.p.as_ref().ok_or_else(|| missing("p"))?;
                    let u_q = proj.u_q.as_ref().ok_or_else(|| missing("U^Q"))?;
                    let u_k = proj.u_k.as_ref().ok_or_else(|| missing("U^K"))?;
                    let corr = dot(&vec_mat(p.row(i), u_q), &vec_mat(p.row(j), u_k));
                    qk / s + corr / s + scalar_at(i, j)?
                }
            };
            let e = if spec.reset_cls && (i == 0 || j == 0) {
                let r = pos.reset.ok_or_else(|| missing("reset parameters"))?;
                qk / s + if i == 0 { r.theta1 } else { r.theta2 }
            } else {
                e
            };
            out.data_mut()[i * n + j] = e;
        }
    }
    Ok(out)
}
