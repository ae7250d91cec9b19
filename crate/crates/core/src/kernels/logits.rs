//! Pre-softmax attention logits for one head, one function per method.
//!
//! [`attention_logits`] is the differentiable implementation used by the
//! encoder. The `logits_*` functions wrap it for plain tensors, recording on
//! a throwaway tape.
//!
//! With `q = x W^Q`, `k = x W^K`, `s = sqrt(f · d_z)` and `a_ij` the
//! relative parameter for offset `j − i`:
//!
//! | kind     | e_ij |
//! |----------|------|
//! | baseline | `q_i·k_j / s` |
//! | shaw     | `(q_i·k_j + q_i·a_ij) / s` |
//! | raffel   | `(q_i·k_j + a_ij) / s` (scalar `a`) |
//! | m2       | `(q_i·k_j) · a_ij / s` (scalar `a`) |
//! | m4       | `(q_i·k_j + q_i·a_ij + k_j·a_ij) / s` |
//! | m4m      | `(q_i·k_j) (q_i·a_ij) (k_j·a_ij) / s` |
//! | deberta  | `(q_i·k_j + q_i·(a_ij W^R) + k_j·(a_ij W^T)) / s` |
//! | tupe     | `q_i·k_j / s + (p_i U^Q)·(p_j U^K) / s + a_ij` (scalar `a`) |
//!
//! With `reset_cls`, the logit splits into content `q_i·k_j / s` plus a
//! positional remainder `v_ij`; row 0 of `v` becomes `θ1` and the rest of
//! column 0 becomes `θ2`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};

use super::containers::{
    HeadProjections, PositionInputs, RelativeTable, ResetParams, ScalarRelativeTable,
};
use super::method::{MethodKind, MethodSpec};
use super::relative::{clipped_index_map, raw_index_map};

/// Tape handles for the position parameters one head reads.
#[derive(Clone, Copy, Debug, Default)]
pub struct PositionVars {
    /// `[2k+1, d_z]` clipped vector table.
    pub table: Option<Var>,
    /// `[1, 2n−1]` scalar table.
    pub scalar: Option<Var>,
    pub w_r: Option<Var>,
    pub w_t: Option<Var>,
    pub u_q: Option<Var>,
    pub u_k: Option<Var>,
    /// `[n, d_z]` absolute table (TUPE).
    pub p: Option<Var>,
    /// `(θ1, θ2)`, each `[1]`.
    pub reset: Option<(Var, Var)>,
}

fn need(v: Option<Var>, kind: MethodKind, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::Config(format!("{kind} logits require {what}")))
}

/// `out[i,j] = q_i · table[idx(i,j)]`, or `k_j · table[idx(i,j)]` when
/// `by_key`.
fn relative_dot(
    tape: &mut Tape,
    x: Var,
    table: Var,
    map: &[usize],
    len: usize,
    by_key: bool,
) -> Result<Var> {
    let rows = tape.shape(table)[0];
    let scores = tape.matmul_nt(x, table)?;
    let index: Vec<usize> = map
        .iter()
        .enumerate()
        .map(|(t, &r)| {
            let owner = if by_key { t % len } else { t / len };
            owner * rows + r
        })
        .collect();
    tape.gather_elems(scores, &index, &[len, len])
}

fn scalar_offsets(tape: &mut Tape, scalar: Var, len: usize) -> Result<Var> {
    let entries = tape.value(scalar).len();
    if entries % 2 == 0 {
        return Err(shape_err("scalar table", format!("{entries} entries is not 2n−1")));
    }
    let map = raw_index_map(len, entries.div_ceil(2))?;
    tape.gather_elems(scalar, &map, &[len, len])
}

/// Differentiable logits `e ∈ ℝ^{len×len}` for one head.
///
/// `q` and `k` are the projected `[len, d_z]` queries and keys.
pub fn attention_logits(
    tape: &mut Tape,
    spec: &MethodSpec,
    q: Var,
    k: Var,
    pos: &PositionVars,
) -> Result<Var> {
    let (len, d_z) = match tape.shape(q) {
        [r, c] => (*r, *c),
        other => return Err(shape_err("attention_logits", format!("q must be a matrix, got {other:?}"))),
    };
    if tape.shape(k) != [len, d_z] {
        return Err(shape_err("attention_logits", format!("k {:?} vs q [{len},{d_z}]", tape.shape(k))));
    }
    let kind = spec.kind;
    let inv = 1.0 / (f64::from(spec.scaling_factor) * d_z as f64).sqrt();
    let content = tape.matmul_nt(q, k)?;

    if !kind.is_relative() {
        if spec.reset_cls {
            return Err(Error::Config(format!("reset is undefined for {kind}")));
        }
        return Ok(tape.scale(content, inv));
    }

    let reset = match (spec.reset_cls, pos.reset) {
        (true, None) => return Err(Error::Config("reset_cls requested without reset parameters".into())),
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };

    let clipped_map = || -> Result<Vec<usize>> {
        let rows = tape.shape(need(pos.table, kind, "a relative table")?)[0];
        if rows != 2 * spec.clip_k + 1 {
            return Err(shape_err(
                "relative table",
                format!("{rows} rows for clip {} (expected {})", spec.clip_k, 2 * spec.clip_k + 1),
            ));
        }
        Ok(clipped_index_map(len, spec.clip_k))
    };

    // `numerator` is everything divided by `s`; `positional` is `e − content/s`
    // and is only materialized when a reset needs it.
    let (numerator, tupe_positional) = match kind {
        MethodKind::Shaw => {
            let map = clipped_map()?;
            let table = need(pos.table, kind, "a relative table")?;
            let aq = relative_dot(tape, q, table, &map, len, false)?;
            (tape.add(content, aq)?, None)
        }
        MethodKind::M4 | MethodKind::M4M | MethodKind::Deberta => {
            let map = clipped_map()?;
            let table = need(pos.table, kind, "a relative table")?;
            let (tq, tk) = if kind == MethodKind::Deberta {
                let w_r = need(pos.w_r, kind, "W^R")?;
                let w_t = need(pos.w_t, kind, "W^T")?;
                (tape.matmul(table, w_r)?, tape.matmul(table, w_t)?)
            } else {
                (table, table)
            };
            let aq = relative_dot(tape, q, tq, &map, len, false)?;
            let ak = relative_dot(tape, k, tk, &map, len, true)?;
            let num = if kind == MethodKind::M4M {
                let t = tape.mul(content, aq)?;
                tape.mul(t, ak)?
            } else {
                let t = tape.add(content, aq)?;
                tape.add(t, ak)?
            };
            (num, None)
        }
        MethodKind::Raffel | MethodKind::M2 => {
            let scalar = need(pos.scalar, kind, "a scalar table")?;
            let a = scalar_offsets(tape, scalar, len)?;
            let num = if kind == MethodKind::M2 {
                tape.mul(content, a)?
            } else {
                tape.add(content, a)?
            };
            (num, None)
        }
        MethodKind::Tupe => {
            let scalar = need(pos.scalar, kind, "a scalar table")?;
            let p = need(pos.p, kind, "an absolute table p")?;
            let u_q = need(pos.u_q, kind, "U^Q")?;
            let u_k = need(pos.u_k, kind, "U^K")?;
            let rows: Vec<usize> = (0..len).collect();
            if tape.shape(p)[0] < len {
                return Err(Error::Input(format!(
                    "sequence of {len} positions exceeds TUPE table of {}",
                    tape.shape(p)[0]
                )));
            }
            let p_rows = tape.gather_rows(p, &rows)?;
            let pq = tape.matmul(p_rows, u_q)?;
            let pk = tape.matmul(p_rows, u_k)?;
            let corr = tape.matmul_nt(pq, pk)?;
            let corr = tape.scale(corr, inv);
            let a = scalar_offsets(tape, scalar, len)?;
            (content, Some(tape.add(corr, a)?))
        }
        _ => unreachable!("non-relative kinds returned above"),
    };

    match (reset, tupe_positional) {
        (None, None) => Ok(tape.scale(numerator, inv)),
        (None, Some(v)) => {
            let c = tape.scale(content, inv);
            tape.add(c, v)
        }
        (Some((t1, t2)), v) => {
            let c = tape.scale(content, inv);
            let v = match v {
                Some(v) => v,
                None => {
                    let e = tape.scale(numerator, inv);
                    tape.sub(e, c)?
                }
            };
            let v = tape.reset_first(v, t1, t2)?;
            tape.add(c, v)
        }
    }
}

/// Pre-softmax logits of one head for plain tensors. Fails on non-finite
/// results instead of returning them.
pub fn head_logits(
    spec: &MethodSpec,
    x: &Tensor,
    proj: &HeadProjections,
    pos: &PositionInputs,
) -> Result<Tensor> {
    spec.validate()?;
    proj.validate(spec.kind)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wq = tape.constant(&proj.w_q);
    let wk = tape.constant(&proj.w_k);
    let q = tape.matmul(xv, wq)?;
    let k = tape.matmul(xv, wk)?;
    let mut vars = PositionVars::default();
    let mut leaf = |t: Option<&Tensor>| t.map(|t| tape.constant(t));
    vars.table = leaf(pos.table.as_ref().map(RelativeTable::weights));
    vars.scalar = leaf(pos.scalar.as_ref().map(ScalarRelativeTable::weights));
    vars.w_r = leaf(proj.w_r.as_ref());
    vars.w_t = leaf(proj.w_t.as_ref());
    vars.u_q = leaf(proj.u_q.as_ref());
    vars.u_k = leaf(proj.u_k.as_ref());
    vars.p = leaf(proj.p.as_ref());
    if let Some(r) = pos.reset {
        let t1 = tape.constant(&Tensor::scalar(r.theta1));
        let t2 = tape.constant(&Tensor::scalar(r.theta2));
        vars.reset = Some((t1, t2));
    }
    let e = attention_logits(&mut tape, spec, q, k, &vars)?;
    if !tape.is_finite(e) {
        return Err(Error::NonFinite(format!("{} attention logits", spec.kind)));
    }
    Ok(tape.tensor(e))
}

fn spec_for(kind: MethodKind, f: u32) -> MethodSpec {
    MethodSpec::new(kind).with_scaling(f)
}

pub fn logits_baseline(x: &Tensor, proj: &HeadProjections, f: u32) -> Result<Tensor> {
    head_logits(&spec_for(MethodKind::None, f), x, proj, &PositionInputs::default())
}

pub fn logits_shaw(x: &Tensor, proj: &HeadProjections, table: &RelativeTable, f: u32) -> Result<Tensor> {
    let spec = spec_for(MethodKind::Shaw, f).with_clip(table.clip_k());
    head_logits(&spec, x, proj, &PositionInputs::vector(table.clone()))
}

pub fn logits_raffel(x: &Tensor, proj: &HeadProjections, s: &ScalarRelativeTable, f: u32) -> Result<Tensor> {
    head_logits(&spec_for(MethodKind::Raffel, f), x, proj, &PositionInputs::scalar(s.clone()))
}

pub fn logits_m2(x: &Tensor, proj: &HeadProjections, s: &ScalarRelativeTable, f: u32) -> Result<Tensor> {
    head_logits(&spec_for(MethodKind::M2, f), x, proj, &PositionInputs::scalar(s.clone()))
}

pub fn logits_m4(x: &Tensor, proj: &HeadProjections, table: &RelativeTable, f: u32) -> Result<Tensor> {
    let spec = spec_for(MethodKind::M4, f).with_clip(table.clip_k());
    head_logits(&spec, x, proj, &PositionInputs::vector(table.clone()))
}

pub fn logits_m4m(x: &Tensor, proj: &HeadProjections, table: &RelativeTable, f: u32) -> Result<Tensor> {
    let spec = spec_for(MethodKind::M4M, f).with_clip(table.clip_k());
    head_logits(&spec, x, proj, &PositionInputs::vector(table.clone()))
}

/// DeBERTa logits; `proj` must carry `w_r` and `w_t`. The usual `f` is 3.
pub fn logits_deberta(x: &Tensor, proj: &HeadProjections, table: &RelativeTable, f: u32) -> Result<Tensor> {
    let spec = spec_for(MethodKind::Deberta, f).with_clip(table.clip_k());
    head_logits(&spec, x, proj, &PositionInputs::vector(table.clone()))
}

/// TUPE logits; `proj` must carry `u_q`, `u_k` and `p`. The usual `f` is 2.
pub fn logits_tupe(
    x: &Tensor,
    proj: &HeadProjections,
    s: &ScalarRelativeTable,
    reset: Option<&ResetParams>,
    f: u32,
) -> Result<Tensor> {
    let spec = spec_for(MethodKind::Tupe, f).with_reset(reset.is_some());
    let mut pos = PositionInputs::scalar(s.clone());
    pos.reset = reset.copied();
    head_logits(&spec, x, proj, &pos)
}

/// Replaces row 0 with `θ1` and the rest of column 0 with `θ2`.
pub fn apply_reset(v: &Tensor, r: &ResetParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vv = tape.constant(v);
    let t1 = tape.constant(&Tensor::scalar(r.theta1));
    let t2 = tape.constant(&Tensor::scalar(r.theta2));
    let out = tape.reset_first(vv, t1, t2)?;
    Ok(tape.tensor(out))
}
