//! Closed-form position-parameter counts and their enumeration check.

use std::fmt::Write as _;

use crate::error::Result;
use crate::params::ParameterSet;

use super::method::{MethodKind, MethodSpec};
use super::positions::{Init, ModelDims, PositionLayout};

/// Closed-form number of position-embedding parameters.
///
/// Vector tables have `2k+1` rows (`2n−1` in the Table-style setting
/// `k = n−1`), scalar tables `2n−1` entries, both per layer and multiplied
/// by `h` when heads do not share. Tied position projections contribute one
/// `d_z×d_z` matrix per layer, untied ones two.
pub fn param_count(spec: &MethodSpec, dims: ModelDims) -> Result<u64> {
    spec.validate()?;
    dims.validate()?;
    let m = dims.layers as u64;
    let n = dims.max_len as u64;
    let d = dims.d_model as u64;
    let h = dims.heads as u64;
    let dz = d / h;
    let k = spec.clip_k as u64;
    let share = if spec.share_across_heads { 1 } else { h };
    let proj = if spec.untied_projections { 2 } else { 1 };

    let vector = m * (2 * k + 1) * dz * share;
    let scalar = m * (2 * n - 1) * share;
    let base = match spec.kind {
        MethodKind::None | MethodKind::AbsoluteSinusoid => 0,
        MethodKind::AbsoluteLearned | MethodKind::AbsoluteRealSentence => n * d,
        MethodKind::Shaw | MethodKind::M4 | MethodKind::M4M => vector,
        MethodKind::Raffel | MethodKind::M2 => scalar,
        MethodKind::Deberta => vector + proj * m * dz * dz,
        MethodKind::Tupe => m * n * dz + proj * m * dz * dz + scalar,
    };
    let reset = if spec.reset_cls { 2 * m } else { 0 };
    let absolute = if spec.combine_absolute { n * d } else { 0 };
    Ok(base + reset + absolute)
}

/// Human-readable closed form matching [`param_count`].
pub fn closed_form(spec: &MethodSpec, dims: ModelDims) -> String {
    let rows = if spec.clip_k + 1 == dims.max_len {
        "(2n-1)".to_string()
    } else {
        format!("(2k+1)[k={}]", spec.clip_k)
    };
    let vec_term = if spec.share_across_heads {
        format!("m{rows}d/h")
    } else {
        format!("m{rows}d")
    };
    let scalar_term = if spec.share_across_heads { "m(2n-1)" } else { "hm(2n-1)" };
    let proj_term = if spec.untied_projections { "2m(d/h)^2" } else { "m(d/h)^2" };
    let mut s = match spec.kind {
        MethodKind::None | MethodKind::AbsoluteSinusoid => "0".to_string(),
        MethodKind::AbsoluteLearned | MethodKind::AbsoluteRealSentence => "nd".to_string(),
        MethodKind::Shaw | MethodKind::M4 | MethodKind::M4M => vec_term,
        MethodKind::Raffel | MethodKind::M2 => scalar_term.to_string(),
        MethodKind::Deberta => format!("{vec_term} + {proj_term}"),
        MethodKind::Tupe => format!("mnd/h + {proj_term} + {scalar_term}"),
    };
    if spec.reset_cls {
        s.push_str(" + 2m");
    }
    if spec.combine_absolute {
        s.push_str(" + nd");
    }
    s
}

/// Counts the distinct scalars of actually instantiated position containers.
pub fn enumerate_position_params(spec: &MethodSpec, dims: ModelDims) -> Result<u64> {
    let mut params = ParameterSet::new();
    PositionLayout::build(spec, dims, &mut params, Init::Zeros)?;
    Ok(params.scalar_count())
}

/// The eight methods of the parameter-size table, in its row order, with
/// the clip distance set to `n−1` so every offset has its own row.
pub fn table_methods(dims: ModelDims) -> Vec<MethodSpec> {
    let k = dims.max_len.saturating_sub(1).max(1);
    [
        MethodKind::AbsoluteLearned,
        MethodKind::Shaw,
        MethodKind::Raffel,
        MethodKind::M2,
        MethodKind::M4,
        MethodKind::Deberta,
        MethodKind::Tupe,
        MethodKind::M4M,
    ]
    .into_iter()
    .map(|kind| {
        let spec = MethodSpec::new(kind);
        if kind.uses_vector_table() {
            spec.with_clip(k)
        } else {
            spec
        }
    })
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditRow {
    pub method: String,
    pub formula: String,
    pub closed_form: u64,
    pub enumerated: u64,
}

impl AuditRow {
    pub fn matches(&self) -> bool {
        self.closed_form == self.enumerated
    }
}

pub fn audit(specs: &[MethodSpec], dims: ModelDims) -> Result<Vec<AuditRow>> {
    specs
        .iter()
        .map(|spec| {
            Ok(AuditRow {
                method: spec.label(),
                formula: closed_form(spec, dims),
                closed_form: param_count(spec, dims)?,
                enumerated: enumerate_position_params(spec, dims)?,
            })
        })
        .collect()
}

/// `1234567` → `"1,234,567"`.
pub fn group_thousands(v: u64) -> String {
    let digits = v.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Aligned text table: method, closed form, count, rounded K, enumerated, status.
pub fn render_audit(rows: &[AuditRow]) -> String {
    let headers = ["method", "closed form", "count", "K", "enumerated", "status"];
    let cells: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.formula.clone(),
                group_thousands(r.closed_form),
                format!("{}K", r.closed_form / 1000),
                group_thousands(r.enumerated),
                if r.matches() { "ok" } else { "MISMATCH" }.to_string(),
            ]
        })
        .collect();
    let mut widths = headers.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, row: &[String]| {
        for (i, (c, w)) in row.iter().zip(&widths).enumerate() {
            let pad = w - c.chars().count();
            if i == 0 || i == 1 {
                let _ = write!(out, "{c}{}", " ".repeat(pad));
            } else {
                let _ = write!(out, "{}{c}", " ".repeat(pad));
            }
            out.push_str(if i + 1 < row.len() { "  " } else { "\n" });
        }
    };
    line(&mut out, &headers.map(String::from));
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut out, &rule);
    for row in &cells {
        line(&mut out, row);
    }
    out
}
