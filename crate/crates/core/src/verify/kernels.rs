//! Kernel-level checks: oracle equivalence, reduction identities and shift
//! invariance, each returning measured deviations rather than asserting.

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{
    head_logits, naive_oracle, random_instance, HeadProjections, KernelInstance, MethodKind, MethodSpec,
    PositionInputs, RelativeTable, ScalarRelativeTable,
};
use crate::rng::substream;

pub const ORACLE_TOL: f64 = 1e-12;
const SCALING_FACTORS: [u32; 6] = [1, 2, 3, 4, 6, 9];

/// Outcome of comparing one method against the naive oracle over many seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCase {
    pub spec: MethodSpec,
    pub seeds: usize,
    pub max_abs_diff: f64,
    pub longest: usize,
    /// Seeds where exactly one side produced a non-finite value.
    pub nonfinite_mismatches: usize,
}

impl OracleCase {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_abs_diff <= tol && self.nonfinite_mismatches == 0
    }
}

/// Every kind once, plus the reset hybrids.
pub fn oracle_specs() -> Vec<MethodSpec> {
    let mut specs: Vec<MethodSpec> = MethodKind::ALL.iter().map(|&k| MethodSpec::new(k)).collect();
    for kind in [MethodKind::Tupe, MethodKind::M4, MethodKind::Shaw, MethodKind::M4M, MethodKind::Raffel] {
        specs.push(MethodSpec::new(kind).with_reset(true));
    }
    specs
}

/// Random instances with `2 ≤ n ≤ max_len`, clip in `1..=8` and a random
/// scaling factor, compared entry by entry with [`naive_oracle`].
pub fn oracle_sweep(spec: MethodSpec, seeds: usize, max_len: usize, root: u64) -> Result<OracleCase> {
    let mut case = OracleCase {
        spec,
        seeds,
        max_abs_diff: 0.0,
        longest: 0,
        nonfinite_mismatches: 0,
    };
    for seed in 0..seeds {
        let mut rng = substream(root, &format!("oracle/{}/{seed}", spec.label()));
        let n = rng.random_range(2..=max_len);
        let d_x = rng.random_range(2..=12);
        let d_z = rng.random_range(1..=8);
        let mut s = spec;
        if s.kind.uses_vector_table() {
            s = s.with_clip(rng.random_range(1..=8));
        }
        if rng.random_bool(0.5) {
            s = s.with_scaling(*SCALING_FACTORS.choose(&mut rng).expect("non-empty"));
        }
        let table_len = n + rng.random_range(0..=4);
        let inst = random_instance(&s, n, table_len, d_x, d_z, 0.5, &mut rng)?;
        case.longest = case.longest.max(n);
        let reference = naive_oracle(&s, &inst.x, &inst.proj, &inst.pos)?;
        match head_logits(&s, &inst.x, &inst.proj, &inst.pos) {
            Ok(e) => {
                if !reference.is_finite() {
                    case.nonfinite_mismatches += 1;
                } else {
                    case.max_abs_diff = case.max_abs_diff.max(e.max_abs_diff(&reference));
                }
            }
            Err(Error::NonFinite(_)) => {
                if reference.is_finite() {
                    case.nonfinite_mismatches += 1;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(case)
}

/// A named identity with its measured deviation and tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCheck {
    pub name: String,
    pub deviation: f64,
    pub tol: f64,
}

impl IdentityCheck {
    pub fn passes(&self) -> bool {
        self.deviation <= self.tol
    }
}

fn softmax(e: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(e);
    let s = tape.softmax_rows(v, None)?;
    Ok(tape.tensor(s))
}

fn uniform_deviation(e: &Tensor) -> Result<f64> {
    let n = e.shape()[1];
    let p = softmax(e)?;
    Ok(p.data().iter().map(|&v| (v - 1.0 / n as f64).abs()).fold(0.0, f64::max))
}

fn scaled(t: &Tensor, c: f64) -> Tensor {
    Tensor::from_fn(t.shape(), |i| t.data()[i] * c)
}

fn logits(spec: &MethodSpec, inst: &KernelInstance) -> Result<Tensor> {
    head_logits(spec, &inst.x, &inst.proj, &inst.pos)
}

fn baseline(inst: &KernelInstance, f: u32) -> Result<Tensor> {
    let proj = HeadProjections::new(inst.proj.w_q.clone(), inst.proj.w_k.clone(), inst.proj.w_v.clone());
    head_logits(&MethodSpec::new(MethodKind::None).with_scaling(f), &inst.x, &proj, &PositionInputs::default())
}

/// Degenerate parameters that reduce each method to a (rescaled) baseline,
/// the uniform-attention cases, and the M4M sign symmetry, each worst-cased
/// over `seeds` random instances.
pub fn reduction_identities(seeds: usize, root: u64) -> Result<Vec<IdentityCheck>> {
    let mut worst: Vec<(String, f64, f64)> = Vec::new();
    let mut record = |name: &str, dev: f64, tol: f64| {
        match worst.iter_mut().find(|(n, _, _)| n == name) {
            Some(entry) => entry.1 = entry.1.max(dev),
            None => worst.push((name.to_string(), dev, tol)),
        }
    };
    for seed in 0..seeds {
        let mut rng = substream(root, &format!("identities/{seed}"));
        let n = rng.random_range(2..=16);
        let d_x = rng.random_range(2..=10);
        let d_z = rng.random_range(1..=6);
        let k = rng.random_range(1..=6);

        for kind in [MethodKind::Shaw, MethodKind::M4, MethodKind::Deberta] {
            let spec = MethodSpec::new(kind).with_clip(k);
            let mut inst = random_instance(&spec, n, n, d_x, d_z, 0.5, &mut rng)?;
            inst.pos.table = Some(RelativeTable::zeros(k, d_z));
            let e = logits(&spec, &inst)?;
            let f = spec.scaling_factor;
            record(&format!("{kind} zero table = baseline(f={f})"), e.max_abs_diff(&baseline(&inst, f)?), ORACLE_TOL);
            if kind == MethodKind::Deberta {
                let rescaled = scaled(&baseline(&inst, 1)?, (1.0f64 / 3.0).sqrt());
                record("deberta zero table = baseline(f=1)/sqrt(3)", e.max_abs_diff(&rescaled), ORACLE_TOL);
            }
        }

        let raffel = MethodSpec::new(MethodKind::Raffel);
        let mut inst = random_instance(&raffel, n, n, d_x, d_z, 0.5, &mut rng)?;
        inst.pos.scalar = Some(ScalarRelativeTable::filled(n, 0.0));
        record("raffel zero scalars = baseline", logits(&raffel, &inst)?.max_abs_diff(&baseline(&inst, 1)?), ORACLE_TOL);

        let m2 = MethodSpec::new(MethodKind::M2);
        let mut inst = random_instance(&m2, n, n, d_x, d_z, 0.5, &mut rng)?;
        inst.pos.scalar = Some(ScalarRelativeTable::filled(n, 1.0));
        record("m2 unit scalars = baseline", logits(&m2, &inst)?.max_abs_diff(&baseline(&inst, 1)?), ORACLE_TOL);
        inst.pos.scalar = Some(ScalarRelativeTable::filled(n, 0.0));
        record("m2 zero scalars -> uniform attention", uniform_deviation(&logits(&m2, &inst)?)?, 0.0);

        let m4m = MethodSpec::new(MethodKind::M4M).with_clip(k);
        let mut inst = random_instance(&m4m, n, n, d_x, d_z, 0.5, &mut rng)?;
        let e = logits(&m4m, &inst)?;
        let mut flipped = inst.clone();
        if let Some(t) = flipped.pos.table.as_mut() {
            for v in t.weights_mut().data_mut() {
                *v = -*v;
            }
        }
        record("m4m a_ij sign flip invariance", e.max_abs_diff(&logits(&m4m, &flipped)?), 0.0);
        inst.pos.table = Some(RelativeTable::zeros(k, d_z));
        record("m4m zero table -> uniform attention", uniform_deviation(&logits(&m4m, &inst)?)?, 0.0);

        let m4 = MethodSpec::new(MethodKind::M4).with_clip(k);
        let mut inst = random_instance(&m4, n, n, d_z, d_z, 0.5, &mut rng)?;
        inst.x = Tensor::zeros(&[n, d_z]);
        record("m4 zero input -> zero logits", logits(&m4, &inst)?.data().iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);

        let deberta = MethodSpec::new(MethodKind::Deberta).with_clip(k);
        let mut inst = random_instance(&deberta, n, n, d_z, d_z, 0.5, &mut rng)?;
        inst.proj.w_r = Some(Tensor::eye(d_z));
        inst.proj.w_t = Some(Tensor::eye(d_z));
        let e = logits(&deberta, &inst)?;
        let mut plain = inst.clone();
        plain.proj.w_r = None;
        plain.proj.w_t = None;
        let m4_e = logits(&m4.with_scaling(1), &plain)?;
        record("deberta identity projections = m4/sqrt(3)", e.max_abs_diff(&scaled(&m4_e, (1.0f64 / 3.0).sqrt())), ORACLE_TOL);

        let tupe = MethodSpec::new(MethodKind::Tupe);
        let mut inst = random_instance(&tupe, n, n, d_x, d_z, 0.5, &mut rng)?;
        inst.proj.p = Some(Tensor::zeros(&[n, d_z]));
        inst.pos.scalar = Some(ScalarRelativeTable::filled(n, 0.0));
        record("tupe p=0, a=0 = baseline(f=2)", logits(&tupe, &inst)?.max_abs_diff(&baseline(&inst, 2)?), ORACLE_TOL);
    }
    Ok(worst
        .into_iter()
        .map(|(name, deviation, tol)| IdentityCheck { name, deviation, tol })
        .collect())
}

/// Places the same content at offset 0 and at several shifts inside a
/// longer sequence and compares the overlapping logit blocks, for every
/// translation-invariant kind.
pub fn kernel_shift_invariance(seeds: usize, root: u64) -> Result<Vec<IdentityCheck>> {
    let mut out = Vec::new();
    for kind in MethodKind::ALL.into_iter().filter(|k| k.is_translation_invariant()) {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = substream(root, &format!("shift/{kind}/{seed}"));
            let n = rng.random_range(2..=12);
            let shift = rng.random_range(1..=8);
            let total = n + shift + rng.random_range(0..=4);
            let spec = MethodSpec::new(kind).with_clip(rng.random_range(1..=6));
            let d_x = rng.random_range(2..=8);
            let d_z = rng.random_range(1..=6);
            let long = random_instance(&spec, total, total, d_x, d_z, 0.5, &mut rng)?;
            let mut short = long.clone();
            short.x = Tensor::from_fn(&[n, d_x], |i| long.x.data()[shift * d_x + i]);
            let e_long = logits(&spec, &long)?;
            let e_short = logits(&spec, &short)?;
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((e_short.at(i, j) - e_long.at(i + shift, j + shift)).abs());
                }
            }
        }
        out.push(IdentityCheck {
            name: format!("{kind} shifted content"),
            deviation: worst,
            tol: ORACLE_TOL,
        });
    }
    Ok(out)
}
