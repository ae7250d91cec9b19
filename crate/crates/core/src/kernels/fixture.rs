//! Random single-head instances for equivalence and property checks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::rng::Rng;

use super::containers::{HeadProjections, PositionInputs, RelativeTable, ResetParams, ScalarRelativeTable};
use super::method::{MethodKind, MethodSpec};

/// Inputs, projections and position parameters for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelInstance {
    pub x: Tensor,
    pub proj: HeadProjections,
    pub pos: PositionInputs,
}

fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Draws every array `spec` reads from `N(0, std)`; reset parameters are
/// drawn as well when `spec.reset_cls`. TUPE's `p` gets `max_len` rows.
pub fn random_instance(
    spec: &MethodSpec,
    len: usize,
    max_len: usize,
    d_x: usize,
    d_z: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<KernelInstance> {
    let x = normal(rng, &[len, d_x], 1.0);
    let mut proj = HeadProjections::new(
        normal(rng, &[d_x, d_z], std),
        normal(rng, &[d_x, d_z], std),
        normal(rng, &[d_x, d_z], std),
    );
    let mut pos = PositionInputs::default();
    if spec.kind.uses_vector_table() {
        pos.table = Some(RelativeTable::new(spec.clip_k, normal(rng, &[2 * spec.clip_k + 1, d_z], std))?);
    }
    if spec.kind.uses_scalar_table() {
        pos.scalar = Some(ScalarRelativeTable::new(max_len, normal(rng, &[1, 2 * max_len - 1], std))?);
    }
    match spec.kind {
        MethodKind::Deberta => {
            proj.w_r = Some(normal(rng, &[d_z, d_z], std));
            proj.w_t = Some(normal(rng, &[d_z, d_z], std));
        }
        MethodKind::Tupe => {
            proj.u_q = Some(normal(rng, &[d_z, d_z], std));
            proj.u_k = Some(normal(rng, &[d_z, d_z], std));
            proj.p = Some(normal(rng, &[max_len, d_z], std));
        }
        _ => {}
    }
    if spec.reset_cls {
        pos.reset = Some(ResetParams {
            theta1: rng.random_range(-2.0..2.0),
            theta2: rng.random_range(-2.0..2.0),
        });
    }
    Ok(KernelInstance { x, proj, pos })
}
