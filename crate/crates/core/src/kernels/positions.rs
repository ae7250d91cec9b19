//! Position-embedding parameters of a whole model: which arrays exist,
//! how they are shared, and how they are initialized.

use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamVars, ParameterSet};
use crate::rng::Rng;

use super::logits::PositionVars;
use super::method::{MethodKind, MethodSpec};

pub const INIT_STD: f64 = 0.02;

/// Model extents the position parameters depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
}

impl ModelDims {
    pub fn new(layers: usize, max_len: usize, d_model: usize, heads: usize) -> Self {
        Self {
            layers,
            max_len,
            d_model,
            heads,
        }
    }

    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.max_len == 0 || self.d_model == 0 || self.heads == 0 {
            return Err(Error::Config(format!("model extents must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// How to fill freshly created arrays.
pub enum Init<'a> {
    /// Everything zero; for counting only.
    Zeros,
    Random(&'a mut Rng),
}

impl Init<'_> {
    fn normal(&mut self, shape: &[usize]) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Random(rng) => {
                let dist = Normal::new(0.0, INIT_STD).expect("valid std");
                Tensor::from_fn(shape, |_| dist.sample(&mut **rng))
            }
        }
    }

    fn constant(&mut self, shape: &[usize], value: f64) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Random(_) => Tensor::full(shape, value),
        }
    }
}

/// Position parameters of one layer. Table vectors hold one entry when
/// shared across heads, else one per head.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerPosition {
    pub tables: Vec<ParamId>,
    pub scalars: Vec<ParamId>,
    pub w_r: Option<ParamId>,
    pub w_t: Option<ParamId>,
    pub u_q: Option<ParamId>,
    pub u_k: Option<ParamId>,
    pub p: Option<ParamId>,
    pub reset: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionLayout {
    /// Learned absolute input table, shared by all layers.
    pub absolute: Option<ParamId>,
    pub layers: Vec<LayerPosition>,
}

impl PositionLayout {
    /// Creates every position parameter `spec` needs in `params`.
    ///
    /// Relative parameters are always distinct per layer. Multiplicative
    /// scalar tables (M2) start at 1 so the content term survives.
    pub fn build(
        spec: &MethodSpec,
        dims: ModelDims,
        params: &mut ParameterSet,
        mut init: Init<'_>,
    ) -> Result<Self> {
        spec.validate()?;
        dims.validate()?;
        let kind = spec.kind;
        let d_z = dims.head_width();
        let n = dims.max_len;
        let absolute = if spec.has_learned_absolute() {
            Some(params.add("embed.position", init.normal(&[n, dims.d_model]))?)
        } else {
            None
        };
        let per_head = if spec.share_across_heads { 1 } else { dims.heads };
        let head_suffix = |h: usize| {
            if spec.share_across_heads {
                String::new()
            } else {
                format!(".head{h}")
            }
        };

        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let mut lp = LayerPosition::default();
            if kind.uses_vector_table() {
                for h in 0..per_head {
                    let t = init.normal(&[2 * spec.clip_k + 1, d_z]);
                    lp.tables.push(params.add(format!("layer{l}.pos.rel{}", head_suffix(h)), t)?);
                }
            }
            if kind.uses_scalar_table() {
                for h in 0..per_head {
                    let t = if kind == MethodKind::M2 {
                        init.constant(&[1, 2 * n - 1], 1.0)
                    } else {
                        init.normal(&[1, 2 * n - 1])
                    };
                    lp.scalars.push(params.add(format!("layer{l}.pos.scalar{}", head_suffix(h)), t)?);
                }
            }
            let mut pair = |params: &mut ParameterSet, first: &str, second: &str, tied: &str| -> Result<(ParamId, ParamId)> {
                if spec.untied_projections {
                    let a = params.add(format!("layer{l}.pos.{first}"), init.normal(&[d_z, d_z]))?;
                    let b = params.add(format!("layer{l}.pos.{second}"), init.normal(&[d_z, d_z]))?;
                    Ok((a, b))
                } else {
                    let a = params.add(format!("layer{l}.pos.{tied}"), init.normal(&[d_z, d_z]))?;
                    Ok((a, a))
                }
            };
            match kind {
                MethodKind::Deberta => {
                    let (r, t) = pair(params, "w_r", "w_t", "w_rt")?;
                    lp.w_r = Some(r);
                    lp.w_t = Some(t);
                }
                MethodKind::Tupe => {
                    let (q, k) = pair(params, "u_q", "u_k", "u_qk")?;
                    lp.u_q = Some(q);
                    lp.u_k = Some(k);
                    lp.p = Some(params.add(format!("layer{l}.pos.p"), init.normal(&[n, d_z]))?);
                }
                _ => {}
            }
            if spec.reset_cls {
                let t1 = params.add(format!("layer{l}.reset.theta1"), Tensor::scalar(0.0))?;
                let t2 = params.add(format!("layer{l}.reset.theta2"), Tensor::scalar(0.0))?;
                lp.reset = Some((t1, t2));
            }
            layers.push(lp);
        }
        Ok(Self { absolute, layers })
    }

    /// Tape handles for the parameters head `head` of layer `layer` reads.
    pub fn head_vars(&self, layer: usize, head: usize, vars: &ParamVars) -> PositionVars {
        let lp = &self.layers[layer];
        let pick = |ids: &[ParamId]| match ids.len() {
            0 => None,
            1 => Some(vars.var(ids[0])),
            _ => Some(vars.var(ids[head])),
        };
        PositionVars {
            table: pick(&lp.tables),
            scalar: pick(&lp.scalars),
            w_r: lp.w_r.map(|id| vars.var(id)),
            w_t: lp.w_t.map(|id| vars.var(id)),
            u_q: lp.u_q.map(|id| vars.var(id)),
            u_k: lp.u_k.map(|id| vars.var(id)),
            p: lp.p.map(|id| vars.var(id)),
            reset: lp.reset.map(|(a, b)| (vars.var(a), vars.var(b))),
        }
    }
}
