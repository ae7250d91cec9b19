//! Post-LN transformer encoder with a pluggable attention-logit kernel.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Divergence, Error, Result};
use crate::kernels::{attention_logits, param_count, Init, MethodKind, PositionLayout};
use crate::params::{ParamId, ParamVars, ParameterSet};
use crate::rng::Rng;

use super::config::EncoderConfig;
use super::embedding::{embed_input, sinusoid_table, EmbeddingVars, SequenceInput};

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln1: (ParamId, ParamId),
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
    ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
struct CoreIds {
    token: ParamId,
    segment: Option<ParamId>,
    embed_ln: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    mlm_weight: Option<ParamId>,
    mlm_bias: ParamId,
}

/// A complete encoder: configuration plus every learnable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParameterSet,
    core: CoreIds,
    positions: PositionLayout,
    sinusoid: Option<Tensor>,
}

/// Parameters and constants of one [`Encoder`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub params: ParamVars,
    sinusoid: Option<Var>,
}

/// Result of running the encoder stack on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[len, d_model]` final hidden states.
    pub hidden: Var,
    /// Attention probabilities indexed `[layer][head]`, each `[len, len]`.
    pub attention: Vec<Vec<Var>>,
}

/// Closed-form count of every learnable scalar outside the position
/// parameters.
pub fn core_param_count(cfg: &EncoderConfig) -> u64 {
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    let v = cfg.vocab_size as u64;
    let per_layer = 4 * d * d + d + 2 * d + d * f + f + f * d + d + 2 * d;
    let segment = if cfg.segment_embedding { 2 * d } else { 0 };
    let head = if cfg.tie_mlm_head { v } else { d * v + v };
    v * d + segment + 2 * d + cfg.layers as u64 * per_layer + head
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
    let m = tape.constant(&mask);
    tape.mul(x, m)
}

impl Encoder {
    /// Builds an encoder with freshly initialized parameters: weights from
    /// `N(0, init_std)`, biases 0, layer-norm gains 1.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dist = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut params = ParameterSet::new();
        let normal = |rng: &mut Rng, shape: &[usize]| Tensor::from_fn(shape, |_| dist.sample(rng));

        let token = params.add("embed.token", normal(rng, &[config.vocab_size, d]))?;
        let positions = PositionLayout::build(&config.method, config.dims(), &mut params, Init::Random(rng))?;
        let segment = if config.segment_embedding {
            Some(params.add("embed.segment", normal(rng, &[2, d]))?)
        } else {
            None
        };
        let ln = |params: &mut ParameterSet, name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                params.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?,
                params.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
            ))
        };
        let embed_ln = ln(&mut params, "embed.ln")?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layer{l}");
            let w_q = params.add(format!("{p}.attn.w_q"), normal(rng, &[d, d]))?;
            let w_k = params.add(format!("{p}.attn.w_k"), normal(rng, &[d, d]))?;
            let w_v = params.add(format!("{p}.attn.w_v"), normal(rng, &[d, d]))?;
            let w_o = params.add(format!("{p}.attn.w_o"), normal(rng, &[d, d]))?;
            let b_o = params.add(format!("{p}.attn.b_o"), Tensor::zeros(&[d]))?;
            let ln1 = ln(&mut params, &format!("{p}.ln1"))?;
            let w_1 = params.add(format!("{p}.ffn.w_1"), normal(rng, &[d, config.d_ff]))?;
            let b_1 = params.add(format!("{p}.ffn.b_1"), Tensor::zeros(&[config.d_ff]))?;
            let w_2 = params.add(format!("{p}.ffn.w_2"), normal(rng, &[config.d_ff, d]))?;
            let b_2 = params.add(format!("{p}.ffn.b_2"), Tensor::zeros(&[d]))?;
            let ln2 = ln(&mut params, &format!("{p}.ln2"))?;
            layers.push(LayerIds {
                w_q,
                w_k,
                w_v,
                w_o,
                b_o,
                ln1,
                w_1,
                b_1,
                w_2,
                b_2,
                ln2,
            });
        }
        let mlm_weight = if config.tie_mlm_head {
            None
        } else {
            Some(params.add("mlm.weight", normal(rng, &[d, config.vocab_size]))?)
        };
        let mlm_bias = params.add("mlm.bias", Tensor::zeros(&[config.vocab_size]))?;
        let sinusoid = if config.method.kind == MethodKind::AbsoluteSinusoid {
            Some(sinusoid_table(config.max_len, d)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            core: CoreIds {
                token,
                segment,
                embed_ln,
                layers,
                mlm_weight,
                mlm_bias,
            },
            positions,
            sinusoid,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn positions(&self) -> &PositionLayout {
        &self.positions
    }

    /// Closed-form total: core count plus the method's position parameters.
    pub fn expected_param_count(&self) -> Result<u64> {
        Ok(core_param_count(&self.config) + param_count(&self.config.method, self.config.dims())?)
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        let params = self.params.register(tape);
        let sinusoid = self.sinusoid.as_ref().map(|t| tape.constant(t));
        ModelVars { params, sinusoid }
    }

    /// Runs embeddings and every block. Dropout is applied only when `rng`
    /// is given.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input: &SequenceInput,
        mut rng: Option<&mut Rng>,
    ) -> Result<Encoded> {
        let cfg = &self.config;
        input.validate(cfg.vocab_size, cfg.max_len)?;
        let v = |id: ParamId| vars.params.var(id);
        let len = input.len();
        let p_drop = cfg.dropout;

        let emb = EmbeddingVars {
            token: v(self.core.token),
            absolute: self.positions.absolute.map(v),
            segment: self.core.segment.map(v),
            sinusoid: vars.sinusoid,
        };
        let x = embed_input(tape, &emb, input, cfg.method.kind)?;
        let (g, b) = self.core.embed_ln;
        let x = tape.layer_norm(x, v(g), v(b), cfg.layer_norm_eps)?;
        let mut x = dropout(tape, x, p_drop, rng.as_deref_mut())?;

        let key_mask: Vec<bool> = (0..len * len).map(|t| input.mask[t % len]).collect();
        let mask = (!input.mask.iter().all(|&m| m)).then_some(key_mask.as_slice());
        let d_z = cfg.head_width();
        let mut attention = Vec::with_capacity(cfg.layers);

        for (l, ids) in self.core.layers.iter().enumerate() {
            let q_all = tape.matmul(x, v(ids.w_q))?;
            let k_all = tape.matmul(x, v(ids.w_k))?;
            let v_all = tape.matmul(x, v(ids.w_v))?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let q = tape.slice_cols(q_all, h * d_z, d_z)?;
                let k = tape.slice_cols(k_all, h * d_z, d_z)?;
                let val = tape.slice_cols(v_all, h * d_z, d_z)?;
                let pos = self.positions.head_vars(l, h, &vars.params);
                let e = attention_logits(tape, &cfg.method, q, k, &pos)?;
                if !tape.is_finite(e) {
                    return Err(Error::Divergence(Divergence::Layer(l)));
                }
                let a = tape.softmax_rows(e, mask)?;
                probs.push(a);
                heads.push(tape.matmul(a, val)?);
            }
            attention.push(probs);
            let z = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = tape.matmul(z, v(ids.w_o))?;
            let o = tape.add_row_bias(o, v(ids.b_o))?;
            let o = dropout(tape, o, p_drop, rng.as_deref_mut())?;
            let r = tape.add(x, o)?;
            let x1 = tape.layer_norm(r, v(ids.ln1.0), v(ids.ln1.1), cfg.layer_norm_eps)?;

            let f = tape.matmul(x1, v(ids.w_1))?;
            let f = tape.add_row_bias(f, v(ids.b_1))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, v(ids.w_2))?;
            let f = tape.add_row_bias(f, v(ids.b_2))?;
            let f = dropout(tape, f, p_drop, rng.as_deref_mut())?;
            let r = tape.add(x1, f)?;
            x = tape.layer_norm(r, v(ids.ln2.0), v(ids.ln2.1), cfg.layer_norm_eps)?;
            if !tape.is_finite(x) {
                return Err(Error::Divergence(Divergence::Layer(l)));
            }
        }
        Ok(Encoded { hidden: x, attention })
    }

    /// Masked-language-model logits `[len, vocab]` from hidden states.
    pub fn mlm_logits(&self, tape: &mut Tape, vars: &ModelVars, hidden: Var) -> Result<Var> {
        let logits = match self.core.mlm_weight {
            Some(w) => tape.matmul(hidden, vars.params.var(w))?,
            None => tape.matmul_nt(hidden, vars.params.var(self.core.token))?,
        };
        let logits = tape.add_row_bias(logits, vars.params.var(self.core.mlm_bias))?;
        if !tape.is_finite(logits) {
            return Err(Error::Divergence(Divergence::Logits));
        }
        Ok(logits)
    }

    /// Deterministic (dropout-free) MLM logits for one sequence.
    pub fn forward(&self, input: &SequenceInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let enc = self.encode(&mut tape, &vars, input, None)?;
        let logits = self.mlm_logits(&mut tape, &vars, enc.hidden)?;
        Ok(tape.tensor(logits))
    }

    /// Deterministic final hidden states for one sequence.
    pub fn hidden_states(&self, input: &SequenceInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let enc = self.encode(&mut tape, &vars, input, None)?;
        Ok(tape.tensor(enc.hidden))
    }

    /// Deterministic attention probabilities, `[layer][head]`.
    pub fn attention_maps(&self, input: &SequenceInput) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let enc = self.encode(&mut tape, &vars, input, None)?;
        Ok(enc
            .attention
            .iter()
            .map(|layer| layer.iter().map(|&a| tape.tensor(a)).collect())
            .collect())
    }

    /// Mean MLM cross-entropy over `targets = (position, original id)`,
    /// recorded on `tape`.
    pub fn mlm_loss(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input: &SequenceInput,
        targets: &[(usize, usize)],
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let enc = self.encode(tape, vars, input, rng)?;
        let logits = self.mlm_logits(tape, vars, enc.hidden)?;
        let loss = tape.cross_entropy(logits, targets)?;
        if !tape.is_finite(loss) {
            return Err(Error::Divergence(Divergence::Loss));
        }
        Ok(loss)
    }

    /// Rebuilds an encoder around existing parameter values. Names and
    /// shapes must match what `config` instantiates exactly.
    pub fn from_parts(config: EncoderConfig, arrays: Vec<(String, Tensor)>) -> Result<Self> {
        let mut rng = crate::rng::substream(0, "checkpoint-skeleton");
        let mut model = Self::new(config, &mut rng)?;
        let mut problems = Vec::new();
        let mut seen = vec![false; model.params.len()];
        for (name, tensor) in arrays {
            match model.params.id(&name) {
                None => problems.push(format!("unexpected array {name}")),
                Some(id) => {
                    let want = model.params.get(id).shape().to_vec();
                    if tensor.shape() != want.as_slice() {
                        problems.push(format!("{name}: shape {:?} != expected {want:?}", tensor.shape()));
                    } else {
                        *model.params.get_mut(id) = tensor;
                    }
                    seen[id.index()] = true;
                }
            }
        }
        for id in model.params.ids() {
            if !seen[id.index()] {
                problems.push(format!("missing array {}", model.params.name(id)));
            }
        }
        if problems.is_empty() {
            Ok(model)
        } else {
            Err(Error::Checkpoint(problems.join("\n")))
        }
    }
}
