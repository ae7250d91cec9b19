//! End-to-end gradient verification of a small encoder against central
//! differences, grouped by parameter class.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{compare_gradients, finite_diff_grad, GradComparison, Tape};
use crate::encoder::{Encoder, EncoderConfig, SequenceInput};
use crate::error::Result;
use crate::kernels::MethodSpec;
use crate::rng::substream;

pub const GRADCHECK_TOL: f64 = 1e-4;

/// Groups of parameters reported separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamClass {
    Token,
    Absolute,
    Segment,
    LayerNorm,
    Query,
    Key,
    Value,
    Output,
    FeedForward,
    RelativeTable,
    ScalarTable,
    DisentangledProjection,
    UntiedProjection,
    UntiedAbsolute,
    Reset,
    MlmHead,
}

impl ParamClass {
    pub fn of(name: &str) -> Self {
        let last = name.rsplit('.').next().unwrap_or(name);
        if name.starts_with("embed.token") {
            ParamClass::Token
        } else if name == "embed.position" {
            ParamClass::Absolute
        } else if name.starts_with("embed.segment") {
            ParamClass::Segment
        } else if name.contains(".ln") {
            ParamClass::LayerNorm
        } else if name.ends_with("attn.w_q") {
            ParamClass::Query
        } else if name.ends_with("attn.w_k") {
            ParamClass::Key
        } else if name.ends_with("attn.w_v") {
            ParamClass::Value
        } else if name.contains(".attn.") {
            ParamClass::Output
        } else if name.contains(".ffn.") {
            ParamClass::FeedForward
        } else if name.contains(".pos.rel") {
            ParamClass::RelativeTable
        } else if name.contains(".pos.scalar") {
            ParamClass::ScalarTable
        } else if matches!(last, "w_rt" | "w_r" | "w_t") {
            ParamClass::DisentangledProjection
        } else if matches!(last, "u_qk" | "u_q" | "u_k") {
            ParamClass::UntiedProjection
        } else if name.ends_with(".pos.p") {
            ParamClass::UntiedAbsolute
        } else if name.contains(".reset.") {
            ParamClass::Reset
        } else {
            ParamClass::MlmHead
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamClass::Token => "token embedding",
            ParamClass::Absolute => "absolute embedding",
            ParamClass::Segment => "segment embedding",
            ParamClass::LayerNorm => "layer norm",
            ParamClass::Query => "W^Q",
            ParamClass::Key => "W^K",
            ParamClass::Value => "W^V",
            ParamClass::Output => "W^O",
            ParamClass::FeedForward => "feed-forward",
            ParamClass::RelativeTable => "relative table",
            ParamClass::ScalarTable => "scalar table",
            ParamClass::DisentangledProjection => "W^R/W^T",
            ParamClass::UntiedProjection => "U^Q/U^K",
            ParamClass::UntiedAbsolute => "p",
            ParamClass::Reset => "theta1/theta2",
            ParamClass::MlmHead => "mlm head",
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassResult {
    pub class: ParamClass,
    pub comparison: GradComparison,
    /// Largest analytic gradient magnitude in the class.
    pub max_gradient: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub method: MethodSpec,
    pub loss: f64,
    pub classes: Vec<ClassResult>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.classes.iter().all(|c| c.comparison.passes(tol))
    }

    pub fn worst(&self) -> f64 {
        self.classes.iter().map(|c| c.comparison.max_relative).fold(0.0, f64::max)
    }

    pub fn render(&self, tol: f64) -> String {
        let mut out = format!("method {} (loss {:.6})\n", self.method, self.loss);
        out.push_str(&format!(
            "  {:<20} {:>8} {:>12} {:>12} {:>12}  status\n",
            "class", "elements", "max rel err", "max abs err", "max |grad|"
        ));
        for c in &self.classes {
            out.push_str(&format!(
                "  {:<20} {:>8} {:>12.3e} {:>12.3e} {:>12.3e}  {}\n",
                c.class.label(),
                c.comparison.elements,
                c.comparison.max_relative,
                c.comparison.max_absolute,
                c.max_gradient,
                if c.comparison.passes(tol) { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

/// The gradient-check model: 2 layers, 2 heads, width 16, length 8,
/// vocabulary 32, no dropout. Vector tables use clip 3 so that clipping is
/// exercised within the 8 positions.
pub fn gradcheck_config(spec: MethodSpec) -> EncoderConfig {
    let method = if spec.kind.uses_vector_table() && spec.clip_k > 3 { spec.with_clip(3) } else { spec };
    EncoderConfig {
        layers: 2,
        heads: 2,
        d_model: 16,
        d_ff: 32,
        max_len: 8,
        vocab_size: 32,
        method,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

/// Builds the check model with every parameter redrawn at a scale where
/// all gradient paths carry signal, plus a fixed input and MLM targets.
pub fn gradcheck_fixture(spec: MethodSpec, seed: u64) -> Result<(Encoder, SequenceInput, Vec<(usize, usize)>)> {
    let cfg = gradcheck_config(spec);
    let mut rng = substream(seed, "gradcheck/init");
    let mut model = Encoder::new(cfg.clone(), &mut rng)?;
    let wide = Normal::new(0.0, 0.3).expect("valid std");
    let narrow = Normal::new(0.0, 0.1).expect("valid std");
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let gain = model.params().name(id).ends_with(".gain");
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = if gain { 1.0 + narrow.sample(&mut rng) } else { wide.sample(&mut rng) };
        }
    }
    let mut data = substream(seed, "gradcheck/data");
    let tokens: Vec<usize> = (0..cfg.max_len).map(|_| data.random_range(0..cfg.vocab_size)).collect();
    let input = SequenceInput::new(tokens).with_sentence_positions(vec![1, 2, 3, 1, 2, 3, 4, 5]);
    let targets = vec![
        (1, data.random_range(0..cfg.vocab_size)),
        (4, data.random_range(0..cfg.vocab_size)),
        (6, data.random_range(0..cfg.vocab_size)),
    ];
    Ok((model, input, targets))
}

fn loss_of(model: &Encoder, input: &SequenceInput, targets: &[(usize, usize)]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let loss = model.mlm_loss(&mut tape, &vars, input, targets, None)?;
    Ok(tape.value(loss)[0])
}

/// Compares backward-pass gradients of the MLM loss with central
/// differences for every parameter of the check model.
pub fn gradcheck_method(spec: MethodSpec, seed: u64, step: f64) -> Result<GradcheckReport> {
    let (mut model, input, targets) = gradcheck_fixture(spec, seed)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let loss = model.mlm_loss(&mut tape, &vars, &input, &targets, None)?;
    let loss_value = tape.value(loss)[0];
    tape.backward(loss)?;
    let grads = vars.params.gradients(&tape);

    let mut by_class: BTreeMap<ParamClass, (GradComparison, f64)> = BTreeMap::new();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let class = ParamClass::of(model.params().name(id));
        let original = model.params().get(id).clone();
        let numeric = finite_diff_grad(
            |probe| {
                model.params_mut().get_mut(id).data_mut().copy_from_slice(probe.data());
                loss_of(&model, &input, &targets).unwrap_or(f64::NAN)
            },
            &original,
            step,
        );
        *model.params_mut().get_mut(id) = original;
        let numeric = numeric?;
        let analytic = grads.get(id);
        let cmp = compare_gradients(analytic, numeric.data());
        let peak = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        by_class
            .entry(class)
            .and_modify(|(c, p)| {
                *c = c.merge(cmp);
                *p = p.max(peak);
            })
            .or_insert((cmp, peak));
    }
    Ok(GradcheckReport {
        method: model.config().method,
        loss: loss_value,
        classes: by_class
            .into_iter()
            .map(|(class, (comparison, max_gradient))| ClassResult {
                class,
                comparison,
                max_gradient,
            })
            .collect(),
    })
}
