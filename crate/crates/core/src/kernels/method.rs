use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which attention-logit equation (and input-side position source) a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodKind {
    None,
    AbsoluteLearned,
    AbsoluteSinusoid,
    AbsoluteRealSentence,
    Shaw,
    Raffel,
    M2,
    M4,
    M4M,
    Deberta,
    Tupe,
}

impl MethodKind {
    pub const ALL: [MethodKind; 11] = [
        MethodKind::None,
        MethodKind::AbsoluteLearned,
        MethodKind::AbsoluteSinusoid,
        MethodKind::AbsoluteRealSentence,
        MethodKind::Shaw,
        MethodKind::Raffel,
        MethodKind::M2,
        MethodKind::M4,
        MethodKind::M4M,
        MethodKind::Deberta,
        MethodKind::Tupe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::None => "none",
            MethodKind::AbsoluteLearned => "absolute_learned",
            MethodKind::AbsoluteSinusoid => "absolute_sinusoid",
            MethodKind::AbsoluteRealSentence => "absolute_real_sentence",
            MethodKind::Shaw => "shaw",
            MethodKind::Raffel => "raffel",
            MethodKind::M2 => "m2",
            MethodKind::M4 => "m4",
            MethodKind::M4M => "m4m",
            MethodKind::Deberta => "deberta",
            MethodKind::Tupe => "tupe",
        }
    }

    /// Kinds whose attention reads a clipped vector table `w_{-k..k}`.
    pub fn uses_vector_table(self) -> bool {
        matches!(
            self,
            MethodKind::Shaw | MethodKind::M4 | MethodKind::M4M | MethodKind::Deberta
        )
    }

    /// Kinds whose attention reads an unclipped scalar table `w_{1-n..n-1}`.
    pub fn uses_scalar_table(self) -> bool {
        matches!(self, MethodKind::Raffel | MethodKind::M2 | MethodKind::Tupe)
    }

    /// Any kind that injects position information inside attention.
    pub fn is_relative(self) -> bool {
        self.uses_vector_table() || self.uses_scalar_table()
    }

    /// Kinds that add a position vector to the input embedding on their own.
    pub fn is_absolute(self) -> bool {
        matches!(
            self,
            MethodKind::AbsoluteLearned
                | MethodKind::AbsoluteSinusoid
                | MethodKind::AbsoluteRealSentence
        )
    }

    /// Relative kinds with no absolute component anywhere (TUPE carries `p_i`).
    pub fn is_translation_invariant(self) -> bool {
        self.is_relative() && self != MethodKind::Tupe
    }

    /// Kinds whose logits multiply position terms instead of adding them.
    pub fn is_multiplicative(self) -> bool {
        matches!(self, MethodKind::M2 | MethodKind::M4M)
    }

    pub fn default_scaling_factor(self) -> u32 {
        match self {
            MethodKind::Deberta => 3,
            MethodKind::Tupe => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim().to_ascii_lowercase().as_str() {
            "none" => MethodKind::None,
            "absolute_learned" | "absolute" | "abs" => MethodKind::AbsoluteLearned,
            "absolute_sinusoid" | "sinusoid" => MethodKind::AbsoluteSinusoid,
            "absolute_real_sentence" | "real_sentence" => MethodKind::AbsoluteRealSentence,
            "shaw" => MethodKind::Shaw,
            "raffel" => MethodKind::Raffel,
            "m2" => MethodKind::M2,
            "m4" => MethodKind::M4,
            "m4m" => MethodKind::M4M,
            "deberta" => MethodKind::Deberta,
            "tupe" => MethodKind::Tupe,
            other => {
                let valid: Vec<_> = MethodKind::ALL.iter().map(|k| k.name()).collect();
                return Err(Error::Config(format!(
                    "unknown method kind `{other}`; valid kinds: {}",
                    valid.join(", ")
                )));
            }
        };
        Ok(kind)
    }
}

pub const DEFAULT_CLIP_K: usize = 64;

/// Full description of one position-embedding configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MethodSpec {
    pub kind: MethodKind,
    /// Maximum relative distance for the vector-table kinds.
    pub clip_k: usize,
    /// `f` in the logit denominator `sqrt(f · d_z)`.
    pub scaling_factor: u32,
    pub share_across_heads: bool,
    /// Give the first (classification) position its own learned logits.
    pub reset_cls: bool,
    /// Also add a learned absolute table to the input embedding.
    pub combine_absolute: bool,
    /// Separate matrices for the two position-side projections
    /// (DeBERTa's `W^R`/`W^T`, TUPE's `U^Q`/`U^K`) instead of one shared one.
    pub untied_projections: bool,
}

impl MethodSpec {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            clip_k: DEFAULT_CLIP_K,
            scaling_factor: kind.default_scaling_factor(),
            share_across_heads: true,
            reset_cls: false,
            combine_absolute: false,
            untied_projections: false,
        }
    }

    pub fn with_clip(mut self, k: usize) -> Self {
        self.clip_k = k;
        self
    }

    pub fn with_scaling(mut self, f: u32) -> Self {
        self.scaling_factor = f;
        self
    }

    pub fn with_sharing(mut self, shared: bool) -> Self {
        self.share_across_heads = shared;
        self
    }

    pub fn with_reset(mut self, on: bool) -> Self {
        self.reset_cls = on;
        self
    }

    pub fn with_absolute(mut self, on: bool) -> Self {
        self.combine_absolute = on;
        self
    }

    pub fn with_untied(mut self, on: bool) -> Self {
        self.untied_projections = on;
        self
    }

    /// True when a learned absolute table feeds the input embedding.
    pub fn has_learned_absolute(&self) -> bool {
        matches!(
            self.kind,
            MethodKind::AbsoluteLearned | MethodKind::AbsoluteRealSentence
        ) || self.combine_absolute
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.uses_vector_table() && self.clip_k == 0 {
            return Err(Error::Config(format!(
                "method.clip_k must be >= 1 for {}",
                self.kind
            )));
        }
        if self.scaling_factor == 0 {
            return Err(Error::Config("method.scaling_factor must be >= 1".into()));
        }
        if self.reset_cls && !self.kind.is_relative() {
            return Err(Error::Config(format!(
                "method.reset_cls needs a relative kind, not {}",
                self.kind
            )));
        }
        if self.combine_absolute && !self.kind.is_relative() {
            return Err(Error::Config(format!(
                "method.combine_absolute needs a relative kind, not {}",
                self.kind
            )));
        }
        if self.untied_projections
            && !matches!(self.kind, MethodKind::Deberta | MethodKind::Tupe)
        {
            return Err(Error::Config(format!(
                "method.untied_projections only applies to deberta and tupe, not {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Compact label: `[abs+]kind[+reset][:f=N][:k=N][:unshared][:untied]`.
    /// Only options that differ from the kind's defaults are written.
    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.combine_absolute {
            s.push_str("abs+");
        }
        s.push_str(self.kind.name());
        if self.reset_cls {
            s.push_str("+reset");
        }
        if self.scaling_factor != self.kind.default_scaling_factor() {
            s.push_str(&format!(":f={}", self.scaling_factor));
        }
        if self.clip_k != DEFAULT_CLIP_K {
            s.push_str(&format!(":k={}", self.clip_k));
        }
        if !self.share_across_heads && self.kind.is_relative() {
            s.push_str(":unshared");
        }
        if self.untied_projections {
            s.push_str(":untied");
        }
        s
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    /// Parses the [`MethodSpec::label`] grammar, e.g. `m4+reset`,
    /// `abs+m4m`, `m4:f=3`, `shaw:k=16:unshared`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let head = parts.next().unwrap_or_default();
        let mut kind = None;
        let mut reset = false;
        let mut absolute = false;
        let pieces: Vec<&str> = head.split('+').map(str::trim).collect();
        for piece in &pieces {
            match piece.to_ascii_lowercase().as_str() {
                "reset" => reset = true,
                "abs" | "absolute" if pieces.len() > 1 => absolute = true,
                other => {
                    if kind.is_some() {
                        return Err(Error::Config(format!("method `{s}` names two kinds")));
                    }
                    kind = Some(other.parse::<MethodKind>()?);
                }
            }
        }
        let kind = kind.ok_or_else(|| Error::Config(format!("method `{s}` names no kind")))?;
        let mut spec = MethodSpec::new(kind).with_reset(reset).with_absolute(absolute);
        for opt in parts {
            let opt = opt.trim();
            let parse_num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad number `{v}` in method `{s}`")))
            };
            match opt.split_once('=') {
                Some(("f", v)) => spec.scaling_factor = parse_num(v)? as u32,
                Some(("k", v)) => spec.clip_k = parse_num(v)?,
                None if opt == "unshared" => spec.share_across_heads = false,
                None if opt == "shared" => spec.share_across_heads = true,
                None if opt == "untied" => spec.untied_projections = true,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown option `{opt}` in method `{s}`"
                    )))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}
