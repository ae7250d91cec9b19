use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{MethodKind, MethodSpec, ModelDims};

/// Shape and method of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub method: MethodSpec,
    pub dropout: f64,
    pub tie_mlm_head: bool,
    pub segment_embedding: bool,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 128,
            vocab_size: 1024,
            method: MethodSpec::new(MethodKind::AbsoluteLearned),
            dropout: 0.1,
            tie_mlm_head: true,
            segment_embedding: false,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn head_width(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.layers, self.max_len, self.d_model, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        self.method.validate()?;
        if self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Config("d_ff and vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.method.reset_cls && self.max_len < 2 {
            return Err(Error::Config("reset needs max_len >= 2".into()));
        }
        if self.method.kind == MethodKind::AbsoluteSinusoid && self.d_model % 2 != 0 {
            return Err(Error::Config(format!("sinusoid embedding needs an even width, got {}", self.d_model)));
        }
        if !(self.layer_norm_eps > 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("layer_norm_eps and init_std must be positive".into()));
        }
        Ok(())
    }

    /// `key = value` pairs in a fixed order; inverse of [`EncoderConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_len", self.max_len.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("method", self.method.label()),
            ("dropout", format!("{:?}", self.dropout)),
            ("tie_mlm_head", self.tie_mlm_head.to_string()),
            ("segment_embedding", self.segment_embedding.to_string()),
            ("layer_norm_eps", format!("{:?}", self.layer_norm_eps)),
            ("init_std", format!("{:?}", self.init_std)),
        ]
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "d_model" => self.d_model = num(key, value)?,
            "d_ff" => self.d_ff = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "method" => self.method = value.trim().parse()?,
            "dropout" => self.dropout = num(key, value)?,
            "tie_mlm_head" => self.tie_mlm_head = num(key, value)?,
            "segment_embedding" => self.segment_embedding = num(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            other => return Err(Error::Config(format!("unknown encoder key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys whose values differ, as `key: left != right` lines.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        self.to_pairs()
            .into_iter()
            .zip(other.to_pairs())
            .filter(|((_, a), (_, b))| a != b)
            .map(|((k, a), (_, b))| format!("{k}: {a} != {b}"))
            .collect()
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
