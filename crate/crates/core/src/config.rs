//! Model configuration and its flat `key=value` file form.

use std::fmt;
use std::str::FromStr;

use crate::behavior::NormPlacement;
use crate::error::{MianError, Result};

/// A named model configuration used by the ablation runner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoIbim,
    NoIuim,
    NoIcim,
    NoGim,
    NoIuimIcim,
    PostLn,
    NoTransformer,
    LrBaseline,
    MlpBaseline,
}

/// What a variant actually builds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Mian {
        ibim: bool,
        /// `None` pools directly over the behavior embeddings.
        encoder: Option<NormPlacement>,
        iuim: bool,
        icim: bool,
        gim: bool,
    },
    /// Logistic regression over one scalar weight per feature value.
    Logistic,
    /// Group-mean embeddings concatenated into the prediction MLP.
    Mlp,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::NoIbim,
        Variant::NoIuim,
        Variant::NoIcim,
        Variant::NoGim,
        Variant::NoIuimIcim,
        Variant::PostLn,
        Variant::NoTransformer,
        Variant::LrBaseline,
        Variant::MlpBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIbim => "no_ibim",
            Variant::NoIuim => "no_iuim",
            Variant::NoIcim => "no_icim",
            Variant::NoGim => "no_gim",
            Variant::NoIuimIcim => "no_iuim_icim",
            Variant::PostLn => "post_ln",
            Variant::NoTransformer => "no_transformer",
            Variant::LrBaseline => "lr_baseline",
            Variant::MlpBaseline => "mlp_baseline",
        }
    }

    pub fn architecture(self) -> Architecture {
        let mian = |ibim, encoder, iuim, icim, gim| Architecture::Mian {
            ibim,
            encoder,
            iuim,
            icim,
            gim,
        };
        let pre = Some(NormPlacement::Pre);
        match self {
            Variant::Full => mian(true, pre, true, true, true),
            Variant::NoIbim => mian(false, None, true, true, true),
            Variant::NoIuim => mian(true, pre, false, true, true),
            Variant::NoIcim => mian(true, pre, true, false, true),
            Variant::NoGim => mian(true, pre, true, true, false),
            Variant::NoIuimIcim => mian(true, pre, false, false, true),
            Variant::PostLn => mian(true, Some(NormPlacement::Post), true, true, true),
            Variant::NoTransformer => mian(true, None, true, true, true),
            Variant::LrBaseline => Architecture::Logistic,
            Variant::MlpBaseline => Architecture::Mlp,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = MianError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MianError::Config(format!("unknown variant `{s}`")))
    }
}

/// Hyperparameters. The embedding width, FFN width, epochs and epsilons are
/// sized for single-core runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub d: usize,
    /// Behavior window `T`.
    pub seq_len: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub mlp_dims: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub dropout: f64,
    pub l2_coeff: f64,
    pub init_stddev: f64,
    pub ln_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub share_item_table: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            seq_len: 30,
            heads: 8,
            d_ff: 64,
            mlp_dims: vec![32, 8],
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            dropout: 0.2,
            l2_coeff: 1e-3,
            init_stddev: 0.02,
            ln_eps: 1e-6,
            epochs: 4,
            seed: 0,
            share_item_table: true,
            variant: Variant::Full,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| MianError::Config(format!("bad value `{value}` for `{key}`")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(MianError::Config(m.to_string()));
        if self.d == 0 || self.seq_len == 0 || self.batch_size == 0 || self.d_ff == 0 {
            return fail("d, seq_len, d_ff and batch_size must be positive");
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail("d must be divisible by heads");
        }
        if self.mlp_dims.contains(&0) {
            return fail("mlp_dims entries must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        let reals = [
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.l2_coeff,
            self.init_stddev,
            self.ln_eps,
        ];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return fail("real-valued settings must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if self.ln_eps <= 0.0 || self.adam_eps <= 0.0 {
            return fail("ln_eps and adam_eps must be positive");
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "d" => self.d = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "d_ff" => self.d_ff = parse(key, value)?,
            "mlp_dims" => {
                self.mlp_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "l2_coeff" => self.l2_coeff = parse(key, value)?,
            "init_stddev" => self.init_stddev = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "share_item_table" => self.share_item_table = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            other => return Err(MianError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat config file: one `key=value` per line, `#` comments and
    /// blank lines ignored, unspecified keys keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| MianError::Parse {
                line: no + 1,
                msg: format!("expected key=value, found `{line}`"),
            })?;
            cfg.set(k, v).map_err(|e| MianError::Parse {
                line: no + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in canonical order. Floats use the shortest round-trip form.
    pub fn to_kv_text(&self) -> String {
        let dims: Vec<String> = self.mlp_dims.iter().map(usize::to_string).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("d", self.d.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("mlp_dims", dims.join(",")),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("dropout", self.dropout.to_string()),
            ("l2_coeff", self.l2_coeff.to_string()),
            ("init_stddev", self.init_stddev.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("share_item_table", self.share_item_table.to_string()),
            ("variant", self.variant.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
