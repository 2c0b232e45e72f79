use std::fmt;
use std::str::FromStr;

use crate::attention::{default_heads, DEFAULT_PROJECTED_LEN};
use crate::error::{Error, Result};
use crate::kv::{parse_bool, parse_value};

/// How the input window is cut into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tokenization {
    /// One token per time step, embedded along the variable axis.
    Mixing,
    /// One token per variable, embedded along the time axis.
    Independent,
}

/// Which channels run and on which tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    NoVEncoder,
    NoTEncoder,
    Swapped,
    BothIndependent,
    BothMixing,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoVEncoder,
        Variant::NoTEncoder,
        Variant::Swapped,
        Variant::BothIndependent,
        Variant::BothMixing,
    ];

    /// Tokens fed to the attention channel and to the Bi-Mamba channel.
    pub fn channels(self) -> [Option<Tokenization>; 2] {
        use Tokenization::*;
        match self {
            Variant::Full => [Some(Mixing), Some(Independent)],
            Variant::NoVEncoder => [Some(Mixing), None],
            Variant::NoTEncoder => [None, Some(Independent)],
            Variant::Swapped => [Some(Independent), Some(Mixing)],
            Variant::BothIndependent => [Some(Independent), Some(Independent)],
            Variant::BothMixing => [Some(Mixing), Some(Mixing)],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVEncoder => "no_v_encoder",
            Variant::NoTEncoder => "no_t_encoder",
            Variant::Swapped => "swapped",
            Variant::BothIndependent => "both_independent",
            Variant::BothMixing => "both_mixing",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

/// Where input normalization happens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Inputs are already z-scored with training-split statistics.
    #[default]
    Dataset,
    /// Each window is additionally centered and scaled by its own lookback
    /// statistics, undone on the forecast.
    Instance,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormMode::Dataset => "dataset",
            NormMode::Instance => "instance",
        })
    }
}

impl FromStr for NormMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dataset" => Ok(NormMode::Dataset),
            "instance" => Ok(NormMode::Instance),
            _ => Err(Error::Config(format!("unknown norm mode {s:?}, expected dataset or instance"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub d_model: usize,
    pub e_layers: usize,
    pub d_state: usize,
    /// Linformer projected length; clipped to the token count per channel.
    pub proj_len: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub expand: usize,
    pub d_conv: usize,
    pub norm: NormMode,
    pub variant: Variant,
    pub share_heads: bool,
    pub tie_directions: bool,
}

impl ModelConfig {
    pub fn new(lookback: usize, horizon: usize, n_vars: usize) -> Self {
        let d_model = 512;
        ModelConfig {
            lookback,
            horizon,
            n_vars,
            d_model,
            e_layers: 2,
            d_state: 16,
            proj_len: DEFAULT_PROJECTED_LEN,
            heads: default_heads(d_model),
            d_ff: 4 * d_model,
            dropout: 0.1,
            expand: 2,
            d_conv: 4,
            norm: NormMode::Dataset,
            variant: Variant::Full,
            share_heads: false,
            tie_directions: false,
        }
    }

    /// Sets `d_model` together with the quantities derived from it.
    pub fn with_width(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.heads = default_heads(d_model);
        self.d_ff = 4 * d_model;
        self
    }

    /// Upper bound on every size field, which keeps derived counts finite.
    pub const MAX_DIM: usize = 1 << 24;

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("n_vars", self.n_vars),
            ("d_model", self.d_model),
            ("e_layers", self.e_layers),
            ("d_state", self.d_state),
            ("proj_len", self.proj_len),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("expand", self.expand),
            ("d_conv", self.d_conv),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
            if v > Self::MAX_DIM {
                return Err(Error::Config(format!("{k}={v} exceeds {}", Self::MAX_DIM)));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Number of scalar parameters the model built from this config holds.
    /// Computed in 128-bit so absurd configs cannot overflow.
    pub fn param_count(&self) -> u128 {
        let c = |v: usize| v as u128;
        let (d, l, v, ff) = (c(self.d_model), c(self.lookback), c(self.n_vars), c(self.d_ff));
        let ed = c(self.expand) * d;
        let rank = c(self.d_model.div_ceil(16));
        let mut total = 0u128;
        for (slot, tok) in self.variant.channels().into_iter().enumerate() {
            let Some(tok) = tok else { continue };
            let (width, tokens) = match tok {
                Tokenization::Mixing => (v, l),
                Tokenization::Independent => (l, v),
            };
            total += width * d + d + d * d + d;
            let mixer = if slot == 0 {
                let proj_heads = if self.share_heads { 1 } else { c(self.heads) };
                4 * (d * d + d) + 2 * proj_heads * tokens.min(c(self.proj_len)) * tokens
            } else {
                let block = d * 2 * ed
                    + ed * c(self.d_conv)
                    + ed
                    + 3 * ed * c(self.d_state)
                    + 2 * ed * rank
                    + ed
                    + ed * d;
                block * if self.tie_directions { 1 } else { 2 }
            };
            let layer = mixer + 4 * d + (d * ff + ff + ff * d + d);
            total += c(self.e_layers) * layer;
            if tok == Tokenization::Mixing {
                total += l * v + v;
            }
        }
        total + 2 * d * d + d + d * d + d + 2 * d + d * c(self.horizon) + c(self.horizon)
    }

    pub const KEYS: [&'static str; 16] = [
        "lookback",
        "horizon",
        "n_vars",
        "d_model",
        "e_layers",
        "d_state",
        "proj_len",
        "heads",
        "d_ff",
        "dropout",
        "expand",
        "d_conv",
        "norm",
        "variant",
        "share_heads",
        "tie_directions",
    ];

    /// Applies one `key=value`; `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lookback" => self.lookback = parse_value(key, value)?,
            "horizon" => self.horizon = parse_value(key, value)?,
            "n_vars" => self.n_vars = parse_value(key, value)?,
            "d_model" => self.d_model = parse_value(key, value)?,
            "e_layers" => self.e_layers = parse_value(key, value)?,
            "d_state" => self.d_state = parse_value(key, value)?,
            "proj_len" => self.proj_len = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "expand" => self.expand = parse_value(key, value)?,
            "d_conv" => self.d_conv = parse_value(key, value)?,
            "norm" => self.norm = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "share_heads" => self.share_heads = parse_bool(key, value)?,
            "tie_directions" => self.tie_directions = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lookback", self.lookback.to_string()),
            ("horizon", self.horizon.to_string()),
            ("n_vars", self.n_vars.to_string()),
            ("d_model", self.d_model.to_string()),
            ("e_layers", self.e_layers.to_string()),
            ("d_state", self.d_state.to_string()),
            ("proj_len", self.proj_len.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("dropout", self.dropout.to_string()),
            ("expand", self.expand.to_string()),
            ("d_conv", self.d_conv.to_string()),
            ("norm", self.norm.to_string()),
            ("variant", self.variant.to_string()),
            ("share_heads", self.share_heads.to_string()),
            ("tie_directions", self.tie_directions.to_string()),
        ]
    }

    /// Reads a config where every model key is present and no other key is.
    pub fn from_kv<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::new(1, 1, 1);
        let mut seen = Vec::new();
        for (k, v) in entries {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
            seen.push(k.to_string());
        }
        if let Some(missing) = Self::KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(Error::Config(format!("missing model key {missing:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
