//! Flat `key = value` run configuration files.
//!
//! Blank lines and `#` comments are skipped. Keys are validated against a
//! fixed schema; unknown or repeated keys and malformed values are errors that
//! name the line. Command-line overrides go through [`RunConfig::set`] with
//! the same schema.

use crate::backbone::{DecoderMode, NetConfig};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const KEYS: [&str; 20] = [
    "variant",
    "c",
    "r",
    "M",
    "K",
    "d",
    "w1",
    "w2",
    "w3",
    "lr",
    "weight_decay",
    "epochs",
    "warmup_epochs",
    "batch",
    "crop",
    "seed",
    "decoder",
    "boundary_on_main",
    "aux_losses",
    "augment",
];

/// Parsed run configuration. Network fields left unset fall back to the
/// variant preset.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: String,
    pub width: Option<usize>,
    pub repeats: Option<usize>,
    pub branches: Option<usize>,
    pub classes: Option<usize>,
    pub decoder: Option<DecoderMode>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: "small".into(),
            width: None,
            repeats: None,
            branches: None,
            classes: None,
            decoder: None,
            train: TrainConfig::new(NetConfig::small(2)),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value '{value}' for key '{key}'"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid value '{value}' for key '{key}' (expected true or false)")),
    }
}

impl RunConfig {
    /// Applies one key; the error message names the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply(key, value.trim()).map_err(Error::Config)
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        match key {
            "variant" => {
                NetConfig::from_variant(v, 2).map_err(|e| format!("key 'variant': {e}"))?;
                self.variant = v.to_string();
            }
            "c" => self.width = Some(parse(key, v)?),
            "r" => self.repeats = Some(parse(key, v)?),
            "M" => self.branches = Some(parse(key, v)?),
            "K" => self.classes = Some(parse(key, v)?),
            "d" => t.d = parse(key, v)?,
            "w1" => t.weights.main = parse(key, v)?,
            "w2" => t.weights.aux = parse(key, v)?,
            "w3" => t.weights.boundary = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "crop" => {
                t.crop = match v {
                    "none" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "seed" => t.seed = parse(key, v)?,
            "decoder" => {
                self.decoder = Some(match v {
                    "cam" => DecoderMode::Cam,
                    "concat" => DecoderMode::Concat,
                    _ => return Err(format!("invalid value '{v}' for key 'decoder' (expected cam or concat)")),
                })
            }
            "boundary_on_main" => t.boundary_on_main = parse_bool(key, v)?,
            "aux_losses" => t.aux_losses = parse_bool(key, v)?,
            "augment" => t.augment = parse_bool(key, v)?,
            _ => return Err(format!("unknown key '{key}' (known keys: {})", KEYS.join(", "))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(at(format!("key '{key}' is set twice")));
            }
            seen.push(key);
            cfg.apply(key, value.trim()).map_err(at)?;
        }
        Ok(cfg)
    }

    /// Network configuration: the variant preset with explicit overrides.
    pub fn net(&self) -> Result<NetConfig> {
        let classes = self.classes.unwrap_or(self.train.net.classes);
        let mut net = NetConfig::from_variant(&self.variant, classes)?;
        if let Some(c) = self.width {
            net.width = c;
        }
        if let Some(r) = self.repeats {
            net.repeats = r;
        }
        if let Some(m) = self.branches {
            net.branches = m;
        }
        if let Some(d) = self.decoder {
            net.decoder = d;
        }
        net.validate()?;
        Ok(net)
    }

    /// Training configuration with the resolved network; validated.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            net: self.net()?,
            ..self.train.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
