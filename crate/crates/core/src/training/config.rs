use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::adversarial::FgmSign;
use crate::error::{Error, Result};
use crate::model::{AnchorSide, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    /// Adversarial loss only; the contrastive weight is forced to zero.
    AdvOnly,
    #[default]
    Atcl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    Lm,
    Nmt,
}

/// Every knob of a training run. Serialized as the metrics-log header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub task: Task,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub n_negatives: usize,
    pub include_positive: bool,
    pub fgm_sign: FgmSign,
    pub anchor_side: AnchorSide,

    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Linear ramp of the learning rate over this many steps; 0 disables.
    pub warmup_steps: u64,
    pub max_steps: u64,
    /// Evaluate and checkpoint every this many steps; 0 means only at the end.
    pub eval_interval: u64,
    pub seed: u64,

    pub d_model: usize,
    pub n_heads: usize,
    /// 0 selects `4 * d_model`.
    pub ff_dim: usize,
    pub layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,

    pub train_corpus: Option<PathBuf>,
    pub valid_corpus: Option<PathBuf>,
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub valid_source: Option<PathBuf>,
    pub valid_target: Option<PathBuf>,
    pub bpe_merges: usize,
    pub min_frequency: u64,
    pub output_dir: Option<PathBuf>,
    /// Record wall-clock milliseconds per step. Off by default so that
    /// metrics logs of identical runs are byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Atcl,
            task: Task::Lm,
            epsilon: 0.03,
            alpha: 0.1,
            beta: 0.1,
            tau: 0.07,
            n_negatives: 10,
            include_positive: false,
            fgm_sign: FgmSign::PaperMinus,
            anchor_side: AnchorSide::Encoder,
            batch_size: 45,
            seq_len: 32,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 0,
            max_steps: 1000,
            eval_interval: 100,
            seed: 1,
            d_model: 32,
            n_heads: 4,
            ff_dim: 0,
            layers: 2,
            encoder_layers: 3,
            decoder_layers: 3,
            train_corpus: None,
            valid_corpus: None,
            train_source: None,
            train_target: None,
            valid_source: None,
            valid_target: None,
            bpe_merges: 0,
            min_frequency: 1,
            output_dir: None,
            log_wall_time: false,
        }
    }
}

fn parse_value(key: &str, raw: &str, template: &Value) -> Result<Value> {
    let bad = |what: &str| Error::config(format!("{key}: expected {what}, got {raw:?}"));
    Ok(match template {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))?
        }
        Value::Number(_) => Value::Number(raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.into()),
        _ => Value::String(raw.to_string()),
    })
}

impl TrainConfig {
    /// Applies `key = value` assignments in order. Unknown keys and values
    /// of the wrong type are configuration errors.
    pub fn apply<'a>(&mut self, assignments: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        let defaults = match serde_json::to_value(TrainConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        for (key, raw) in assignments {
            let template = defaults
                .get(key)
                .ok_or_else(|| Error::config(format!("unknown key {key:?}")))?;
            map.insert(key.to_string(), parse_value(key, raw, template)?);
        }
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::config(e.to_string()))?;
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim(), v.trim()));
        }
        let mut config = TrainConfig::default();
        config.apply(pairs)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `--set`-style `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let pairs: Vec<(&str, &str)> = overrides
            .iter()
            .map(|o| {
                o.as_ref()
                    .split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| Error::config(format!("override {:?} is not key=value", o.as_ref())))
            })
            .collect::<Result<_>>()?;
        self.apply(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg.to_string())) };
        check((0.0..=1.0).contains(&self.alpha), "alpha must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.beta), "beta must lie in [0, 1]")?;
        check(self.epsilon > 0.0 && self.epsilon.is_finite(), "epsilon must be positive")?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau must be positive")?;
        check(self.n_negatives >= 1, "n_negatives must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.seq_len >= 2, "seq_len must be at least 2")?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive")?;
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1 must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2 must lie in [0, 1)")?;
        check(self.adam_eps > 0.0, "adam_eps must be positive")?;
        check(self.max_steps >= 1, "max_steps must be at least 1")?;
        Ok(())
    }

    /// Contrastive weight after the mode is taken into account.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            Mode::Atcl => self.beta,
            Mode::AdvOnly | Mode::Baseline => 0.0,
        }
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            Mode::Baseline => 0.0,
            _ => self.alpha,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut config = match self.task {
            Task::Lm => ModelConfig::lm(vocab_size, self.d_model, self.n_heads, self.layers),
            Task::Nmt => ModelConfig::seq2seq(
                vocab_size,
                self.d_model,
                self.n_heads,
                self.encoder_layers,
                self.decoder_layers,
            ),
        };
        if self.ff_dim > 0 {
            config.ff_dim = self.ff_dim;
        }
        config.anchor_side = self.anchor_side;
        config
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::AdvOnly => "adv-only",
            Mode::Atcl => "atcl",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| Error::config(format!("unknown mode {s:?} (baseline|adv-only|atcl)")))
    }
}
