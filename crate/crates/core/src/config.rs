//! Flat `key = value` run configuration shared by every command.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cascade::EvaluatorConfig;
use crate::data::{SynthConfig, TASKS};
use crate::decode::{BatchOptions, DecodeOptions, Strategy};
use crate::error::{Error, Result};
use crate::model::{DecoderKind, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Evaluator,
    GenOnly,
    ConOnly,
    Total,
    Vanilla,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Evaluator,
        TrainMode::GenOnly,
        TrainMode::ConOnly,
        TrainMode::Total,
        TrainMode::Vanilla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Evaluator => "evaluator",
            TrainMode::GenOnly => "generator-gen-only",
            TrainMode::ConOnly => "generator-con-only",
            TrainMode::Total => "generator-total",
            TrainMode::Vanilla => "vanilla",
        }
    }

    pub fn needs_evaluator(self) -> bool {
        matches!(self, TrainMode::ConOnly | TrainMode::Total | TrainMode::Vanilla)
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Every tunable of every command. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // data
    pub requests: usize,
    pub catalog: usize,
    pub n: usize,
    pub m: usize,
    pub d_u: usize,
    pub d_x: usize,
    pub noise: f64,
    pub position_bias: f64,
    pub holdout: f64,
    // generator
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub lambda: usize,
    // evaluator
    pub positional: bool,
    pub polarity: Vec<f64>,
    // optimisation
    pub lr: f64,
    pub alpha: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cascade_every: usize,
    pub seed: u64,
    pub precision: Precision,
    pub mode: TrainMode,
    // decoding and evaluation
    pub strategy: String,
    pub temperature: f64,
    pub workers: usize,
    pub free_endpoint: bool,
    pub distinct2_per_list: bool,
    pub diversity_samples: usize,
    pub lambdas: Vec<usize>,
    // paths
    pub data: PathBuf,
    pub evaluator: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            requests: 20_000,
            catalog: 500,
            n: 20,
            m: 4,
            d_u: 8,
            d_x: 16,
            noise: 0.5,
            position_bias: 0.5,
            holdout: 0.1,
            d: 32,
            blocks: 2,
            heads: 2,
            ffn_mult: 4,
            lambda: 4,
            positional: true,
            polarity: vec![1.0, 1.0, 0.0],
            lr: 1e-3,
            alpha: 0.5,
            tau: 0.3,
            epochs: 5,
            batch_size: 64,
            cascade_every: 1,
            seed: 0,
            precision: Precision::F32,
            mode: TrainMode::Total,
            strategy: "lookahead".into(),
            temperature: 1.0,
            workers: 1,
            free_endpoint: false,
            distinct2_per_list: false,
            diversity_samples: 8,
            lambdas: vec![1, 2, 4, 6],
            data: PathBuf::from("out/data.jsonl"),
            evaluator: PathBuf::from("out/evaluator.ckpt"),
            checkpoint: PathBuf::from("out/generator.ckpt"),
            out: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "requests",
    "catalog",
    "n",
    "m",
    "d_u",
    "d_x",
    "noise",
    "position_bias",
    "holdout",
    "d",
    "blocks",
    "heads",
    "ffn_mult",
    "lambda",
    "positional",
    "polarity",
    "lr",
    "alpha",
    "tau",
    "epochs",
    "batch_size",
    "cascade_every",
    "seed",
    "precision",
    "mode",
    "strategy",
    "temperature",
    "workers",
    "free_endpoint",
    "distinct2_per_list",
    "diversity_samples",
    "lambdas",
    "data",
    "evaluator",
    "checkpoint",
    "out",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<V: ToString>(xs: &[V]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "requests" => self.requests = parse(key, v)?,
            "catalog" => self.catalog = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "d_u" => self.d_u = parse(key, v)?,
            "d_x" => self.d_x = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "position_bias" => self.position_bias = parse(key, v)?,
            "holdout" => self.holdout = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn_mult" => self.ffn_mult = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "positional" => self.positional = parse(key, v)?,
            "polarity" => self.polarity = parse_list(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "cascade_every" => self.cascade_every = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value `{v}` for key `precision` (f32|f64)"
                        )))
                    }
                }
            }
            "mode" => self.mode = v.parse()?,
            "strategy" => self.strategy = v.to_string(),
            "temperature" => self.temperature = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "free_endpoint" => self.free_endpoint = parse(key, v)?,
            "distinct2_per_list" => self.distinct2_per_list = parse(key, v)?,
            "diversity_samples" => self.diversity_samples = parse(key, v)?,
            "lambdas" => self.lambdas = parse_list(key, v)?,
            "data" => self.data = v.into(),
            "evaluator" => self.evaluator = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "out" => self.out = v.into(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for &k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "requests" => self.requests.to_string(),
            "catalog" => self.catalog.to_string(),
            "n" => self.n.to_string(),
            "m" => self.m.to_string(),
            "d_u" => self.d_u.to_string(),
            "d_x" => self.d_x.to_string(),
            "noise" => self.noise.to_string(),
            "position_bias" => self.position_bias.to_string(),
            "holdout" => self.holdout.to_string(),
            "d" => self.d.to_string(),
            "blocks" => self.blocks.to_string(),
            "heads" => self.heads.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "lambda" => self.lambda.to_string(),
            "positional" => self.positional.to_string(),
            "polarity" => join(&self.polarity),
            "lr" => self.lr.to_string(),
            "alpha" => self.alpha.to_string(),
            "tau" => self.tau.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "cascade_every" => self.cascade_every.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => match self.precision {
                Precision::F32 => "f32".into(),
                Precision::F64 => "f64".into(),
            },
            "mode" => self.mode.name().into(),
            "strategy" => self.strategy.clone(),
            "temperature" => self.temperature.to_string(),
            "workers" => self.workers.to_string(),
            "free_endpoint" => self.free_endpoint.to_string(),
            "distinct2_per_list" => self.distinct2_per_list.to_string(),
            "diversity_samples" => self.diversity_samples.to_string(),
            "lambdas" => join(&self.lambdas),
            "data" => self.data.display().to_string(),
            "evaluator" => self.evaluator.display().to_string(),
            "checkpoint" => self.checkpoint.display().to_string(),
            "out" => self.out.display().to_string(),
            _ => String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.synth().validate()?;
        self.evaluator_config().validate()?;
        self.model_config(DecoderKind::Graph).validate()?;
        if !(0.0..1.0).contains(&self.holdout) {
            return bad(format!("holdout must be in [0, 1), got {}", self.holdout));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.cascade_every == 0 {
            return bad("epochs, batch_size and cascade_every must be >= 1".into());
        }
        if self.workers == 0 || self.diversity_samples < 2 {
            return bad("workers must be >= 1 and diversity_samples >= 2".into());
        }
        if self.lambdas.is_empty() || self.lambdas.contains(&0) {
            return bad("lambdas must be a non-empty list of values >= 1".into());
        }
        self.strategy()?;
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_requests: self.requests,
            catalog_size: self.catalog,
            n: self.n,
            m: self.m,
            d_u: self.d_u,
            d_x: self.d_x,
            seed: self.seed,
            noise: self.noise,
            position_bias: self.position_bias,
        }
    }

    pub fn model_config(&self, kind: DecoderKind) -> ModelConfig {
        ModelConfig {
            d: self.d,
            blocks: self.blocks,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            lambda: if kind == DecoderKind::Vanilla { 1 } else { self.lambda },
            n: self.n,
            m: self.m,
            d_u: self.d_u,
            d_x: self.d_x,
            kind,
        }
    }

    pub fn evaluator_config(&self) -> EvaluatorConfig {
        EvaluatorConfig {
            d: self.d,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            m: self.m,
            d_u: self.d_u,
            d_x: self.d_x,
            tasks: TASKS.iter().map(|s| s.to_string()).collect(),
            polarity: self.polarity.clone(),
            positional: self.positional,
        }
    }

    pub fn strategy(&self) -> Result<Strategy> {
        match self.strategy.as_str() {
            "lookahead" => Ok(Strategy::Lookahead),
            "sample" => Ok(Strategy::Sample {
                temperature: self.temperature,
            }),
            "vanilla" => Ok(Strategy::Vanilla),
            s => Err(Error::Config(format!(
                "unknown strategy `{s}` (lookahead|sample|vanilla)"
            ))),
        }
    }

    pub fn batch_options(&self, strategy: Strategy) -> BatchOptions {
        BatchOptions {
            strategy,
            decode: DecodeOptions {
                free_endpoint: self.free_endpoint,
            },
            seed: self.seed,
            workers: self.workers,
            chunk: self.batch_size,
        }
    }

    /// Deduplicate lambdas, keeping first occurrences; returns the dropped values.
    pub fn dedup_lambdas(&mut self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut dropped = Vec::new();
        self.lambdas.retain(|&l| {
            let fresh = seen.insert(l);
            if !fresh {
                dropped.push(l);
            }
            fresh
        });
        dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("lambda = 6 # bigger graph\nmode=vanilla\n\nlambdas = 1, 2,4\nprecision = f64")
            .unwrap();
        assert_eq!(cfg.lambda, 6);
        assert_eq!(cfg.mode, TrainMode::Vanilla);
        assert_eq!(cfg.lambdas, vec![1, 2, 4]);
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let mut cfg = RunConfig::default();
        let e = cfg.set("lamda", "4").unwrap_err().to_string();
        assert!(e.contains("lamda"), "{e}");
        let e = cfg.set("epochs", "many").unwrap_err().to_string();
        assert!(e.contains("epochs"), "{e}");
        cfg.set("tau", "0").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("tau"));
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut cfg = RunConfig {
            lambdas: vec![4, 2, 4, 1, 2],
            ..Default::default()
        };
        assert_eq!(cfg.dedup_lambdas(), vec![4, 2]);
        assert_eq!(cfg.lambdas, vec![4, 2, 1]);
    }
}
