//! Model and training hyperparameters, presets, and `key = value` overrides.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Switches that disable individual model components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_random_walk: bool,
    pub no_source_walk: bool,
    pub static_weights: bool,
    pub static_adjacency: bool,
    pub no_temporal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub max_src_len: usize,
    /// Maximum number of decoder steps (target tokens plus end-of-sentence).
    pub n_max: usize,
    pub d_rw: usize,
    pub rw_steps: Vec<u32>,
    pub global_graphs: usize,
    pub global_nodes: usize,
    pub local_graphs: usize,
    pub local_nodes: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    pub ablations: Ablations,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Adam first-moment decay (the "momentum").
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub beam: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus_size: usize,
    /// Trailing examples reserved for evaluation.
    pub held_out: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            enc_layers: 2,
            enc_heads: 2,
            d_ff: 128,
            blocks: 2,
            max_src_len: 16,
            n_max: 16,
            d_rw: 16,
            rw_steps: vec![0, 1],
            global_graphs: 3,
            global_nodes: 6,
            local_graphs: 3,
            local_nodes: 4,
            leaky_slope: 0.2,
            ln_eps: 1e-5,
            ablations: Ablations::default(),
        }
    }

    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 512,
            enc_layers: 6,
            enc_heads: 4,
            d_ff: 2048,
            blocks: 4,
            max_src_len: 128,
            n_max: 128,
            d_rw: 16,
            rw_steps: vec![0, 1],
            global_graphs: 6,
            global_nodes: 6,
            local_graphs: 6,
            local_nodes: 4,
            leaky_slope: 0.2,
            ln_eps: 1e-5,
            ablations: Ablations::default(),
        }
    }

    /// Small model used for finite-difference checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 8,
            enc_layers: 1,
            enc_heads: 2,
            d_ff: 16,
            d_rw: 4,
            global_graphs: 2,
            global_nodes: 3,
            local_graphs: 2,
            local_nodes: 2,
            ..Self::desk(vocab_size)
        }
    }

    /// Width of one walk representation row.
    pub fn rw_width(&self) -> usize {
        (self.global_graphs + self.local_graphs) * self.rw_steps.len()
    }

    pub fn uses_target_walk(&self) -> bool {
        !self.ablations.no_random_walk
    }

    pub fn uses_source_walk(&self) -> bool {
        !self.ablations.no_random_walk && !self.ablations.no_source_walk
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        if self.d_model == 0 || self.d_ff == 0 || self.d_rw == 0 {
            return bad("widths must be positive");
        }
        if self.enc_heads == 0 || !self.d_model.is_multiple_of(self.enc_heads) {
            return bad("enc_heads must divide d_model");
        }
        if self.blocks == 0 {
            return bad("blocks must be at least 1");
        }
        if self.n_max == 0 || self.max_src_len == 0 {
            return bad("lengths must be positive");
        }
        if self.rw_steps.is_empty() {
            return bad("random-walk step set is empty");
        }
        if self.global_graphs + self.local_graphs == 0 {
            return bad("hidden-graph bank is empty");
        }
        if self.global_nodes == 0 || self.local_nodes == 0 {
            return bad("hidden graphs need at least one node");
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 20,
            seed: 1,
            clip_norm: 5.0,
            beam: 4,
        }
    }

    pub fn paper() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 96,
            beam: 12,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Invalid("lr must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be at least 1".into()));
        }
        if self.beam == 0 {
            return Err(Error::Invalid("beam must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam decays must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value for {key}: {v:?}")))
}

fn parse_steps(v: &str) -> Result<Vec<u32>> {
    let v = v.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse("rw_steps", s)).collect()
}

fn fmt_steps(s: &[u32]) -> String {
    s.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self {
                preset: name.into(),
                model: ModelConfig::desk(40),
                train: TrainConfig::desk(),
                corpus_size: 2200,
                held_out: 200,
                max_len: 10,
            }),
            "paper" => Ok(Self {
                preset: name.into(),
                model: ModelConfig::paper(30_000),
                train: TrainConfig::paper(),
                corpus_size: 2200,
                held_out: 200,
                max_len: 10,
            }),
            "tiny" => Ok(Self {
                preset: name.into(),
                model: ModelConfig::tiny(40),
                train: TrainConfig::desk(),
                corpus_size: 200,
                held_out: 20,
                max_len: 10,
            }),
            _ => Err(Error::Invalid(format!("unknown preset {name:?}"))),
        }
    }

    /// Applies one `key = value` setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let a = &mut m.ablations;
        let k = key.trim();
        match k {
            "preset" => self.preset = value.trim().into(),
            "vocab_size" => m.vocab_size = parse(k, value)?,
            "d_model" => m.d_model = parse(k, value)?,
            "enc_layers" => m.enc_layers = parse(k, value)?,
            "enc_heads" => m.enc_heads = parse(k, value)?,
            "d_ff" => m.d_ff = parse(k, value)?,
            "blocks" => m.blocks = parse(k, value)?,
            "max_src_len" => m.max_src_len = parse(k, value)?,
            "n_max" => m.n_max = parse(k, value)?,
            "d_rw" => m.d_rw = parse(k, value)?,
            "rw_steps" => m.rw_steps = parse_steps(value)?,
            "global_graphs" => m.global_graphs = parse(k, value)?,
            "global_nodes" => m.global_nodes = parse(k, value)?,
            "local_graphs" => m.local_graphs = parse(k, value)?,
            "local_nodes" => m.local_nodes = parse(k, value)?,
            "leaky_slope" => m.leaky_slope = parse(k, value)?,
            "ln_eps" => m.ln_eps = parse(k, value)?,
            "no_random_walk" => a.no_random_walk = parse(k, value)?,
            "no_source_walk" => a.no_source_walk = parse(k, value)?,
            "static_weights" => a.static_weights = parse(k, value)?,
            "static_adjacency" => a.static_adjacency = parse(k, value)?,
            "no_temporal" => a.no_temporal = parse(k, value)?,
            "lr" => t.lr = parse(k, value)?,
            "beta1" => t.beta1 = parse(k, value)?,
            "beta2" => t.beta2 = parse(k, value)?,
            "eps" => t.eps = parse(k, value)?,
            "batch_size" => t.batch_size = parse(k, value)?,
            "epochs" => t.epochs = parse(k, value)?,
            "seed" => t.seed = parse(k, value)?,
            "clip_norm" => t.clip_norm = parse(k, value)?,
            "beam" => t.beam = parse(k, value)?,
            "corpus_size" => self.corpus_size = parse(k, value)?,
            "held_out" => self.held_out = parse(k, value)?,
            "max_len" => self.max_len = parse(k, value)?,
            _ => return Err(Error::Invalid(format!("unknown config key {k:?}"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)` in a fixed order; feeding these back
    /// through [`Config::set`] reproduces the configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let a = &m.ablations;
        vec![
            ("preset", self.preset.clone()),
            ("vocab_size", m.vocab_size.to_string()),
            ("d_model", m.d_model.to_string()),
            ("enc_layers", m.enc_layers.to_string()),
            ("enc_heads", m.enc_heads.to_string()),
            ("d_ff", m.d_ff.to_string()),
            ("blocks", m.blocks.to_string()),
            ("max_src_len", m.max_src_len.to_string()),
            ("n_max", m.n_max.to_string()),
            ("d_rw", m.d_rw.to_string()),
            ("rw_steps", fmt_steps(&m.rw_steps)),
            ("global_graphs", m.global_graphs.to_string()),
            ("global_nodes", m.global_nodes.to_string()),
            ("local_graphs", m.local_graphs.to_string()),
            ("local_nodes", m.local_nodes.to_string()),
            ("leaky_slope", format!("{:?}", m.leaky_slope)),
            ("ln_eps", format!("{:?}", m.ln_eps)),
            ("no_random_walk", a.no_random_walk.to_string()),
            ("no_source_walk", a.no_source_walk.to_string()),
            ("static_weights", a.static_weights.to_string()),
            ("static_adjacency", a.static_adjacency.to_string()),
            ("no_temporal", a.no_temporal.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("beta1", format!("{:?}", t.beta1)),
            ("beta2", format!("{:?}", t.beta2)),
            ("eps", format!("{:?}", t.eps)),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("clip_norm", format!("{:?}", t.clip_norm)),
            ("beam", t.beam.to_string()),
            ("corpus_size", self.corpus_size.to_string()),
            ("held_out", self.held_out.to_string()),
            ("max_len", self.max_len.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.corpus_size == 0 {
            return Err(Error::Invalid("corpus_size must be at least 1".into()));
        }
        if self.held_out >= self.corpus_size {
            return Err(Error::Invalid("held_out must leave training examples".into()));
        }
        if self.max_len + 1 > self.model.n_max {
            return Err(Error::Invalid(format!(
                "max_len {} needs n_max of at least {}",
                self.max_len,
                self.max_len + 1
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_bank_width_is_24() {
        assert_eq!(ModelConfig::paper(30_000).rw_width(), 24);
        assert_eq!(ModelConfig::desk(40).rw_width(), 12);
    }

    #[test]
    fn entries_round_trip() {
        let mut c = Config::preset("desk").unwrap();
        c.set("static_weights", "true").unwrap();
        c.set("rw_steps", "0,1,2").unwrap();
        let mut d = Config::preset("paper").unwrap();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut c = Config::preset("desk").unwrap();
        let e = c.set("learning_rate", "0.1").unwrap_err();
        assert!(format!("{e}").contains("learning_rate"));
    }
}
