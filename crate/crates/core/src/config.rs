//! Model hyper-parameters and the flat `key = value` run configuration.
//!
//! Defaults are the published parameter list; per-dataset sequence length,
//! patch size and patience come from [`Preset`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::brt::BrtConfig;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::sampler::SamplerConfig;

/// Dataset-dependent settings: `(seq_cap, patch, patience)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Mooc,
    LastFm,
    CanParl,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Mooc, Preset::LastFm, Preset::CanParl];

    pub fn seq_cap(self) -> usize {
        match self {
            Preset::Mooc => 256,
            Preset::LastFm => 512,
            Preset::CanParl => 2048,
        }
    }

    pub fn patch(self) -> usize {
        match self {
            Preset::Mooc => 8,
            Preset::LastFm => 16,
            Preset::CanParl => 64,
        }
    }

    pub fn patience(self) -> usize {
        match self {
            Preset::LastFm => 0,
            Preset::Mooc | Preset::CanParl => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mooc => "mooc",
            Preset::LastFm => "lastfm",
            Preset::CanParl => "canparl",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}` (expected mooc, lastfm or canparl)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HotConfig {
    pub d: usize,
    pub d_t: usize,
    pub d_c: usize,
    pub d_out: usize,
    pub heads: usize,
    pub block: usize,
    pub segment: usize,
    pub states: usize,
    pub seq_cap: usize,
    pub patch: usize,
    /// Per-hop recency budgets `s_1, s_2, ...`.
    pub budgets: Vec<usize>,
    /// Applied to the aligned encodings and to every attention output.
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HotConfig {
    fn default() -> Self {
        HotConfig::preset(Preset::Mooc)
    }
}

impl HotConfig {
    pub fn preset(p: Preset) -> Self {
        HotConfig {
            d: 50,
            d_t: 100,
            d_c: 50,
            d_out: 172,
            heads: 4,
            block: 16,
            segment: 32,
            states: 32,
            seq_cap: p.seq_cap(),
            patch: p.patch(),
            budgets: vec![128, 1],
            dropout: 0.1,
            learning_rate: 1e-4,
            batch_size: 100,
            epochs: 50,
            patience: p.patience(),
            seed: 0,
        }
    }

    /// Small dimensions used by the gradient checks and synthetic runs.
    pub fn toy() -> Self {
        HotConfig {
            d: 4,
            d_t: 4,
            d_c: 4,
            d_out: 8,
            heads: 2,
            block: 2,
            segment: 2,
            states: 2,
            seq_cap: 8,
            patch: 2,
            budgets: vec![4, 1],
            ..HotConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_t", self.d_t),
            ("d_c", self.d_c),
            ("d_out", self.d_out),
            ("heads", self.heads),
            ("block", self.block),
            ("segment", self.segment),
            ("states", self.states),
            ("seq_cap", self.seq_cap),
            ("patch", self.patch),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        self.sampler_config().validate()?;
        self.brt_config().validate()
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            budgets: self.budgets.clone(),
            seq_cap: self.seq_cap,
        }
    }

    /// BRT over the side-by-side pair encoding, width `8d`.
    pub fn brt_config(&self) -> BrtConfig {
        BrtConfig {
            block: self.block,
            segment: self.segment,
            states: self.states,
            heads: self.heads,
            dropout: self.dropout,
            ..BrtConfig::new(8 * self.d)
        }
    }

    pub fn feature_config(&self, node_dim: usize, edge_dim: usize) -> FeatureConfig {
        FeatureConfig {
            d: self.d,
            d_t: self.d_t,
            d_c: self.d_c,
            patch: self.patch,
            seq_cap: self.seq_cap,
            hop_width: self.budgets.len().max(2),
            node_dim,
            edge_dim,
        }
    }

    fn write_kv(&self, out: &mut String) {
        let budgets: Vec<String> = self.budgets.iter().map(|b| b.to_string()).collect();
        let lines: [(&str, String); 17] = [
            ("d", self.d.to_string()),
            ("d_t", self.d_t.to_string()),
            ("d_c", self.d_c.to_string()),
            ("d_out", self.d_out.to_string()),
            ("heads", self.heads.to_string()),
            ("block", self.block.to_string()),
            ("segment", self.segment.to_string()),
            ("states", self.states.to_string()),
            ("seq_cap", self.seq_cap.to_string()),
            ("patch", self.patch.to_string()),
            ("budgets", budgets.join(", ")),
            ("dropout", self.dropout.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(out, "{k} = {v}");
        }
    }

    /// Sets one field; `false` if `key` is not a model key.
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "d" => self.d = num(key, value)?,
            "d_t" => self.d_t = num(key, value)?,
            "d_c" => self.d_c = num(key, value)?,
            "d_out" => self.d_out = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "block" => self.block = num(key, value)?,
            "segment" => self.segment = num(key, value)?,
            "states" => self.states = num(key, value)?,
            "seq_cap" => self.seq_cap = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "budgets" => {
                self.budgets = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "dropout" => self.dropout = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines for every field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        self.write_kv(&mut s);
        s
    }

    /// Parses the output of [`HotConfig::to_kv`]; unset keys keep their
    /// defaults, unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = HotConfig::default();
        for (line, key, value) in kv_lines(text)? {
            if !cfg.set(key, value)? {
                return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

/// Non-blank, non-comment lines as `(line number, key, value)`.
fn kv_lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

/// Everything a CLI run needs: data location, split, evaluation settings and
/// the model hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    /// Width of the (zero) node feature table for datasets without one.
    pub node_dim: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Fraction of validation/test nodes hidden from training in the
    /// inductive setting.
    pub inductive_ratio: f64,
    pub eval_seed: u64,
    pub model: HotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data/events.csv"),
            node_dim: 0,
            train_ratio: 0.7,
            val_ratio: 0.15,
            test_ratio: 0.15,
            inductive_ratio: 0.1,
            eval_seed: 0,
            model: HotConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train_ratio, self.val_ratio, self.test_ratio)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# data\n");
        let _ = writeln!(s, "dataset = {}", self.dataset.display());
        let _ = writeln!(s, "node_dim = {}", self.node_dim);
        let _ = writeln!(s, "train_ratio = {}", self.train_ratio);
        let _ = writeln!(s, "val_ratio = {}", self.val_ratio);
        let _ = writeln!(s, "test_ratio = {}", self.test_ratio);
        s.push_str("\n# evaluation\n");
        let _ = writeln!(s, "inductive_ratio = {}", self.inductive_ratio);
        let _ = writeln!(s, "eval_seed = {}", self.eval_seed);
        s.push_str("\n# model\n");
        self.model.write_kv(&mut s);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in kv_lines(text)? {
            match key {
                "dataset" => cfg.dataset = PathBuf::from(value),
                "node_dim" => cfg.node_dim = num(key, value)?,
                "train_ratio" => cfg.train_ratio = num(key, value)?,
                "val_ratio" => cfg.val_ratio = num(key, value)?,
                "test_ratio" => cfg.test_ratio = num(key, value)?,
                "inductive_ratio" => cfg.inductive_ratio = num(key, value)?,
                "eval_seed" => cfg.eval_seed = num(key, value)?,
                _ => {
                    if !cfg.model.set(key, value)? {
                        return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        crate::ctdg::split_sizes(1, self.ratios()).map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.inductive_ratio) {
            return Err(Error::Config(format!("inductive_ratio {} outside [0, 1]", self.inductive_ratio)));
        }
        self.model.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
