//! Run configuration as flat `key = value` text.
//!
//! Blank lines and `#` comments are ignored. Keys:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `dataset` | (none) | dataset directory |
//! | `d` | 192 | embedding width |
//! | `heads` | 4 | attention heads |
//! | `layers` | 2 | transformer layers per stage |
//! | `decoder` | true | cross-modal decoder on/off |
//! | `lr` | 0.001 | Adam step size |
//! | `beta1`, `beta2` | 0.9, 0.9999 | Adam moment decay |
//! | `eps` | 1e-8 | Adam denominator offset |
//! | `batch_size` | 8 | plots per step |
//! | `epochs` | 10 | passes over the training plots |
//! | `max_steps` | 0 | stop after this many steps (0 = no cap) |
//! | `seeds` | 0,1,2 | model seeds, comma separated |
//! | `modalities` | (all) | comma separated subset |
//! | `cadence` | (dataset) | annual, seasonal or monthly |
//! | `years` | (dataset) | 1..=3 |
//! | `final` | false | train on train+val, report on test |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::datagen::Cadence;
use crate::numerics::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub decoder: bool,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: usize,
    pub seeds: Vec<u64>,
    pub modalities: Vec<String>,
    pub cadence: Option<Cadence>,
    pub years: Option<u32>,
    pub final_eval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            d: 192,
            heads: 4,
            layers: 2,
            decoder: true,
            adam: AdamConfig::default(),
            batch_size: 8,
            epochs: 10,
            max_steps: 0,
            seeds: vec![0, 1, 2],
            modalities: Vec::new(),
            cadence: None,
            years: None,
            final_eval: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, T::Err> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", n + 1))?;
            cfg.set(key.trim(), value.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| path.display().to_string())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let bad = || format!("invalid value {v:?} for {key}");
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "d" => self.d = v.parse().with_context(bad)?,
            "heads" => self.heads = v.parse().with_context(bad)?,
            "layers" => self.layers = v.parse().with_context(bad)?,
            "decoder" => self.decoder = v.parse().with_context(bad)?,
            "lr" => self.adam.lr = v.parse().with_context(bad)?,
            "beta1" => self.adam.beta1 = v.parse().with_context(bad)?,
            "beta2" => self.adam.beta2 = v.parse().with_context(bad)?,
            "eps" => self.adam.eps = v.parse().with_context(bad)?,
            "batch_size" => self.batch_size = v.parse().with_context(bad)?,
            "epochs" => self.epochs = v.parse().with_context(bad)?,
            "max_steps" => self.max_steps = v.parse().with_context(bad)?,
            "seeds" => self.seeds = parse_list(v).with_context(bad)?,
            "modalities" => self.modalities = parse_list(v).with_context(bad)?,
            "cadence" => self.cadence = Some(v.parse().with_context(bad)?),
            "years" => self.years = Some(v.parse().with_context(bad)?),
            "final" => self.final_eval = v.parse().with_context(bad)?,
            other => bail!("unknown configuration key {other:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            bail!("d = {} must be a positive multiple of heads = {}", self.d, self.heads);
        }
        if self.layers == 0 || self.batch_size == 0 {
            bail!("layers and batch_size must be positive");
        }
        if self.seeds.is_empty() {
            bail!("at least one seed is required");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            bail!("invalid optimizer settings {a:?}");
        }
        if let Some(y) = self.years {
            if !(1..=3).contains(&y) {
                bail!("years must be 1..=3, got {y}");
            }
        }
        Ok(())
    }

    /// Text that [`RunConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |xs: Vec<String>| xs.join(",");
        if let Some(p) = &self.dataset {
            writeln!(s, "dataset = {}", p.display()).unwrap();
        }
        writeln!(s, "d = {}", self.d).unwrap();
        writeln!(s, "heads = {}", self.heads).unwrap();
        writeln!(s, "layers = {}", self.layers).unwrap();
        writeln!(s, "decoder = {}", self.decoder).unwrap();
        writeln!(s, "lr = {:?}", self.adam.lr).unwrap();
        writeln!(s, "beta1 = {:?}", self.adam.beta1).unwrap();
        writeln!(s, "beta2 = {:?}", self.adam.beta2).unwrap();
        writeln!(s, "eps = {:?}", self.adam.eps).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "epochs = {}", self.epochs).unwrap();
        writeln!(s, "max_steps = {}", self.max_steps).unwrap();
        writeln!(s, "seeds = {}", join(self.seeds.iter().map(u64::to_string).collect())).unwrap();
        if !self.modalities.is_empty() {
            writeln!(s, "modalities = {}", join(self.modalities.clone())).unwrap();
        }
        if let Some(c) = self.cadence {
            writeln!(s, "cadence = {c}").unwrap();
        }
        if let Some(y) = self.years {
            writeln!(s, "years = {y}").unwrap();
        }
        writeln!(s, "final = {}", self.final_eval).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.dataset = Some("data/x".into());
        cfg.modalities = vec!["s2".into(), "climate".into()];
        cfg.cadence = Some(Cadence::Monthly);
        cfg.years = Some(2);
        cfg.adam.lr = 3e-4;
        cfg.seeds = vec![7];
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_bad_values() {
        let err = format!("{:#}", RunConfig::parse("d = 16\nwarmup = 3\n").unwrap_err());
        assert!(err.contains("line 2") && err.contains("warmup"), "{err}");
        assert!(RunConfig::parse("d = 10\nheads = 4").is_err());
        assert!(RunConfig::parse("years = 4").is_err());
        assert!(RunConfig::parse("cadence = weekly").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }
}
