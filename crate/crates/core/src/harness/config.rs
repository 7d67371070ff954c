//! Declarative TOML experiment configuration.
//!
//! ```toml
//! [synthetic]          # SyntheticConfig
//! ps = [0.05, 0.5]
//! finetune_lr = 1e-5
//!
//! [toyqa]              # ToyQaConfig (corpus generation)
//! shift = 0.8
//!
//! [train]              # TrainConfig (three-stage QA training)
//! batch_size = 8
//! [train.joint]
//! epochs = 15
//! lr = 1e-5
//! lambda_infl = 20.0
//! lambda_crit = 2000.0
//!
//! [sweep]              # optional explicit grid
//! lambda_infl = [20.0]
//! lambda_crit = [500.0, 2000.0]
//! proposal_size = [6]
//! ```
//!
//! Every section is optional and every omitted key keeps its default.
//! Learning-rate keys (`lr`, `*_lr`) must be written in normalized
//! scientific notation such as `1e-5` or `2.5e-4`; `10e-5` and `0.00001`
//! are rejected so that a rate is never silently rescaled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::TrainConfig;
use super::sweep::SweepGrid;
use super::synthetic::SyntheticConfig;
use super::toyqa::ToyQaConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub toyqa: ToyQaConfig,
    pub train: TrainConfig,
    pub sweep: Option<SweepGrid>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        check_learning_rates(text)?;
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.synthetic.validate()?;
        cfg.toyqa.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copies the seed into every section.
    pub fn set_seed(&mut self, seed: u64) {
        self.synthetic.seed = seed;
        self.toyqa.seed = seed;
        self.train.seed = seed;
    }
}

fn is_rate_key(key: &str) -> bool {
    key == "lr" || key.ends_with("_lr")
}

/// `d[.ddd]e[+-]dd` with a nonzero leading digit.
pub fn is_normalized_scientific(literal: &str) -> bool {
    let Some((mantissa, exponent)) = literal.split_once(['e', 'E']) else {
        return false;
    };
    let (int, frac) = match mantissa.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (mantissa, None),
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    let exp = exponent.strip_prefix(['-', '+']).unwrap_or(exponent);
    int.len() == 1
        && matches!(int.as_bytes()[0], b'1'..=b'9')
        && frac.is_none_or(digits)
        && digits(exp)
}

fn check_learning_rates(text: &str) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let key = key
            .trim()
            .rsplit('.')
            .next()
            .unwrap_or("")
            .trim_matches('"');
        if !is_rate_key(key) {
            continue;
        }
        let value = value.trim().replace('_', "");
        if !is_normalized_scientific(&value) {
            return Err(Error::Config(format!(
                "line {}: learning rate `{key} = {value}` must use normalized scientific notation (e.g. 1e-5)",
                n + 1
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scientific_literals() {
        for ok in ["1e-5", "2.5e-4", "1E-3", "9e+0", "1e3"] {
            assert!(is_normalized_scientific(ok), "{ok}");
        }
        for bad in [
            "10e-5", "0.001", "0e-3", "1e", "e-5", "1.e-5", "1e-", ".5e-3",
        ] {
            assert!(!is_normalized_scientific(bad), "{bad}");
        }
    }

    #[test]
    fn ambiguous_rate_is_a_config_error() {
        let err = ExperimentConfig::parse("[synthetic]\nfinetune_lr = 10e-5\n").unwrap_err();
        assert!(err.is_config_error());
        let err = ExperimentConfig::parse("[train.joint]\nepochs = 3\nlr = 0.00001\n").unwrap_err();
        assert!(err.is_config_error());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = ExperimentConfig::parse(
            "[synthetic]\nps = [0.5]\n[train.joint]\nepochs = 3\nlr = 1e-5\nlambda_infl = 20.0\nlambda_crit = 500.0\n",
        )
        .unwrap();
        assert_eq!(cfg.synthetic.ps, vec![0.5]);
        assert_eq!(cfg.synthetic.depth, 15);
        assert_eq!(cfg.train.joint.epochs, 3);
        assert_eq!(cfg.train.joint.lambda_crit, 500.0);
        assert_eq!(cfg.train.pretrain, TrainConfig::default().pretrain);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("[synthetic]\nwidht = 3\n")
            .unwrap_err()
            .is_config_error());
    }
}
