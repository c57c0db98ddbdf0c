use std::path::Path;

use anyhow::{Context, Result};
use gazeid::classify::{Classifier, EvalProtocol};
use gazeid::dataset::Provenance;
use gazeid::fisher::DEFAULT_EPS_REG;
use gazeid::gaze::DetectionParams;
use gazeid::simulate::ModelKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Experiment settings from `--config`, with command-line flags applied on
/// top. Paths and the thread count are not part of it: they do not change
/// results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub classifier: Option<Classifier>,
    /// SceneWalk grid as `[rows, cols]`.
    pub grid: Option<[usize; 2]>,
    pub detection: DetectionParams,
    pub protocol: EvalProtocol,
    /// Ridge and normalization for `scores`.
    pub eps_reg: f64,
    pub normalize: bool,
    /// SVM regularization for `train`.
    pub c: f64,
    /// Test images per identification group for `identify`.
    pub k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: None,
            classifier: None,
            grid: None,
            detection: DetectionParams::default(),
            protocol: EvalProtocol::default(),
            eps_reg: DEFAULT_EPS_REG,
            normalize: true,
            c: 1.0,
            k: 1,
        }
    }
}

/// Flag values that override the config file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub model: Option<ModelKind>,
    pub classifier: Option<Classifier>,
    pub grid: Option<[usize; 2]>,
    pub k: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("{}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("{}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.seed = flags.seed.or(cfg.seed);
        cfg.model = flags.model.or(cfg.model);
        cfg.classifier = flags.classifier.or(cfg.classifier);
        cfg.grid = flags.grid.or(cfg.grid);
        cfg.k = flags.k.unwrap_or(cfg.k);
        if let Some(s) = cfg.seed {
            cfg.protocol.seed = s;
        }
        if cfg.grid.is_some() {
            cfg.protocol.grid = cfg.grid;
        }
        cfg.protocol.validate()?;
        anyhow::ensure!(cfg.k >= 1, "k must be at least 1");
        anyhow::ensure!(cfg.c.is_finite() && cfg.c > 0.0, "c must be positive, got {}", cfg.c);
        anyhow::ensure!(
            cfg.eps_reg.is_finite() && cfg.eps_reg >= 0.0,
            "eps_reg must be non-negative, got {}",
            cfg.eps_reg
        );
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.protocol.seed)
    }

    pub fn model(&self) -> Result<ModelKind> {
        self.model.context("--model is required (markov, markov-dyn or scenewalk)")
    }

    pub fn classifier(&self) -> Result<Classifier> {
        self.classifier.context("--classifier is required (bayes or fisher-svm)")
    }

    /// Provenance for outputs; `inputs` are hashed together with the
    /// configuration when the command takes a settings file of its own.
    pub fn provenance(&self, seed: u64, inputs: Option<&serde_json::Value>) -> Provenance {
        let doc = serde_json::json!({ "config": self, "inputs": inputs });
        let digest = Sha256::digest(serde_json::to_vec(&doc).expect("config serializes"));
        Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: format!("{digest:x}"),
            seed,
        }
    }
}

/// `ROWSxCOLS`.
pub fn parse_grid(s: &str) -> Result<[usize; 2], String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected ROWSxCOLS, got {s:?}"))?;
    let r: usize = r.trim().parse().map_err(|_| format!("bad row count in {s:?}"))?;
    let c: usize = c.trim().parse().map_err(|_| format!("bad column count in {s:?}"))?;
    if r == 0 || c == 0 {
        return Err(format!("grid must be non-empty, got {s:?}"));
    }
    Ok([r, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_flag_parsing() {
        assert_eq!(parse_grid("64x48").unwrap(), [64, 48]);
        assert!(parse_grid("64").is_err());
        assert!(parse_grid("0x4").is_err());
    }

    #[test]
    fn flags_win_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 3, "c": 2.0, "protocol": {"n_splits": 2}}"#).unwrap();
        let cfg = RunConfig::load(Some(&p), Overrides { seed: Some(9), ..Overrides::default() }).unwrap();
        assert_eq!((cfg.seed(), cfg.protocol.seed, cfg.c, cfg.protocol.n_splits), (9, 9, 2.0, 2));
        std::fs::write(&p, r#"{"sed": 3}"#).unwrap();
        let err = RunConfig::load(Some(&p), Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("unknown field"));
    }

    #[test]
    fn hash_tracks_settings() {
        let a = RunConfig::default();
        let b = RunConfig { c: 2.0, ..RunConfig::default() };
        assert_eq!(a.provenance(0, None), a.provenance(0, None));
        assert_ne!(a.provenance(0, None).config_hash, b.provenance(0, None).config_hash);
        assert_eq!(a.provenance(0, None).config_hash.len(), 64);
    }
}
