//! Experiment configuration: one JSON document with a section per stage.
//!
//! Every stage seed is derived from the top-level `seed`, so the sections do
//! not accept their own `seed` keys.

use std::path::Path;

use cfgx::autoencoder::AeConfig;
use cfgx::eval::{default_sparsities, tau_grid, PerturbationConfig};
use cfgx::explain::{GnnExplainerConfig, PgExplainerConfig};
use cfgx::fuse::DEFAULT_THRESHOLD;
use cfgx::gcn::GcnConfig;
use cfgx::numerics::derive_seed;
use cfgx::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const STREAM_SYNTH: u64 = 1;
pub const STREAM_AE: u64 = 2;
pub const STREAM_GNN: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;
pub const STREAM_GNNEXPLAINER: u64 = 5;
pub const STREAM_PGEXPLAINER: u64 = 6;
pub const STREAM_PERTURB: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub synth: SynthConfig,
    pub ae: AeConfig,
    pub gnn: GcnConfig,
    pub explain: ExplainConfig,
    pub fuse: FuseConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Graphs per class produced by `synth-gen`.
    pub n_per_class: usize,
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_per_class: 200,
            test_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub ig_steps: usize,
    pub gnnexplainer: GnnExplainerConfig,
    pub pgexplainer: PgExplainerConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            ig_steps: 50,
            gnnexplainer: GnnExplainerConfig::default(),
            pgexplainer: PgExplainerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    /// RankFusion agreement threshold `T`, percent of the edge count.
    pub threshold: f64,
    /// Explainers taking part in the two-of-three vote.
    pub vote: [String; 3],
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            threshold: DEFAULT_THRESHOLD,
            vote: ["ig".into(), "gbp".into(), "saliency".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub sparsities: Vec<f64>,
    pub taus: Vec<f64>,
    pub perturbation: PerturbationConfig,
    pub consistency_sparsities: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sparsities: default_sparsities(),
            taus: tau_grid(),
            perturbation: PerturbationConfig::default(),
            consistency_sparsities: vec![10.0, 50.0, 90.0],
        }
    }
}

const SEEDED_SECTIONS: [&[&str]; 5] = [
    &["synth"],
    &["ae"],
    &["gnn"],
    &["explain", "gnnexplainer"],
    &["explain", "pgexplainer"],
];

impl Default for Config {
    fn default() -> Self {
        let mut c = Config {
            seed: 0,
            dataset: DatasetConfig::default(),
            synth: SynthConfig::default(),
            ae: AeConfig::default(),
            gnn: GcnConfig::default(),
            explain: ExplainConfig::default(),
            fuse: FuseConfig::default(),
            eval: EvalConfig::default(),
        };
        c.set_seed(0);
        c
    }
}

impl Config {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| CliError::Config {
            path: ".".into(),
            msg: e.to_string(),
        })?;
        for section in SEEDED_SECTIONS {
            let mut v = &value;
            for key in section {
                v = v.get(key).unwrap_or(&serde_json::Value::Null);
            }
            if v.get("seed").is_some() {
                return Err(CliError::Config {
                    path: format!("{}.seed", section.join(".")),
                    msg: "stage seeds are derived from the top-level `seed`".into(),
                });
            }
        }
        let mut cfg: Config = serde_path_to_error::deserialize(value).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            msg: e.inner().to_string(),
        })?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::from_json(&bytes)
    }

    /// Set the top-level seed and re-derive every stage seed from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = derive_seed(seed, STREAM_SYNTH);
        self.ae.seed = derive_seed(seed, STREAM_AE);
        self.gnn.seed = derive_seed(seed, STREAM_GNN);
        self.explain.gnnexplainer.seed = derive_seed(seed, STREAM_GNNEXPLAINER);
        self.explain.pgexplainer.seed = derive_seed(seed, STREAM_PGEXPLAINER);
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_SPLIT)
    }

    pub fn perturbation_seed(&self) -> u64 {
        derive_seed(self.seed, STREAM_PERTURB)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| {
            Err(CliError::Config {
                path: path.into(),
                msg: msg.into(),
            })
        };
        if !(0.0..1.0).contains(&self.dataset.test_fraction) || self.dataset.test_fraction == 0.0 {
            return bad("dataset.test_fraction", "must lie in (0, 1)");
        }
        if self.explain.ig_steps == 0 {
            return bad("explain.ig_steps", "must be at least 1");
        }
        if !(0.0..=100.0).contains(&self.fuse.threshold) {
            return bad("fuse.threshold", "must lie in [0, 100]");
        }
        for (path, grid) in [
            ("eval.sparsities", &self.eval.sparsities),
            ("eval.consistency_sparsities", &self.eval.consistency_sparsities),
        ] {
            if grid.is_empty() {
                return bad(path, "must not be empty");
            }
            if grid.iter().any(|s| !s.is_finite() || *s <= 0.0 || *s > 100.0) {
                return bad(path, "sparsities must lie in (0, 100]");
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                return bad(path, "sparsities must be strictly increasing");
            }
        }
        if self.eval.taus.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return bad("eval.taus", "thresholds must be finite and non-negative");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(Config::from_json(b"{}").unwrap(), Config::default());
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = Config::from_json(br#"{"gnn": {"lr": 0.01, "lrr": 1}}"#).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "gnn.lrr"),
            e => panic!("unexpected {e}"),
        }
        let err = Config::from_json(br#"{"eval": {"perturbation": {"ratio": "x"}}}"#).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "eval.perturbation.ratio"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn stage_seed_keys_rejected() {
        let err = Config::from_json(br#"{"explain": {"pgexplainer": {"seed": 3}}}"#).unwrap_err();
        match err {
            CliError::Config { path, .. } => assert_eq!(path, "explain.pgexplainer.seed"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn seeds_follow_top_level_seed() {
        let a = Config::from_json(br#"{"seed": 5}"#).unwrap();
        let mut b = Config::default();
        b.set_seed(5);
        assert_eq!(a, b);
        assert_ne!(a.gnn.seed, Config::default().gnn.seed);
        assert_ne!(a.hash(), Config::default().hash());
    }

    #[test]
    fn hash_is_stable() {
        let c = Config::default();
        assert_eq!(c.hash(), c.clone().hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn range_checks() {
        assert!(Config::from_json(br#"{"dataset": {"test_fraction": 1.0}}"#).is_err());
        assert!(Config::from_json(br#"{"eval": {"sparsities": [10, 5]}}"#).is_err());
        assert!(Config::from_json(br#"{"fuse": {"threshold": 120}}"#).is_err());
    }
}
