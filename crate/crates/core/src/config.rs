//! Experiment configuration as sectioned `key = value` text (TOML).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{Modality, DEFAULT_MIN_INTERACTIONS};
use crate::error::{Error, Result};
use crate::graphs::ModalityWeights;
use crate::model::Variant;
use crate::seqhead::HeadConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub min_interactions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_interactions: DEFAULT_MIN_INTERACTIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub knn_k: usize,
    pub text_weight: f64,
    pub visual_weight: f64,
    /// Fraction of user-item edges kept by each epoch's pruning.
    pub keep_fraction: f64,
    pub item_layers: usize,
    pub user_layers: usize,
    pub embedding_dim: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            knn_k: 10,
            text_weight: 0.9,
            visual_weight: 0.1,
            keep_fraction: 0.8,
            item_layers: 1,
            user_layers: 2,
            embedding_dim: 64,
        }
    }
}

impl GraphConfig {
    pub fn modality_weights(&self) -> Result<ModalityWeights> {
        ModalityWeights::new([
            (Modality::Text, self.text_weight),
            (Modality::Visual, self.visual_weight),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the cross-entropy term.
    pub omega: f64,
    /// Weight of the per-modality ranking terms.
    pub lambda: f64,
    pub learning_rate: f64,
    pub bpr_batch: usize,
    pub ce_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Cutoffs reported by evaluation.
    pub eval_ks: Vec<usize>,
    /// Cutoff whose validation HR drives model selection.
    pub select_k: usize,
    pub exclude_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            omega: 0.1,
            lambda: 0.001,
            learning_rate: 1e-3,
            bpr_batch: 2048,
            ce_batch: 256,
            max_epochs: 1000,
            patience: 20,
            seed: 2024,
            variant: Variant::FULL,
            eval_ks: vec![10, 20],
            select_k: 20,
            exclude_history: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub graphs: GraphConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// SHA-256 of the serialised configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(
            self.to_toml_string()?.as_bytes(),
        )))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let g = &self.graphs;
        let t = &self.train;
        if g.knn_k == 0 {
            return fail("graphs.knn_k must be positive".into());
        }
        if !(g.keep_fraction > 0.0 && g.keep_fraction <= 1.0) {
            return fail(format!(
                "graphs.keep_fraction {} outside (0, 1]",
                g.keep_fraction
            ));
        }
        if g.embedding_dim == 0 {
            return fail("graphs.embedding_dim must be positive".into());
        }
        g.modality_weights()?;
        self.head.validate(g.embedding_dim)?;
        if !(t.omega >= 0.0 && t.omega.is_finite()) {
            return fail(format!(
                "train.omega {} must be a finite non-negative number",
                t.omega
            ));
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return fail(format!(
                "train.lambda {} must be a finite non-negative number",
                t.lambda
            ));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return fail(format!(
                "train.learning_rate {} must be positive",
                t.learning_rate
            ));
        }
        if t.patience == 0 {
            return fail("train.patience must be at least 1".into());
        }
        if t.bpr_batch == 0 || t.ce_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if t.eval_ks.is_empty() || t.eval_ks.contains(&0) {
            return fail("train.eval_ks must list positive cutoffs".into());
        }
        if !t.eval_ks.contains(&t.select_k) {
            return fail(format!(
                "train.select_k {} is not among eval_ks",
                t.select_k
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("[graphs]") && text.contains("[head]") && text.contains("[train]"));
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(
            cfg.hash().unwrap(),
            Config::from_toml_str(&text).unwrap().hash().unwrap()
        );
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg =
            Config::from_toml_str("[train]\nomega = 1.0\nvariant = \"U,NO_MM_LOSS\"\n").unwrap();
        assert_eq!(cfg.train.omega, 1.0);
        assert!(cfg.train.variant.user_token && cfg.train.variant.no_mm_loss);
        assert_eq!(cfg.head, HeadConfig::default());
        assert_eq!(cfg.train.lambda, 0.001);
        assert_eq!(cfg.graphs.knn_k, 10);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml_str("[train]\nvariant = \"Q\"\n").is_err());
        assert!(Config::from_toml_str("[train]\npatience = 0\n").is_err());
        assert!(Config::from_toml_str("[graphs]\nuser_layers = -1\n").is_err());
        assert!(Config::from_toml_str("[graphs]\ntext_weight = 0.5\n").is_err());
        assert!(Config::from_toml_str("[head]\ncutoff = 0\n").is_err());
        assert!(Config::from_toml_str("[nope]\nx = 1\n").is_err());
    }
}
