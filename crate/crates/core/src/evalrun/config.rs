use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PromptTemplate};
use crate::error::{Error, Result};
use crate::federation::{Strategy, Weighting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self { steps: 400, lr: 0.05, batch: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSettings {
    /// Bottleneck width.
    pub r: usize,
    /// First block (1-based) that carries an adapter; adapters run to the last block.
    pub first_block: usize,
    pub alpha: f64,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self { r: 8, first_block: 3, alpha: 0.001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub eta: f64,
    pub epochs: usize,
    pub batch_train: usize,
    pub batch_eval: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { eta: 0.001, epochs: 1, batch_train: 32, batch_eval: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSettings {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub strategy: Strategy,
    pub weighting: Weighting,
    /// Train and evaluate clients on the rayon pool.
    pub parallel: bool,
}

impl Default for FederationSettings {
    fn default() -> Self {
        Self {
            clients: 4,
            participation: 1.0,
            rounds: 30,
            strategy: Strategy::SharedOnly,
            weighting: Weighting::Uniform,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSettings {
    Pathological { classes_per_client: usize },
    Dirichlet { beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub classes: usize,
    pub novel_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pretrain_per_class: usize,
    /// Few-shot samples per class.
    pub shots: usize,
    pub sigma: f64,
    /// Prototype norm.
    pub radius: f64,
    /// Minimum pairwise prototype distance.
    pub margin: f64,
    pub domains: usize,
    pub domain_bias: f64,
    pub domain_noise: f64,
    pub partition: PartitionSettings,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            classes: 25,
            novel_classes: 5,
            train_per_class: 16,
            test_per_class: 20,
            pretrain_per_class: 20,
            shots: 8,
            sigma: 1.25,
            radius: 8.0,
            margin: 4.0,
            domains: 1,
            domain_bias: 0.5,
            domain_noise: 0.0,
            partition: PartitionSettings::Pathological { classes_per_client: 5 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub seeds: Vec<u64>,
    /// Evaluate every this many rounds (round 0 and the final round always).
    pub every: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { seeds: vec![0], every: 1 }
    }
}

/// Complete description of a run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub pretrain: PretrainSettings,
    pub adapter: AdapterSettings,
    pub train: TrainSettings,
    pub federation: FederationSettings,
    pub data: DataSettings,
    pub eval: EvalSettings,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn template(&self) -> PromptTemplate {
        PromptTemplate::photo_of()
    }

    /// Every cross-field constraint, checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        if d.classes < 2 {
            return bad(format!("data.classes must be at least 2, got {}", d.classes));
        }
        self.backbone.validate_for(d.classes, &self.template())?;
        let a = &self.adapter;
        let layers = self.backbone.layers;
        if a.first_block == 0 || a.first_block > layers {
            return bad(format!("adapter.first_block={} must lie in 1..={layers}", a.first_block));
        }
        if a.r == 0 || a.r >= self.backbone.d {
            return bad(format!("adapter.r={} must satisfy 0 < r < d={}", a.r, self.backbone.d));
        }
        if !(a.alpha >= 0.0 && a.alpha.is_finite()) {
            return bad(format!("adapter.alpha must be finite and >= 0, got {}", a.alpha));
        }
        let t = &self.train;
        if !(t.eta > 0.0 && t.eta.is_finite()) {
            return bad(format!("train.eta must be positive, got {}", t.eta));
        }
        if t.batch_train == 0 || t.batch_eval == 0 {
            return bad("train batch sizes must be at least 1".into());
        }
        let f = &self.federation;
        if f.clients == 0 {
            return bad("federation.clients must be at least 1".into());
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return bad(format!("federation.participation must lie in (0, 1], got {}", f.participation));
        }
        if d.shots == 0 || d.train_per_class == 0 || d.test_per_class == 0 {
            return bad("data.shots, data.train_per_class and data.test_per_class must be at least 1".into());
        }
        if !(d.sigma >= 0.0 && d.sigma.is_finite()) {
            return bad(format!("data.sigma must be finite and >= 0, got {}", d.sigma));
        }
        if d.domains == 0 {
            return bad("data.domains must be at least 1".into());
        }
        if d.novel_classes == 0 {
            return bad("data.novel_classes must be at least 1 (the novel split needs samples)".into());
        }
        match d.partition {
            PartitionSettings::Pathological { classes_per_client } => {
                if classes_per_client == 0 {
                    return bad("partition.classes_per_client must be at least 1".into());
                }
                let need = f.clients * classes_per_client + d.novel_classes;
                if need > d.classes {
                    return bad(format!(
                        "pathological partition infeasible: federation.clients ({}) x classes_per_client ({classes_per_client}) + data.novel_classes ({}) = {need} exceeds data.classes ({})",
                        f.clients, d.novel_classes, d.classes
                    ));
                }
                if f.clients < 2 {
                    return bad("pathological partition needs at least 2 clients so the base split is non-empty".into());
                }
            }
            PartitionSettings::Dirichlet { beta } => {
                if !(beta > 0.0 && beta.is_finite()) {
                    return bad(format!("partition.beta must be positive, got {beta}"));
                }
                if d.novel_classes >= d.classes {
                    return bad("data.novel_classes must leave at least one base class".into());
                }
            }
        }
        if self.pretrain.steps > 0 && (self.pretrain.batch < 2 || !(self.pretrain.lr > 0.0) || d.pretrain_per_class == 0) {
            return bad("pretraining needs batch >= 2, lr > 0 and pretrain_per_class >= 1".into());
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds must list at least one seed".into());
        }
        if self.eval.every == 0 {
            return bad("eval.every must be at least 1".into());
        }
        Ok(())
    }
}
