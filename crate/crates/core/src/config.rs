//! TOML tool configuration.
//!
//! Every section rejects unknown keys. Class references in the `synth`
//! section are by name and must exist in the taxonomy.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::geometry::ProjectionConfig;
use crate::losses::{BackgroundSource, CeMode, FinetuneLoss, KdMode};
use crate::model::{ArchConfig, Freeze, LrDecay};
use crate::protocol::{StageConfig, TrainConfig};
use crate::synth::{CorpusConfig, Sensor, StreetClasses};
use crate::taxonomy::{ClassDef, Taxonomy, DEFAULT_FREQUENCY_FLOOR};

/// Built-in configuration for the synthetic street corpus.
pub const SYNTHETIC_TOML: &str = include_str!("../configs/synthetic.toml");
/// Built-in configuration for SemanticKITTI.
pub const SEMANTIC_KITTI_TOML: &str = include_str!("../configs/semantic_kitti.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSection {
    pub width: usize,
    pub height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySection {
    #[serde(default)]
    pub ignore_raw_ids: Vec<u32>,
    pub classes: Vec<ClassDef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    Multiplicative,
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub momentum: f64,
    /// Per-epoch learning-rate decay amount.
    pub decay: f64,
    pub decay_mode: DecayMode,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: 0.01,
            momentum: 0.9,
            decay: 0.01,
            decay_mode: DecayMode::Multiplicative,
            batch_size: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSection {
    pub epochs: usize,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    /// Shots per novel class.
    pub shots: usize,
    pub freeze: Freeze,
    pub ce: CeMode,
    #[serde(default)]
    pub ce_background: BackgroundSource,
    pub kd: KdMode,
    pub lovasz: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub frequency_floor: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        WeightsSection {
            frequency_floor: DEFAULT_FREQUENCY_FLOOR,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClassNames {
    pub ground: String,
    pub building: String,
    pub pole: String,
    pub car: String,
    pub person: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub base_frames: usize,
    pub shot_pool_frames: usize,
    pub eval_frames: usize,
    pub sensor: Sensor,
    pub classes: SynthClassNames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    pub seed: u64,
    pub projection: ProjectionSection,
    pub taxonomy: TaxonomySection,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub base: BaseSection,
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub eval: EvalOptions,
    pub synth: Option<SynthSection>,
}

impl ToolConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ToolConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn synthetic() -> Self {
        Self::from_toml(SYNTHETIC_TOML).expect("built-in synthetic config is valid")
    }

    pub fn semantic_kitti() -> Self {
        Self::from_toml(SEMANTIC_KITTI_TOML).expect("built-in SemanticKITTI config is valid")
    }

    /// Canonical TOML of the resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.projection_config()?;
        let tax = self.taxonomy()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.momentum) || o.batch_size == 0 {
            return Err(Error::Config(
                "optimizer: need lr >= 0, momentum in [0, 1), batch_size >= 1".into(),
            ));
        }
        if !(o.decay >= 0.0 && o.decay < 1.0) {
            return Err(Error::Config("optimizer.decay must be in [0, 1)".into()));
        }
        if !(self.weights.frequency_floor > 0.0) {
            return Err(Error::Config(
                "weights.frequency_floor must be positive".into(),
            ));
        }
        if [self.base.batch_size, self.finetune.batch_size].contains(&Some(0)) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.finetune_loss().any_enabled() {
            return Err(Error::Config("finetune: no loss terms enabled".into()));
        }
        if let Some(s) = &self.synth {
            self.street_classes(s, &tax)?;
        }
        Ok(())
    }

    pub fn projection_config(&self) -> Result<ProjectionConfig> {
        let p = &self.projection;
        ProjectionConfig::from_degrees(p.width, p.height, p.fov_up_deg, p.fov_down_deg)
            .map_err(|e| Error::Config(format!("projection: {e}")))
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::new(&self.taxonomy.classes, &self.taxonomy.ignore_raw_ids)
            .map_err(|e| Error::Config(format!("taxonomy: {e}")))
    }

    fn decay(&self) -> LrDecay {
        match self.optimizer.decay_mode {
            DecayMode::Multiplicative => LrDecay::Multiplicative(self.optimizer.decay),
            DecayMode::Additive => LrDecay::Additive(self.optimizer.decay),
        }
    }

    pub fn finetune_loss(&self) -> FinetuneLoss {
        FinetuneLoss {
            ce: self.finetune.ce,
            ce_background: self.finetune.ce_background,
            kd: self.finetune.kd,
            lovasz: self.finetune.lovasz,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let o = &self.optimizer;
        let stage = |epochs, lr: Option<f64>, batch: Option<usize>, freeze| StageConfig {
            epochs,
            lr: lr.unwrap_or(o.lr),
            momentum: o.momentum,
            decay: self.decay(),
            batch_size: batch.unwrap_or(o.batch_size),
            freeze,
        };
        Ok(TrainConfig {
            seed: self.seed,
            arch: self.model,
            projection: self.projection_config()?,
            base: stage(
                self.base.epochs,
                self.base.lr,
                self.base.batch_size,
                Freeze::None,
            ),
            finetune: stage(
                self.finetune.epochs,
                self.finetune.lr,
                self.finetune.batch_size,
                self.finetune.freeze,
            ),
            finetune_loss: self.finetune_loss(),
            frequency_floor: self.weights.frequency_floor,
        })
    }

    fn street_classes(&self, s: &SynthSection, tax: &Taxonomy) -> Result<StreetClasses> {
        let find = |key: &str, name: &str| {
            tax.class_by_name(name).ok_or_else(|| {
                Error::Config(format!("synth.classes.{key}: unknown class {name:?}"))
            })
        };
        let c = &s.classes;
        Ok(StreetClasses {
            ground: find("ground", &c.ground)?,
            building: find("building", &c.building)?,
            pole: find("pole", &c.pole)?,
            car: find("car", &c.car)?,
            person: find("person", &c.person)?,
        })
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig> {
        let s = self
            .synth
            .as_ref()
            .ok_or_else(|| Error::Config("missing [synth] section".into()))?;
        Ok(CorpusConfig {
            seed: s.seed,
            base_frames: s.base_frames,
            shot_pool_frames: s.shot_pool_frames,
            eval_frames: s.eval_frames,
            sensor: s.sensor,
            classes: self.street_classes(s, &self.taxonomy()?)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn built_ins_parse() {
        let s = ToolConfig::synthetic();
        assert_eq!(s.optimizer.lr, 0.01);
        assert_eq!(s.optimizer.momentum, 0.9);
        assert!(s.corpus_config().is_ok());
        let k = ToolConfig::semantic_kitti();
        let t = k.taxonomy().unwrap();
        assert_eq!(t.novel().len(), 4);
        assert_eq!(t.base().len(), 15);
        assert_eq!(k.projection.width, 2048);
        assert_eq!(k.projection.height, 64);
    }

    #[test]
    fn round_trip_through_toml() {
        let s = ToolConfig::synthetic();
        assert_eq!(ToolConfig::from_toml(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = SYNTHETIC_TOML.replace("[optimizer]", "[optimizer]\nbogus = 1");
        let err = ToolConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn bad_class_reference() {
        let text = SYNTHETIC_TOML.replace("car = \"car\"", "car = \"truck\"");
        let err = ToolConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("synth.classes.car"), "{err}");
    }
}
