//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{generate_mask, MaskKind, SceneSpec};
use crate::error::{Error, Result};
use crate::optics::{ForwardOperator, SystemSpec};
use crate::refiner::RefinerArch;
use crate::rng::derive_seed;
use crate::solvers::InitialPredictor;
use crate::training::TrainConfig;
use crate::transforms::GroupSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub mask_kind: MaskKind,
    #[serde(default = "SystemConfig::default_probability")]
    pub mask_probability: f64,
    #[serde(default)]
    pub mask_seed: u64,
    pub shift_step: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl SystemConfig {
    fn default_probability() -> f64 {
        0.5
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Template for every scene; scene `k` uses a seed derived from
    /// `scene.rng_seed` and `k`.
    pub scene: SceneSpec,
    pub num_scenes: usize,
    pub system: SystemConfig,
    pub predictor: InitialPredictor,
    pub refiner: RefinerArch,
    #[serde(default)]
    pub group: GroupSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub steps: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.steps {
            self.train.steps = s;
        }
        if let Some(a) = o.alpha {
            self.train.alpha = a;
        }
        if let Some(s) = o.seed {
            self.train.rng_seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        self.validate()?;
        Ok(self)
    }

    /// Shape consistency and per-block invariants. Every failure is a
    /// configuration error.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.scene.validate().map_err(as_config)?;
        self.predictor.validate().map_err(as_config)?;
        self.refiner.validate().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        if self.num_scenes == 0 {
            return Err(Error::Config("num_scenes must be >= 1".into()));
        }
        if self.refiner.bands != self.scene.bands {
            return Err(Error::Config(format!(
                "refiner has {} bands but scenes have {}",
                self.refiner.bands, self.scene.bands
            )));
        }
        let s = &self.system;
        if !(0.0..=1.0).contains(&s.mask_probability) {
            return Err(Error::Config(format!(
                "mask_probability {} not in [0, 1]",
                s.mask_probability
            )));
        }
        if !(s.noise_sigma.is_finite() && s.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma {} is not >= 0", s.noise_sigma)));
        }
        if self.group.elements(self.scene.height, self.scene.width).is_empty() {
            return Err(Error::Config("group has no elements to sample".into()));
        }
        Ok(())
    }

    /// Scene spec with the derived seed of scene `index`.
    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        SceneSpec {
            rng_seed: derive_seed(self.scene.rng_seed, &[index as u64]),
            ..self.scene.clone()
        }
    }

    pub fn scene_id(index: usize) -> String {
        format!("scene_{index:03}")
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let s = &self.system;
        let mask = generate_mask(
            self.scene.height,
            self.scene.width,
            s.mask_kind,
            s.mask_probability,
            s.mask_seed,
        )?;
        SystemSpec::new(mask, s.shift_step, s.noise_sigma)
    }

    pub fn operator(&self) -> Result<ForwardOperator> {
        ForwardOperator::new(self.system_spec()?, self.scene.bands)
    }

    /// Hash of the configuration with the output directory blanked, so the
    /// same experiment written to two places hashes identically.
    pub fn hash_hex(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Seed of the refiner's initial weights.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.train.rng_seed, &[0x1_417])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::solvers::PredictorKind;
    use crate::training::Mode;

    pub(crate) const TOY: &str = r#"{
        "scene": {"height": 12, "width": 12, "bands": 3, "num_blobs": 4, "rng_seed": 1},
        "num_scenes": 3,
        "system": {"mask_kind": "bernoulli", "mask_seed": 5, "shift_step": 1},
        "predictor": {"kind": "adjoint_baseline"},
        "refiner": {"bands": 3, "hidden_channels": 4, "num_res_blocks": 1},
        "train": {"steps": 4, "learning_rate": 0.001},
        "output_dir": "out"
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_json(TOY).unwrap();
        assert_eq!(c.predictor.kind, PredictorKind::AdjointBaseline);
        assert_eq!(c.group, GroupSpec::default());
        assert_eq!(c.train.mode, Mode::SelfSupervised);
        assert_eq!(c.train.alpha, 1.0);
        assert_eq!(c.system.mask_probability, 0.5);
        assert_eq!(c.operator().unwrap().measurement_width(), 14);
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_inconsistent_shapes() {
        let typo = TOY.replace("\"num_scenes\"", "\"num_scene\"");
        assert!(matches!(ExperimentConfig::from_json(&typo), Err(Error::Config(_))));
        let nested = TOY.replace("\"shift_step\": 1", "\"shift_step\": 1, \"shfit\": 2");
        assert!(matches!(ExperimentConfig::from_json(&nested), Err(Error::Config(_))));
        let bands = TOY.replace("\"bands\": 3, \"hidden", "\"bands\": 4, \"hidden");
        assert!(matches!(ExperimentConfig::from_json(&bands), Err(Error::Config(_))));
        let steps = TOY.replace("\"steps\": 4", "\"steps\": 0");
        assert!(matches!(ExperimentConfig::from_json(&steps), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_json("{"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_and_hash() {
        let c = ExperimentConfig::from_json(TOY).unwrap();
        let moved = c
            .clone()
            .with_overrides(&Overrides {
                output_dir: Some("elsewhere".into()),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!(moved.hash_hex(), c.hash_hex());
        let o = Overrides {
            steps: Some(9),
            alpha: Some(0.5),
            seed: Some(3),
            output_dir: None,
        };
        let changed = c.clone().with_overrides(&o).unwrap();
        assert_eq!(
            (changed.train.steps, changed.train.alpha, changed.train.rng_seed),
            (9, 0.5, 3)
        );
        assert_ne!(changed.hash_hex(), c.hash_hex());
        let bad = Overrides {
            alpha: Some(-1.0),
            ..Overrides::default()
        };
        assert!(c.with_overrides(&bad).is_err());
    }
}
