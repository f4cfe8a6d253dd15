use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::region::default_lambda;
use crate::synth::SceneSpec;

/// Entropy threshold: derived from the class count, or fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum LambdaSetting {
    #[default]
    Auto,
    Value(f64),
}

impl LambdaSetting {
    pub fn resolve(self, classes: usize) -> Result<f64> {
        match self {
            LambdaSetting::Auto => default_lambda(classes),
            LambdaSetting::Value(v) => Ok(v),
        }
    }
}

impl Serialize for LambdaSetting {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaSetting::Auto => s.serialize_str("auto"),
            LambdaSetting::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(LambdaSetting::Value(v)),
            Raw::Text(t) if t == "auto" => Ok(LambdaSetting::Auto),
            Raw::Text(t) => Err(de::Error::custom(format!("lambda must be a number or \"auto\", got {t:?}"))),
        }
    }
}

/// Population labelled `[a; 0]` in the CRA discriminator loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceSlot {
    /// Trusted pixels of the target batch.
    #[default]
    TrustedTarget,
    /// Experimental: genuine source-domain pixels.
    SourceDomain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; not part of the config hash.
    pub root: PathBuf,
    pub scene: SceneSpec,
    pub source_train: usize,
    pub target_train: usize,
    pub target_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            scene: SceneSpec::default(),
            source_train: 200,
            target_train: 200,
            target_eval: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudget {
    pub iterations: usize,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Base rate for `G`; losses are pixel sums, not means.
    pub sgd_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            sgd_lr: 2e-5,
            momentum: 0.9,
            weight_decay: 1e-4,
            adam_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            poly_power: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Supervised source loss, in the source and CDA stages.
    pub seg: f64,
    /// Feature-level adversarial loss of the CDA stage.
    pub cda_adv: f64,
    pub cda_disc: f64,
    /// Pseudo-label loss on trusted pixels.
    pub cra_seg: f64,
    pub cra_adv: f64,
    pub cra_disc: f64,
    pub entropy_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            cda_adv: 0.01,
            cda_disc: 1.0,
            cra_seg: 1.0,
            cra_adv: 1.0,
            cra_disc: 1.0,
            entropy_min: 1.0,
        }
    }
}

/// One experiment. Every field has a default, so `{}` is a complete config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub source: StageBudget,
    pub cda: StageBudget,
    /// Also the budget of each comparison variant.
    pub cra: StageBudget,
    /// Square training crop side; `None` trains on whole images.
    pub crop: Option<usize>,
    pub optim: OptimConfig,
    pub lambda: LambdaSetting,
    pub temperature: f64,
    pub weights: LossWeights,
    pub cra_source_slot: SourceSlot,
    /// Run directory; not part of the config hash.
    pub output_dir: PathBuf,
    pub log_interval: usize,
    /// Iterations between mid-stage evaluations; 0 evaluates at stage ends only.
    pub eval_interval: usize,
    /// Iterations between resumable snapshots; 0 disables them.
    pub checkpoint_interval: usize,
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            model: ModelSpec::default(),
            source: StageBudget {
                iterations: 2000,
                batch: 4,
            },
            cda: StageBudget {
                iterations: 2000,
                batch: 4,
            },
            cra: StageBudget {
                iterations: 4000,
                batch: 4,
            },
            crop: Some(32),
            optim: OptimConfig::default(),
            lambda: LambdaSetting::Auto,
            temperature: 1.0,
            weights: LossWeights::default(),
            cra_source_slot: SourceSlot::TrustedTarget,
            output_dir: PathBuf::from("runs/default"),
            log_interval: 50,
            eval_interval: 0,
            checkpoint_interval: 500,
            eval_batch: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn classes(&self) -> usize {
        self.data.scene.classes
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.model.validate()?;
        for (name, b) in [("source", self.source), ("cda", self.cda), ("cra", self.cra)] {
            if b.iterations == 0 || b.batch == 0 {
                return Err(Error::Config(format!("{name}: iterations and batch must be positive")));
            }
        }
        if self.data.source_train == 0 || self.data.target_train == 0 || self.data.target_eval == 0 {
            return Err(Error::Config("every data split needs at least one image".into()));
        }
        if let Some(c) = self.crop {
            if c == 0 || c > self.data.scene.height || c > self.data.scene.width {
                return Err(Error::Config(format!("crop {c} does not fit the images")));
            }
        }
        if let LambdaSetting::Value(v) = self.lambda {
            if !(v > 0.0) {
                return Err(Error::Config(format!("lambda must be > 0, got {v}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        let o = &self.optim;
        let rates = [o.sgd_lr, o.adam_lr, o.eps, o.poly_power];
        if rates.iter().any(|&v| !(v > 0.0)) || !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        let w = &self.weights;
        let all = [w.seg, w.cda_adv, w.cda_disc, w.cra_seg, w.cra_adv, w.cra_disc, w.entropy_min];
        if all.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.log_interval == 0 || self.eval_batch == 0 {
            return Err(Error::Config("log_interval and eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// The config with `lambda` replaced by its numeric value.
    pub fn resolved(&self) -> Result<RunConfig> {
        Ok(RunConfig {
            lambda: LambdaSetting::Value(self.lambda.resolve(self.classes())?),
            ..self.clone()
        })
    }

    pub fn lambda_value(&self) -> Result<f64> {
        self.lambda.resolve(self.classes())
    }

    /// Resolved config as JSON, echoed into every report.
    pub fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self.resolved()?)?)
    }

    /// First 16 hex digits of SHA-256 over the resolved config with the
    /// directory fields removed. Keys serialize in sorted order.
    pub fn hash(&self) -> Result<String> {
        let mut v = self.echo()?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
            if let Some(data) = obj.get_mut("data").and_then(|d| d.as_object_mut()) {
                data.remove("root");
            }
        }
        let digest = Sha256::digest(serde_json::to_string(&v)?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }
}
