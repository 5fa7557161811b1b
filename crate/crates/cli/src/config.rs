use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use strokeseg_core::fusion::{ClassifierParams, FusionParams};
use strokeseg_core::model::ModelConfig;
use strokeseg_core::phantom::ClassMix;
use strokeseg_core::train::TrainConfig;
use strokeseg_core::volume::{Dims, Projection};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub runs: PathBuf,
    pub predictions: PathBuf,
    pub fused: PathBuf,
    pub metrics: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            runs: "runs".into(),
            predictions: "predictions".into(),
            fused: "fused".into(),
            metrics: "metrics.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub count: usize,
    pub mix: ClassMix,
    pub val_fraction: f64,
    pub dims: Dims,
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            count: 60,
            mix: ClassMix::default(),
            val_fraction: 0.2,
            dims: [64, 64, 64],
            noise_sigma: 2.0,
        }
    }
}

/// How many seeds to train for one view and how many of the best to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEnsemble {
    pub seeds: usize,
    pub keep: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub axial: ViewEnsemble,
    pub coronal: ViewEnsemble,
    pub sagittal: ViewEnsemble,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            axial: ViewEnsemble { seeds: 6, keep: 3 },
            coronal: ViewEnsemble { seeds: 2, keep: 2 },
            sagittal: ViewEnsemble { seeds: 2, keep: 2 },
        }
    }
}

impl EnsembleConfig {
    pub fn get(&self, p: Projection) -> ViewEnsemble {
        match p {
            Projection::Axial => self.axial,
            Projection::Coronal => self.coronal,
            Projection::Sagittal => self.sagittal,
        }
    }
}

/// Everything a pipeline run needs, as one JSON document.
///
/// `seed` seeds the phantom dataset. Training run `i` of a view uses
/// `train.seed + i` for both its step streams and its initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub fusion: FusionParams,
    pub classifier: ClassifierParams,
    /// Slices per forward pass during prediction.
    pub predict_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            phantom: PhantomConfig::default(),
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            fusion: FusionParams::default(),
            classifier: ClassifierParams::default(),
            predict_batch: 16,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        self.classifier.validate()?;
        self.phantom.mix.validate()?;
        if !(0.0..1.0).contains(&self.phantom.val_fraction) {
            return Err(Failure::usage(format!(
                "phantom.val_fraction {} must lie in [0, 1)",
                self.phantom.val_fraction
            )));
        }
        for p in Projection::ALL {
            let e = self.ensemble.get(p);
            if e.keep == 0 || e.keep > e.seeds {
                return Err(Failure::usage(format!(
                    "ensemble.{}: need 1 <= keep <= seeds, got keep {} of {}",
                    p.name(),
                    e.keep,
                    e.seeds
                )));
            }
        }
        if self.predict_batch == 0 {
            return Err(Failure::usage("predict_batch must be positive"));
        }
        Ok(())
    }
}
