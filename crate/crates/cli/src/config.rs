use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatlift::ablation::AblationConfig;
use splatlift::camera::{make_canonical_rig, CameraIntrinsics, CanonicalRig, PerturbationSpec};
use splatlift::datagen::Fidelity;
use splatlift::fit::FitConfig;
use splatlift::lrm::{LrmConfig, TrainConfig};
use splatlift::{Error, Result};

/// Everything a run needs. Loaded from TOML or JSON (by extension), then
/// overridden by command-line flags; the resolved value is written next to
/// the outputs and can be fed back through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed of the corpus generator.
    pub seed: u64,
    pub threads: Option<usize>,
    pub inputs: Inputs,
    pub data: DataConfig,
    pub fit: FitConfig,
    pub lrm: LrmConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            seed: 0,
            threads: None,
            inputs: Inputs::default(),
            lrm: LrmConfig {
                image_size: data.image_size,
                views: data.rig_views,
                ..LrmConfig::default()
            },
            data,
            fit: FitConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Paths and names the subcommands read from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    /// Corpus root written by `gen-data`.
    pub data: Option<PathBuf>,
    pub subject: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub ply: Option<PathBuf>,
    pub camera: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub subjects: usize,
    pub fidelity: Fidelity,
    pub gaussians: usize,
    pub image_size: usize,
    pub fov_deg: f64,
    pub rig_views: usize,
    pub rig_radius: f64,
    pub rig_elevation: f64,
    pub perturbation: PerturbationSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            subjects: 200,
            fidelity: Fidelity::High,
            gaussians: 2000,
            image_size: 64,
            fov_deg: 40.0,
            rig_views: 8,
            rig_radius: 2.6,
            rig_elevation: 0.0,
            perturbation: PerturbationSpec::handheld(2.6, 0),
        }
    }
}

impl DataConfig {
    pub fn rig(&self) -> Result<CanonicalRig> {
        let k = CameraIntrinsics::from_fov(self.image_size, self.image_size, self.fov_deg)?;
        make_canonical_rig(self.rig_views, self.rig_radius, self.rig_elevation, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// The last `test_subjects` corpus subjects are held out of training and
    /// scored by `eval`.
    pub test_subjects: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { test_subjects: 20 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
        }
    }

    /// `--seed` replaces the global seed and every module seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.perturbation.seed = seed;
        self.fit.seed = seed;
        self.lrm.seed = seed;
        self.train.seed = seed;
        self.ablation.seed = seed;
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}
