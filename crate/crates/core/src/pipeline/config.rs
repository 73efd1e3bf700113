//! Run configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ccl::BevSpec;
use crate::error::{Error, Result};
use crate::io::read_text;
use crate::pps::ScheduleParams;
use crate::scenesim::SceneConfig;
use crate::weakdet::{DetectorModel, FitSettings, InitSettings, LossWeights};

/// Environment variable that overrides `output_dir`.
pub const OUT_DIR_ENV: &str = "COOPDET_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub ppf: bool,
    pub pps: bool,
    pub ccl: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub const fn all() -> Self {
        Self {
            ppf: true,
            pps: true,
            ccl: true,
        }
    }

    pub const fn none() -> Self {
        Self {
            ppf: false,
            pps: false,
            ccl: false,
        }
    }

    /// Short label such as `ppf+pps`, or `none`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.ppf, "ppf"), (self.pps, "pps"), (self.ccl, "ccl")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub k_tau: f64,
    pub k_lambda: f64,
    /// Defaults to half the number of iterations.
    pub beta_tau: Option<f64>,
    pub beta_lambda: Option<f64>,
    /// Replaces the scheduled threshold with a constant.
    pub fixed_tau: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let p = ScheduleParams::default();
        Self {
            tau_min: p.tau_min,
            tau_max: p.tau_max,
            k_tau: p.k_tau,
            k_lambda: p.k_lambda,
            beta_tau: None,
            beta_lambda: None,
            fixed_tau: None,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self, iterations: usize) -> ScheduleParams {
        let mid = iterations as f64 / 2.0;
        ScheduleParams {
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            k_tau: self.k_tau,
            k_lambda: self.k_lambda,
            beta_tau: self.beta_tau.unwrap_or(mid),
            beta_lambda: self.beta_lambda.unwrap_or(mid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpfSettings {
    pub c_low: f64,
    pub c_high: f64,
    pub epochs: usize,
    pub step: f64,
}

impl Default for PpfSettings {
    fn default() -> Self {
        Self {
            c_low: 0.1,
            c_high: 0.7,
            epochs: 200,
            step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub min_cluster_points: usize,
    pub cluster_cell_size: f64,
    pub ground_threshold: f64,
    pub scorer_step: f64,
    pub box_step: f64,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        let m = DetectorModel::default();
        let f = FitSettings::default();
        Self {
            min_cluster_points: m.min_cluster_points,
            cluster_cell_size: m.cluster_cell_size,
            ground_threshold: m.ground_threshold,
            scorer_step: f.scorer_step,
            box_step: f.box_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Refinement iterations `T`.
    pub iterations: usize,
    /// Detector epochs per iteration `E`.
    pub epochs: usize,
    pub min_confidence: f64,
    /// NMS threshold of the stabilizing fusion.
    pub eta: f64,
    /// NMS threshold of the consensus and the unmatched test.
    pub eta_ccl: f64,
    /// Minimum ego points supporting an unmatched multi-view proposal.
    pub rho: usize,
    /// Visibility threshold on the ego BEV channel mean.
    pub gamma: f64,
    /// Fraction of points kept by the per-iteration dropout; 1 disables it.
    pub augment_keep: f64,
    /// Seed of detector initialization and augmentation.
    pub seed: u64,
    /// Frames of the held-out test scene.
    pub test_frames: usize,
    pub toggles: Toggles,
    pub schedule: ScheduleConfig,
    pub loss: LossWeights,
    pub ppf: PpfSettings,
    pub detector: DetectorSettings,
    pub init: InitSettings,
    pub bev: BevSpec,
    pub scene: SceneConfig,
    /// Load the training scene from this directory instead of generating it.
    pub scene_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            epochs: 10,
            min_confidence: 0.01,
            eta: 0.3,
            eta_ccl: 0.3,
            rho: 5,
            gamma: 1e-3,
            augment_keep: 0.8,
            seed: 0,
            test_frames: 100,
            toggles: Toggles::all(),
            schedule: ScheduleConfig::default(),
            loss: LossWeights::default(),
            ppf: PpfSettings::default(),
            detector: DetectorSettings::default(),
            init: InitSettings::default(),
            bev: BevSpec::default(),
            scene: SceneConfig::default(),
            scene_dir: None,
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_text(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the output-directory environment override.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = Some(PathBuf::from(dir));
        }
        self
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        self.schedule.resolve(self.iterations)
    }

    pub fn base_detector(&self) -> DetectorModel {
        DetectorModel {
            min_cluster_points: self.detector.min_cluster_points,
            cluster_cell_size: self.detector.cluster_cell_size,
            ground_threshold: self.detector.ground_threshold,
            min_confidence: self.min_confidence,
            ..DetectorModel::default()
        }
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            epochs: self.epochs,
            scorer_step: self.detector.scorer_step,
            box_step: self.detector.box_step,
            ..FitSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.iterations == 0 || self.epochs == 0 {
            return fail("iterations and epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.min_confidence) {
            return fail("min_confidence must lie in [0, 1)");
        }
        for (name, v) in [("eta", self.eta), ("eta_ccl", self.eta_ccl)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.gamma >= 0.0) {
            return fail("gamma must be non-negative");
        }
        if !(self.augment_keep > 0.0 && self.augment_keep <= 1.0) {
            return fail("augment_keep must lie in (0, 1]");
        }
        let p = &self.ppf;
        if !(0.0 <= p.c_low && p.c_low < p.c_high && p.c_high <= 1.0) || p.epochs == 0 {
            return fail("ppf needs 0 <= c_low < c_high <= 1 and epochs >= 1");
        }
        if let Some(t) = self.schedule.fixed_tau {
            if !(0.0..=1.0).contains(&t) {
                return fail("fixed_tau must lie in [0, 1]");
            }
        }
        if self.test_frames == 0 {
            return fail("test_frames must be >= 1");
        }
        self.schedule_params().validate()?;
        self.loss.validate()?;
        self.bev.validate()?;
        self.base_detector().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.scene.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let partial = "iterations = 3\n[toggles]\nccl = false\n[scene]\nnum_frames = 7\n";
        let p = PipelineConfig::from_toml_str(partial).unwrap();
        assert_eq!((p.iterations, p.scene.num_frames), (3, 7));
        assert!(p.toggles.ppf && !p.toggles.ccl);
        assert_eq!(p.schedule_params().beta_tau, 1.5);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml_str("iterashuns = 3").is_err());
        assert!(PipelineConfig::from_toml_str("eta = 1.5").is_err());
        assert!(PipelineConfig::from_toml_str("iterations = 0").is_err());
    }

    #[test]
    fn toggle_labels() {
        assert_eq!(Toggles::none().label(), "none");
        assert_eq!(Toggles::all().label(), "ppf+pps+ccl");
    }
}
