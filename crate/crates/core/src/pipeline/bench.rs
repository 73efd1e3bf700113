//! Benchmark harness: held-out evaluation, ablations, threshold-schedule
//! comparisons and robustness sweeps. Everything here may read ground truth.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Toggles};
use super::train::{build_observations, run_training, LabelEvaluator, TrainingOutcome};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::geometry::{nms, ProposalSet, View};
use crate::io::scene_dir::{read_scene, write_scene};
use crate::rng::{derive_seed, Stream};
use crate::scenesim::{apply_latency, generate_scene, perturb_poses, Frame, GroundTruth, PoseNoise, Scene};
use crate::weakdet::{propose_all, DetectorModel, Observation};

/// Scores pseudo labels of either view against the ego-frame ground truth.
pub struct GtEvaluator<'a> {
    pub gt: &'a GroundTruth,
}

impl LabelEvaluator for GtEvaluator<'_> {
    fn evaluate(&self, _view: View, sets: &[ProposalSet]) -> EvalReport {
        evaluate(sets, self.gt)
    }
}

pub const TRAIN_SUBDIR: &str = "train";
pub const TEST_SUBDIR: &str = "test";

/// Training and held-out scenes: read from the `train` and `test`
/// subdirectories of `cfg.scene_dir` when set, generated otherwise.
pub fn load_benchmark(cfg: &PipelineConfig) -> Result<(Scene, Scene)> {
    match &cfg.scene_dir {
        Some(dir) => Ok((read_scene(&dir.join(TRAIN_SUBDIR))?, read_scene(&dir.join(TEST_SUBDIR))?)),
        None => benchmark_scenes(cfg),
    }
}

pub fn write_benchmark(dir: &Path, train: &Scene, test: &Scene) -> Result<()> {
    write_scene(&dir.join(TRAIN_SUBDIR), train)?;
    write_scene(&dir.join(TEST_SUBDIR), test)
}

/// Training and held-out scenes for `cfg`. The held-out scene uses
/// `test_frames` frames and a seed derived from the training scene's.
pub fn benchmark_scenes(cfg: &PipelineConfig) -> Result<(Scene, Scene)> {
    let train = generate_scene(&cfg.scene)?;
    let mut test_cfg = cfg.scene.clone();
    test_cfg.num_frames = cfg.test_frames;
    test_cfg.rng_seed = derive_seed(cfg.scene.rng_seed, Stream::TestScene, 0);
    Ok((train, generate_scene(&test_cfg)?))
}

/// Proposals of `model` after NMS at `eta`, scored on `frames`.
pub fn evaluate_detector(model: &DetectorModel, obs: &[Observation], gt: &GroundTruth, eta: f64) -> EvalReport {
    let sets: Vec<ProposalSet> = propose_all(model, obs).iter().map(|s| nms(s, eta)).collect();
    evaluate(&sets, gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScores {
    pub multi: EvalReport,
    pub ego: EvalReport,
}

pub fn score_detectors(
    cfg: &PipelineConfig,
    multi: &DetectorModel,
    ego: &DetectorModel,
    frames: &[Frame],
    gt: &GroundTruth,
) -> DetectorScores {
    let views = build_observations(frames, cfg.scene.sensor_height);
    let (m, e) = rayon::join(
        || evaluate_detector(multi, &views.multi, gt, cfg.eta),
        || evaluate_detector(ego, &views.ego, gt, cfg.eta),
    );
    DetectorScores { multi: m, ego: e }
}

/// Result of one training run on the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub toggles: Toggles,
    pub fixed_tau: Option<f64>,
    /// Refined detectors on the held-out scene.
    pub test: DetectorScores,
    /// Initial detectors on the held-out scene.
    pub initial: DetectorScores,
    /// Per-iteration pseudo-label reports on the training scene.
    pub label_multi: Vec<EvalReport>,
    pub label_ego: Vec<EvalReport>,
}

impl VariantResult {
    pub fn label_ap05_multi(&self) -> Vec<f64> {
        self.label_multi.iter().map(|r| r.ap_05).collect()
    }

    pub fn label_ap03_multi(&self) -> Vec<f64> {
        self.label_multi.iter().map(|r| r.ap_03).collect()
    }
}

/// Trains with `cfg` on `train` and scores on `test`.
pub fn run_variant(cfg: &PipelineConfig, label: &str, train: &Scene, test: &Scene) -> Result<(VariantResult, TrainingOutcome)> {
    let ev = GtEvaluator { gt: &train.ground_truth };
    let out = run_training(cfg, &train.frames, Some(&ev))?;
    let test_scores = score_detectors(cfg, &out.multi, &out.ego, &test.frames, &test.ground_truth);
    let initial = score_detectors(cfg, &out.initial_multi, &out.initial_ego, &test.frames, &test.ground_truth);
    let (label_multi, label_ego) = out
        .reports
        .iter()
        .map(|r| (r.multi.clone().expect("evaluator given"), r.ego.clone().expect("evaluator given")))
        .unzip();
    let result = VariantResult {
        label: label.to_string(),
        toggles: cfg.toggles,
        fixed_tau: cfg.schedule.fixed_tau,
        test: test_scores,
        initial,
        label_multi,
        label_ego,
    };
    Ok((result, out))
}

/// Component ablation rows: none, PPF, PPF+PPS, PPF+PPS+CCL.
pub fn ablation_rows() -> Vec<Toggles> {
    vec![
        Toggles::none(),
        Toggles { ppf: true, pps: false, ccl: false },
        Toggles { ppf: true, pps: true, ccl: false },
        Toggles::all(),
    ]
}

fn with_output(cfg: &PipelineConfig, sub: &str) -> PipelineConfig {
    let mut c = cfg.clone();
    c.output_dir = cfg.output_dir.as_ref().map(|d| d.join(sub));
    c
}

pub fn run_ablation(cfg: &PipelineConfig, train: &Scene, test: &Scene) -> Result<Vec<VariantResult>> {
    ablation_rows()
        .into_iter()
        .map(|toggles| {
            let mut c = with_output(cfg, &toggles.label());
            c.toggles = toggles;
            run_variant(&c, &toggles.label(), train, test).map(|r| r.0)
        })
        .collect()
}

/// Full runs with the threshold pinned at `taus`.
pub fn run_fixed_tau(cfg: &PipelineConfig, taus: &[f64], train: &Scene, test: &Scene) -> Result<Vec<VariantResult>> {
    taus.iter()
        .map(|&tau| {
            let label = format!("fixed_tau_{tau}");
            let mut c = with_output(cfg, &label);
            c.schedule.fixed_tau = Some(tau);
            run_variant(&c, &label, train, test).map(|r| r.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub condition: String,
    pub refined: EvalReport,
    pub unrefined: EvalReport,
}

/// Multi-view detectors scored on the held-out scene under clean sharing,
/// pose noise and latency.
pub fn run_robustness(
    cfg: &PipelineConfig,
    refined: &DetectorModel,
    unrefined: &DetectorModel,
    test: &Scene,
    noise: &PoseNoise,
    latency_frames: usize,
) -> Vec<RobustnessRow> {
    let noise_seed = derive_seed(cfg.seed, Stream::PoseNoise, 0);
    let conditions = [
        ("clean".to_string(), test.frames.clone()),
        (format!("pose_noise_{}", noise.sigma_m), perturb_poses(&test.frames, noise, noise_seed)),
        (format!("latency_{latency_frames}"), apply_latency(&test.frames, latency_frames)),
    ];
    conditions
        .into_iter()
        .map(|(condition, frames)| {
            let views = build_observations(&frames, cfg.scene.sensor_height);
            let (r, u) = rayon::join(
                || evaluate_detector(refined, &views.multi, &test.ground_truth, cfg.eta),
                || evaluate_detector(unrefined, &views.multi, &test.ground_truth, cfg.eta),
            );
            RobustnessRow {
                condition,
                refined: r,
                unrefined: u,
            }
        })
        .collect()
}
