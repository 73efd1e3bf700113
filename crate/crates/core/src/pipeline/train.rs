//! The iterative pseudo-labeling loop. This module sees only what the agents
//! share at run time: point clouds, poses and agent extents.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::RunWriter;
use super::config::PipelineConfig;
use crate::ccl::{
    bev_rasterize, consensus_labels, footprint_discrepancy, unmatched_valid_set, visibility_mask,
};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::geometry::{nms, Box3D, Proposal, ProposalSet, View};
use crate::pps::{dynamic_lambda, dynamic_tau, stabilize_with_tau, MemoryBank};
use crate::ppf::{ppf_filter, split_by_confidence, train_ppf, PpfClassifier, SelfSupSets};
use crate::rng::{self, Stream};
use crate::scenesim::{fuse_to_ego, Frame};
use crate::weakdet::{
    fit_detector, initialize_detector, propose, propose_all, DetectorModel, Guidance, Observation,
};

/// Scores pseudo labels of one view; implemented outside the training path.
pub trait LabelEvaluator: Sync {
    fn evaluate(&self, view: View, sets: &[ProposalSet]) -> EvalReport;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub tau: f64,
    pub lambda: f64,
    pub multi_labels: usize,
    pub ego_labels: usize,
    /// Unmatched multi-view proposals admitted into the ego labels.
    pub consensus_added: usize,
    pub multi: Option<EvalReport>,
    pub ego: Option<EvalReport>,
    pub multi_loss: Vec<f64>,
    pub ego_loss: Vec<f64>,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub initial_multi: DetectorModel,
    pub initial_ego: DetectorModel,
    pub multi: DetectorModel,
    pub ego: DetectorModel,
    pub ppf: Option<PpfClassifier>,
    pub bank: MemoryBank,
    pub reports: Vec<IterationReport>,
    /// Pseudo labels of the last iteration.
    pub multi_labels: Vec<ProposalSet>,
    pub ego_labels: Vec<ProposalSet>,
}

/// Detector inputs of both views, one entry per frame.
#[derive(Debug, Clone)]
pub struct Views {
    pub multi: Vec<Observation>,
    pub ego: Vec<Observation>,
}

pub fn build_observations(frames: &[Frame], sensor_height: f64) -> Views {
    let (multi, ego) = frames
        .par_iter()
        .map(|f| {
            let sensors = f.sensor_origins(sensor_height);
            let m = Observation {
                frame_id: f.frame_id,
                view: View::Multi,
                cloud: fuse_to_ego(f),
                sensors: sensors.clone(),
            };
            let e = Observation {
                frame_id: f.frame_id,
                view: View::Ego,
                cloud: f.ego_cloud().clone(),
                sensors: sensors[..1].to_vec(),
            };
            (m, e)
        })
        .unzip();
    Views { multi, ego }
}

/// Random point dropout, reproducible per (seed, iteration, frame, view).
pub fn augment(obs: &Observation, keep: f64, seed: u64, iteration: usize) -> Observation {
    if keep >= 1.0 {
        return obs.clone();
    }
    let view_tag = match obs.view {
        View::Ego => 0,
        View::Multi => 1,
    };
    let mut rng = rng::stream(
        seed,
        Stream::Augment,
        iteration as u64,
        ((obs.frame_id.0 as u64) << 1) | view_tag,
    );
    let mut cloud = obs.cloud.clone();
    cloud.points.retain(|_| rng.random_bool(keep));
    Observation {
        cloud,
        ..obs.clone()
    }
}

fn timed<T>(timings: &mut Vec<(String, f64)>, stage: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push((stage.to_string(), start.elapsed().as_secs_f64()));
    out
}

/// Per-candidate ego guidance: `mu3` times the masked BEV discrepancy between
/// the ego and fused rasters inside each candidate's footprint.
fn ego_guidance<'a>(cfg: &'a PipelineConfig, views: &'a Views) -> impl Fn(usize, &[Box3D]) -> Vec<f64> + Sync + 'a {
    move |i: usize, boxes: &[Box3D]| {
        if boxes.is_empty() || cfg.loss.mu3 == 0.0 {
            return vec![0.0; boxes.len()];
        }
        let f_e = bev_rasterize(&views.ego[i].cloud, &cfg.bev);
        let f_m = bev_rasterize(&views.multi[i].cloud, &cfg.bev);
        let mask = visibility_mask(&f_e, cfg.gamma);
        boxes
            .iter()
            .map(|b| cfg.loss.mu3 * footprint_discrepancy(&f_e, &f_m, &mask, b))
            .collect()
    }
}

/// Starting bank contents per frame: the communicated-agent boxes at
/// confidence 1 plus one filtered and pruned proposal pass of the initial
/// multi-view detector (augmentation draw 0), merged by NMS.
fn initial_bank(
    cfg: &PipelineConfig,
    frames: &[Frame],
    d_m: &DetectorModel,
    views: &Views,
    ppf: Option<&PpfClassifier>,
    tau: f64,
) -> MemoryBank {
    let entries: Vec<ProposalSet> = frames
        .par_iter()
        .zip(&views.multi)
        .map(|(f, o)| {
            let aug = augment(o, cfg.augment_keep, cfg.seed, 0);
            let p0 = propose(d_m, &aug);
            let p0 = match ppf {
                Some(clf) => ppf_filter(clf, &p0, &o.cloud),
                None => p0,
            };
            let mut items: Vec<Proposal> =
                f.positional_priors().into_iter().map(|b| Proposal::new(b, 1.0)).collect();
            items.extend(p0.items.into_iter().filter(|p| p.confidence >= tau));
            nms(&ProposalSet::new(f.frame_id, View::Multi, items), cfg.eta)
        })
        .collect();
    let mut bank = MemoryBank::new();
    for e in entries {
        bank.insert(e.frame_id, e.items);
    }
    bank
}

/// Initializes both detectors from the communicated-agent boxes of every
/// frame.
pub fn initialize(cfg: &PipelineConfig, frames: &[Frame], views: &Views) -> Result<(DetectorModel, DetectorModel)> {
    let priors: Vec<Vec<Box3D>> = frames.iter().map(Frame::positional_priors).collect();
    let base = cfg.base_detector();
    let fit = cfg.fit_settings();
    let (m, e) = rayon::join(
        || initialize_detector(&base, &views.multi, &priors, &cfg.loss, &fit, &cfg.init, cfg.seed),
        || initialize_detector(&base, &views.ego, &priors, &cfg.loss, &fit, &cfg.init, cfg.seed ^ 1),
    );
    Ok((m?, e?))
}

/// Runs the full refinement loop over `frames`.
///
/// Per iteration: propose on dropout-augmented clouds, train the purifying
/// filter once at the first iteration, filter both views, stabilize the
/// multi-view labels against the bank (seeded at the first iteration, see
/// [`initial_bank`]), build consensus ego labels, persist the labels, refit
/// both detectors on the same augmented clouds and record the report. Disabled
/// stages pass their input through NMS unchanged.
pub fn run_training(
    cfg: &PipelineConfig,
    frames: &[Frame],
    evaluator: Option<&dyn LabelEvaluator>,
) -> Result<TrainingOutcome> {
    train_loop(cfg, frames, evaluator, false)
}

/// Continues the run in `cfg.output_dir` after its last completed iteration,
/// or starts it when none completed. The saved config must match `cfg` except
/// for `output_dir` and, when the schedule does not depend on it, `iterations`.
pub fn resume_training(
    cfg: &PipelineConfig,
    frames: &[Frame],
    evaluator: Option<&dyn LabelEvaluator>,
) -> Result<TrainingOutcome> {
    train_loop(cfg, frames, evaluator, true)
}

/// Mutable loop state, restorable from a run directory.
struct LoopState {
    initial_multi: DetectorModel,
    initial_ego: DetectorModel,
    d_m: DetectorModel,
    d_e: DetectorModel,
    ppf: Option<PpfClassifier>,
    bank: MemoryBank,
    reports: Vec<IterationReport>,
    last: (Vec<ProposalSet>, Vec<ProposalSet>),
}

fn restore(w: &RunWriter, cfg: &PipelineConfig, frames: &[Frame], completed: usize) -> Result<LoopState> {
    // Only the iteration count may change, and only when the schedule does not
    // move with it (explicit midpoints). The directory itself may have moved.
    let mut saved = w.read_config()?;
    let schedule_kept = saved.schedule_params() == cfg.schedule_params();
    saved.iterations = cfg.iterations;
    saved.output_dir.clone_from(&cfg.output_dir);
    if !schedule_kept || saved.to_toml_string() != cfg.to_toml_string() {
        return Err(Error::Config(format!(
            "config differs from the run in {}; start a fresh run instead",
            w.dir().display()
        )));
    }
    if cfg.iterations < completed {
        return Err(Error::Config(format!(
            "{} already holds {completed} iterations",
            w.dir().display()
        )));
    }
    w.write_config(cfg)?;
    w.truncate_logs(completed)?;
    let (m, e) = w.read_pseudo_labels(completed)?;
    let by_frame = |sets: Vec<ProposalSet>, view: View| -> Vec<ProposalSet> {
        frames
            .iter()
            .map(|f| {
                sets.iter()
                    .find(|s| s.frame_id == f.frame_id)
                    .cloned()
                    .unwrap_or_else(|| ProposalSet::empty(f.frame_id, view))
            })
            .collect()
    };
    Ok(LoopState {
        initial_multi: w.read_detector("initial_multi")?,
        initial_ego: w.read_detector("initial_ego")?,
        d_m: w.read_detector("multi")?,
        d_e: w.read_detector("ego")?,
        ppf: w.read_ppf()?,
        bank: if cfg.toggles.pps { w.read_bank()? } else { MemoryBank::new() },
        reports: w.read_reports(completed)?,
        last: (by_frame(m, View::Multi), by_frame(e, View::Ego)),
    })
}

fn train_loop(
    cfg: &PipelineConfig,
    frames: &[Frame],
    evaluator: Option<&dyn LabelEvaluator>,
    resume: bool,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidInput("no frames to train on".into()));
    }
    let views = build_observations(frames, cfg.scene.sensor_height);
    let completed = match (resume, cfg.output_dir.as_deref()) {
        (true, Some(dir)) => RunWriter::open(dir).read_progress()?,
        (true, None) => return Err(Error::Config("resuming needs output_dir".into())),
        (false, _) => 0,
    };
    let (writer, mut st) = match cfg.output_dir.as_deref() {
        Some(dir) if completed > 0 => {
            let w = RunWriter::open(dir);
            let st = restore(&w, cfg, frames, completed)?;
            log::info!("resuming {} after iteration {completed}", dir.display());
            (Some(w), st)
        }
        _ => {
            let writer = cfg.output_dir.as_deref().map(RunWriter::create).transpose()?;
            let (initial_multi, initial_ego) = initialize(cfg, frames, &views)?;
            if let Some(w) = &writer {
                w.write_config(cfg)?;
                w.write_initial(&initial_multi, &initial_ego)?;
            }
            let st = LoopState {
                d_m: initial_multi.clone(),
                d_e: initial_ego.clone(),
                initial_multi,
                initial_ego,
                ppf: None,
                bank: MemoryBank::new(),
                reports: Vec::with_capacity(cfg.iterations),
                last: (Vec::new(), Vec::new()),
            };
            (writer, st)
        }
    };

    let schedule = cfg.schedule_params();
    let fit = cfg.fit_settings();
    let guidance = ego_guidance(cfg, &views);

    for t in completed + 1..=cfg.iterations {
        let mut timings = Vec::new();
        let ti = t as i64;
        let (aug_m, aug_e): (Vec<Observation>, Vec<Observation>) = views
            .multi
            .par_iter()
            .zip(&views.ego)
            .map(|(m, e)| (augment(m, cfg.augment_keep, cfg.seed, t), augment(e, cfg.augment_keep, cfg.seed, t)))
            .unzip();
        let (p_m, p_e) = timed(&mut timings, "propose", || {
            (propose_all(&st.d_m, &aug_m), propose_all(&st.d_e, &aug_e))
        });

        if cfg.toggles.ppf && st.ppf.is_none() {
            let clf = timed(&mut timings, "ppf_train", || -> Result<PpfClassifier> {
                let parts = p_m
                    .par_iter()
                    .zip(&views.multi)
                    .map(|(p, o)| split_by_confidence(p, &o.cloud, cfg.ppf.c_low, cfg.ppf.c_high))
                    .collect::<Result<Vec<SelfSupSets>>>()?;
                let mut sets = SelfSupSets::default();
                parts.into_iter().for_each(|s| sets.extend(s));
                train_ppf(&sets, cfg.ppf.epochs, cfg.ppf.step)
            })
            .map_err(|e| e.in_stage("ppf training; widen ppf.c_low/ppf.c_high or disable toggles.ppf"))?;
            if let Some(w) = &writer {
                w.write_ppf(&clf)?;
            }
            st.ppf = Some(clf);
        }
        let active_ppf = st.ppf.as_ref().filter(|_| cfg.toggles.ppf);
        let (f_m, f_e): (Vec<ProposalSet>, Vec<ProposalSet>) = timed(&mut timings, "ppf_filter", || match active_ppf {
            Some(clf) => (
                p_m.par_iter().zip(&views.multi).map(|(p, o)| ppf_filter(clf, p, &o.cloud)).collect(),
                p_e.par_iter().zip(&views.ego).map(|(p, o)| ppf_filter(clf, p, &o.cloud)).collect(),
            ),
            None => (p_m.clone(), p_e.clone()),
        });

        let tau = cfg.schedule.fixed_tau.unwrap_or_else(|| dynamic_tau(ti, &schedule));
        let lambda = dynamic_lambda(ti, &schedule);
        if t == 1 && cfg.toggles.pps {
            st.bank = timed(&mut timings, "bank_init", || {
                initial_bank(cfg, frames, &st.d_m, &views, active_ppf, tau)
            });
        }
        let hat_m: Vec<ProposalSet> = timed(&mut timings, "pps", || {
            if cfg.toggles.pps {
                let out: Vec<_> = f_m
                    .par_iter()
                    .map(|p| stabilize_with_tau(p, st.bank.get(p.frame_id), ti, tau, &schedule, cfg.eta))
                    .collect();
                out.into_iter()
                    .map(|s| {
                        st.bank.insert(s.labels.frame_id, s.stored);
                        s.labels
                    })
                    .collect()
            } else {
                f_m.par_iter().map(|p| nms(p, cfg.eta)).collect()
            }
        });

        let (hat_e, consensus_added) = timed(&mut timings, "ccl", || {
            if cfg.toggles.ccl {
                let out: Vec<(ProposalSet, usize)> = f_e
                    .par_iter()
                    .zip(&f_m)
                    .zip(&views.ego)
                    .map(|((pe, pm), o)| {
                        let u = unmatched_valid_set(pe, pm, &o.cloud, cfg.eta_ccl, cfg.rho);
                        let n = u.len();
                        (consensus_labels(pe, &u, cfg.eta_ccl), n)
                    })
                    .collect();
                let added = out.iter().map(|o| o.1).sum();
                (out.into_iter().map(|o| o.0).collect::<Vec<_>>(), added)
            } else {
                (f_e.par_iter().map(|p| nms(p, cfg.eta_ccl)).collect(), 0)
            }
        });

        let (multi, ego) = match evaluator {
            Some(ev) => timed(&mut timings, "evaluate", || {
                let (m, e) = rayon::join(|| ev.evaluate(View::Multi, &hat_m), || ev.evaluate(View::Ego, &hat_e));
                (Some(m), Some(e))
            }),
            None => (None, None),
        };
        let mut report = IterationReport {
            iteration: t,
            tau,
            lambda,
            multi_labels: hat_m.iter().map(ProposalSet::len).sum(),
            ego_labels: hat_e.iter().map(ProposalSet::len).sum(),
            consensus_added,
            multi,
            ego,
            multi_loss: Vec::new(),
            ego_loss: Vec::new(),
            timings,
        };
        if let Some(w) = &writer {
            w.write_pseudo_labels(t, &hat_m, &hat_e)?;
        }

        let start = Instant::now();
        let g: &Guidance<'_> = &guidance;
        let (om, oe) = rayon::join(
            || fit_detector(&st.d_m, &hat_m, &aug_m, &cfg.loss, &fit, None),
            || fit_detector(&st.d_e, &hat_e, &aug_e, &cfg.loss, &fit, cfg.toggles.ccl.then_some(g)),
        );
        let om = om.map_err(|e| e.in_stage("multi-view detector fit"))?;
        let oe = oe.map_err(|e| e.in_stage("ego detector fit"))?;
        report.timings.push(("fit".into(), start.elapsed().as_secs_f64()));
        log::info!(
            "iteration {t}: tau {tau:.4} lambda {lambda:.4}, {} multi / {} ego labels, matched {}/{} and {}/{}",
            report.multi_labels,
            report.ego_labels,
            om.matched,
            om.candidates,
            oe.matched,
            oe.candidates
        );
        st.d_m = om.model;
        st.d_e = oe.model;
        report.multi_loss = om.loss_trace;
        report.ego_loss = oe.loss_trace;
        if let Some(w) = &writer {
            w.append_report(&report)?;
            w.write_detectors(&st.d_m, &st.d_e)?;
            if cfg.toggles.pps {
                w.write_bank(&st.bank)?;
            }
            w.write_progress(t)?;
        }
        st.reports.push(report);
        st.last = (hat_m, hat_e);
    }

    Ok(TrainingOutcome {
        initial_multi: st.initial_multi,
        initial_ego: st.initial_ego,
        multi: st.d_m,
        ego: st.d_e,
        ppf: st.ppf,
        bank: st.bank,
        reports: st.reports,
        multi_labels: st.last.0,
        ego_labels: st.last.1,
    })
}
