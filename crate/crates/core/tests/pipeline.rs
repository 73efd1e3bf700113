use std::fs;
use std::path::Path;

use coopdet::geometry::nms;
use coopdet::pipeline::bench::{benchmark_scenes, GtEvaluator};
use coopdet::pipeline::train::{augment, build_observations, initialize};
use coopdet::pipeline::{resume_training, run_training, PipelineConfig, Toggles};
use coopdet::scenesim::Scene;
use coopdet::weakdet::propose_all;

fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.scene.rng_seed = seed;
    cfg.scene.num_frames = 16;
    cfg.test_frames = 4;
    cfg.iterations = 3;
    cfg.epochs = 3;
    cfg.ppf.epochs = 20;
    cfg
}

fn train_scene(cfg: &PipelineConfig) -> Scene {
    benchmark_scenes(cfg).unwrap().0
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = small_config(4);
    let scene = train_scene(&cfg);
    let ev = GtEvaluator { gt: &scene.ground_truth };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let outcomes: Vec<_> = dirs
        .iter()
        .map(|d| {
            let mut c = cfg.clone();
            c.output_dir = Some(d.path().to_path_buf());
            run_training(&c, &scene.frames, Some(&ev)).unwrap()
        })
        .collect();
    assert_eq!(outcomes[0].multi, outcomes[1].multi);
    assert_eq!(outcomes[0].ego_labels, outcomes[1].ego_labels);
    for f in ["metrics.csv", "memory_bank.csv", "checkpoints/ego.txt", "pseudo_labels/iter_003.csv"] {
        assert_eq!(read(dirs[0].path(), f), read(dirs[1].path(), f), "{f} differs");
    }
}

#[test]
fn different_seeds_give_different_labels() {
    let cfg = small_config(4);
    let scene = train_scene(&cfg);
    let mut other = cfg.clone();
    other.seed = 5;
    let a = run_training(&cfg, &scene.frames, None).unwrap();
    let b = run_training(&other, &scene.frames, None).unwrap();
    assert_ne!(a.multi_labels, b.multi_labels);
}

#[test]
fn components_off_reduce_to_suppressed_proposals() {
    let mut cfg = small_config(2);
    cfg.iterations = 1;
    cfg.toggles = Toggles::none();
    let scene = train_scene(&cfg);
    let out = run_training(&cfg, &scene.frames, None).unwrap();

    let views = build_observations(&scene.frames, cfg.scene.sensor_height);
    let (d_m, d_e) = initialize(&cfg, &scene.frames, &views).unwrap();
    assert_eq!(out.initial_multi, d_m);
    let aug = |obs: &[coopdet::weakdet::Observation]| -> Vec<_> {
        obs.iter().map(|o| augment(o, cfg.augment_keep, cfg.seed, 1)).collect()
    };
    let want_m: Vec<_> = propose_all(&d_m, &aug(&views.multi)).iter().map(|s| nms(s, cfg.eta)).collect();
    let want_e: Vec<_> = propose_all(&d_e, &aug(&views.ego)).iter().map(|s| nms(s, cfg.eta_ccl)).collect();
    assert_eq!(out.multi_labels, want_m);
    assert_eq!(out.ego_labels, want_e);
    assert!(out.ppf.is_none() && out.bank.is_empty());
    assert_eq!(out.reports[0].consensus_added, 0);
}

#[test]
fn extending_a_run_matches_an_uninterrupted_one() {
    let mut cfg = small_config(6);
    // Pin the schedule so that it does not depend on the iteration count.
    cfg.schedule.beta_tau = Some(1.5);
    cfg.schedule.beta_lambda = Some(1.5);
    let scene = train_scene(&cfg);
    let ev = GtEvaluator { gt: &scene.ground_truth };

    let full_dir = tempfile::tempdir().unwrap();
    let mut full = cfg.clone();
    full.output_dir = Some(full_dir.path().to_path_buf());
    let whole = run_training(&full, &scene.frames, Some(&ev)).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut part = cfg.clone();
    part.output_dir = Some(part_dir.path().to_path_buf());
    part.iterations = 2;
    run_training(&part, &scene.frames, Some(&ev)).unwrap();
    part.iterations = 3;
    let resumed = resume_training(&part, &scene.frames, Some(&ev)).unwrap();

    assert_eq!(resumed.reports.len(), 3);
    assert_eq!(resumed.initial_multi, whole.initial_multi);
    assert_eq!(resumed.multi, whole.multi);
    assert_eq!(resumed.ego, whole.ego);
    assert_eq!(resumed.multi_labels, whole.multi_labels);
    assert_eq!(resumed.ego_labels, whole.ego_labels);
    for f in [
        "metrics.csv",
        "memory_bank.csv",
        "checkpoints/ppf.txt",
        "checkpoints/multi.txt",
        "checkpoints/ego.txt",
        "pseudo_labels/iter_003.csv",
    ] {
        assert_eq!(read(full_dir.path(), f), read(part_dir.path(), f), "{f} differs");
    }
    let saved = PipelineConfig::load(&part_dir.path().join("config.toml")).unwrap();
    assert_eq!(saved.iterations, 3);
    let reports = fs::read_to_string(part_dir.path().join("reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 3);
}

#[test]
fn stale_rows_of_an_interrupted_iteration_are_dropped() {
    let mut cfg = small_config(7);
    cfg.iterations = 2;
    let scene = train_scene(&cfg);
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    run_training(&cfg, &scene.frames, None).unwrap();
    let metrics = read(dir.path(), "metrics.csv");
    // An iteration that logged its rows but died before its checkpoints.
    let mut stale = String::from_utf8(metrics.clone()).unwrap();
    stale.push_str("3,multi,0.1,0.5,7,,,,,,,\n");
    fs::write(dir.path().join("metrics.csv"), stale).unwrap();
    resume_training(&cfg, &scene.frames, None).unwrap();
    assert_eq!(read(dir.path(), "metrics.csv"), metrics);
}

#[test]
fn resume_rejects_a_changed_config() {
    let cfg = small_config(1);
    let scene = train_scene(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut c = cfg.clone();
    c.iterations = 2;
    c.output_dir = Some(dir.path().to_path_buf());
    run_training(&c, &scene.frames, None).unwrap();
    c.rho += 1;
    assert!(resume_training(&c, &scene.frames, None).is_err());
    // The default schedule is centered on the run length, so extending moves it.
    c.rho -= 1;
    c.iterations = 3;
    assert!(resume_training(&c, &scene.frames, None).is_err());
    c.iterations = 1;
    assert!(resume_training(&c, &scene.frames, None).is_err());
    let mut no_dir = cfg.clone();
    no_dir.output_dir = None;
    assert!(resume_training(&no_dir, &scene.frames, None).is_err());
}

#[test]
fn resuming_a_finished_run_changes_nothing() {
    let mut cfg = small_config(3);
    cfg.iterations = 2;
    let scene = train_scene(&cfg);
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let first = run_training(&cfg, &scene.frames, None).unwrap();
    let metrics = read(dir.path(), "metrics.csv");
    let again = resume_training(&cfg, &scene.frames, None).unwrap();
    assert_eq!(again.multi, first.multi);
    assert_eq!(again.reports.len(), 2);
    assert_eq!(read(dir.path(), "metrics.csv"), metrics);
}

#[test]
fn empty_input_is_rejected() {
    let cfg = small_config(0);
    assert!(run_training(&cfg, &[], None).is_err());
}

#[test]
fn training_modules_never_touch_ground_truth() {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("src");
    let files = [
        "weakdet/mod.rs",
        "weakdet/fit.rs",
        "weakdet/loss.rs",
        "ppf/mod.rs",
        "ppf/features.rs",
        "pps.rs",
        "ccl.rs",
        "pipeline/train.rs",
    ];
    for f in files {
        let text = fs::read_to_string(src.join(f)).unwrap();
        for needle in ["GroundTruth", "ground_truth", "eval::evaluate"] {
            assert!(!text.contains(needle), "{f} mentions {needle}");
        }
    }
}
