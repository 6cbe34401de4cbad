mod common;

use std::fs;

use gwcl_core::data::{make_split, HsiCube};
use gwcl_core::net::MlpParams;
use gwcl_core::pipeline::{
    predict_all, prepare, render_map, run_experiment, run_once, ClassMap, ExperimentSpec, PALETTE,
};
use gwcl_core::trainer::{load_checkpoint, save_checkpoint, Stage, Trainer};
use gwcl_core::TrainConfig;

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.quota = 5;
    cfg.fallback_quota = 5;
    cfg.pretrain_epochs = 50;
    cfg.main_epochs = 40;
    cfg.main_batch = 128;
    cfg
}

#[test]
fn two_class_scene_is_classified_perfectly() {
    let (cube, labels) = common::two_class_scene(1);
    let mut cfg = TrainConfig::default();
    cfg.quota = 5;
    cfg.fallback_quota = 5;
    let prepared = prepare(&cube, labels.clone(), &cfg, None).unwrap();
    let out = run_once(&prepared, &cfg).unwrap();
    assert_eq!(out.report.oa.mean, 1.0);
    assert_eq!(out.report.oa.stddev, 0.0);
    let centroid = common::nearest_centroid(&cube, &labels);
    let agree = centroid.iter().zip(&out.predictions).filter(|(a, b)| a == b).count();
    assert!(agree as f64 >= 0.99 * centroid.len() as f64);
}

#[test]
fn experiment_outputs_are_deterministic_and_cache_sound() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = common::overlap_scene(3);
    let (cube_path, labels_path) = common::write_scene(dir.path(), "scene", &cube, &labels);
    let spec = |out: &str| ExperimentSpec {
        cube_path: cube_path.clone(),
        labels_path: labels_path.clone(),
        config: small_config(),
        repetitions: 2,
        out_dir: dir.path().join(out),
        base_seed: 7,
    };
    let a = run_experiment(&spec("a")).unwrap();
    assert!(a.failures.is_empty());
    assert_eq!(a.reports.iter().map(|r| r.0).collect::<Vec<_>>(), vec![7, 8]);
    let b = run_experiment(&spec("b")).unwrap();
    assert_eq!(a.aggregate, b.aggregate);
    let files = ["metrics_run0.kv", "metrics_run1.kv", "metrics_aggregate.kv", "train_log_run0.csv", "map_run1.png", "split_run0.csv"];
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    for f in files {
        assert_eq!(read("a", f), read("b", f), "{f} differs");
    }
    // second run in the same directory reuses the cache
    let cached = run_experiment(&spec("a")).unwrap();
    assert_eq!(cached.aggregate, a.aggregate);
    fs::remove_dir_all(dir.path().join("a").join("cache")).unwrap();
    let rebuilt = run_experiment(&spec("a")).unwrap();
    assert_eq!(rebuilt.aggregate, a.aggregate);
    assert_eq!(read("a", "metrics_aggregate.kv"), read("b", "metrics_aggregate.kv"));
}

#[test]
fn one_repetition_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = common::two_class_scene(2);
    let (cube_path, labels_path) = common::write_scene(dir.path(), "two", &cube, &labels);
    let out = run_experiment(&ExperimentSpec {
        cube_path,
        labels_path,
        config: small_config(),
        repetitions: 1,
        out_dir: dir.path().join("out"),
        base_seed: 0,
    })
    .unwrap();
    let agg = out.aggregate.unwrap();
    assert_eq!(agg.runs, 1);
    assert_eq!(agg.oa.stddev, 0.0);
    let text = fs::read_to_string(dir.path().join("out/metrics_aggregate.kv")).unwrap();
    assert!(text.contains("oa_std=0.0000000000"));
}

#[test]
fn diverging_repetitions_are_recorded_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = common::two_class_scene(2);
    let (cube_path, labels_path) = common::write_scene(dir.path(), "two", &cube, &labels);
    let mut config = small_config();
    // an absurd learning rate makes every repetition diverge
    config.eta2 = 1e300;
    let out = run_experiment(&ExperimentSpec {
        cube_path,
        labels_path,
        config,
        repetitions: 2,
        out_dir: dir.path().join("out"),
        base_seed: 0,
    });
    let out = out.unwrap();
    assert_eq!(out.failures.iter().map(|f| f.0).collect::<Vec<_>>(), vec![0, 1]);
    assert!(out.failures.iter().all(|f| f.1.contains("diverge")));
    assert!(out.aggregate.is_none());
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let (cube, labels) = common::overlap_scene(4);
    let mut cfg = small_config();
    cfg.main_epochs = 6;
    let prepared = prepare(&cube, labels, &cfg, None).unwrap();
    let idx = prepared.features.indexer().unwrap();
    let split = make_split(&prepared.labels, &idx, cfg.quota, cfg.fallback_quota, cfg.seed).unwrap();
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let c = prepared.labels.num_classes();
    let init = trainer.init_state(prepared.features.input_dim(true), c);
    let pre = trainer.pretrain(&prepared.features, &split, init).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("ckpt");

    let mut saved = false;
    let full = trainer
        .train_main_with(&prepared.features, &prepared.graph, &split, clone_state(&pre, dir.path()), &mut |s| {
            if s.main_epochs_done == 3 {
                save_checkpoint(s, &base)?;
                saved = true;
            }
            Ok(())
        })
        .unwrap();
    assert!(saved);
    let resumed = load_checkpoint(&base).unwrap();
    assert_eq!(resumed.stage, Stage::Main);
    assert_eq!(resumed.main_epochs_done, 3);
    let resumed = trainer.train_main(&prepared.features, &prepared.graph, &split, resumed).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.steps, full.steps);
}

fn clone_state(state: &gwcl_core::trainer::TrainState, dir: &std::path::Path) -> gwcl_core::trainer::TrainState {
    let base = dir.join("clone");
    save_checkpoint(state, &base).unwrap();
    load_checkpoint(&base).unwrap()
}

#[test]
fn stage_flags_leave_state_untouched() {
    let (cube, labels) = common::two_class_scene(5);
    let mut cfg = small_config();
    cfg.skip_stage1 = true;
    cfg.skip_stage2 = true;
    let prepared = prepare(&cube, labels, &cfg, None).unwrap();
    let idx = prepared.features.indexer().unwrap();
    let split = make_split(&prepared.labels, &idx, 5, 5, 0).unwrap();
    let trainer = Trainer::new(cfg).unwrap();
    let init = trainer.init_state(prepared.features.input_dim(true), 2);
    let before = init.params.clone();
    let after = trainer.pretrain(&prepared.features, &split, init).unwrap();
    assert_eq!(after.params, before);
    assert_eq!(after.stage, Stage::Initialized);
    let after = trainer.train_main(&prepared.features, &prepared.graph, &split, after).unwrap();
    assert_eq!(after.params, before);
    assert!(after.history.is_empty());
}

#[test]
fn disabling_both_losses_freezes_parameters() {
    let (cube, labels) = common::two_class_scene(6);
    let mut cfg = small_config();
    cfg.disable_ce = true;
    cfg.disable_gwcl = true;
    cfg.main_epochs = 3;
    let prepared = prepare(&cube, labels, &cfg, None).unwrap();
    let idx = prepared.features.indexer().unwrap();
    let split = make_split(&prepared.labels, &idx, 5, 5, 0).unwrap();
    let trainer = Trainer::new(cfg).unwrap();
    let pre = trainer.pretrain(&prepared.features, &split, trainer.init_state(prepared.features.input_dim(true), 2)).unwrap();
    let before = pre.params.clone();
    let after = trainer.train_main(&prepared.features, &prepared.graph, &split, pre).unwrap();
    assert_eq!(after.params, before);
    assert_eq!(after.epoch_losses, vec![0.0; 3]);
}

#[test]
fn predictions_do_not_depend_on_batch_size() {
    let (cube, labels) = common::overlap_scene(8);
    let cfg = small_config();
    let prepared = prepare(&cube, labels, &cfg, None).unwrap();
    let run = run_once(&prepared, &cfg).unwrap();
    let one = predict_all(&run.state.params, &prepared.features, true, 1).unwrap();
    let many = predict_all(&run.state.params, &prepared.features, true, 4096).unwrap();
    assert_eq!(one, many);
    assert_eq!(one, run.predictions);
}

#[test]
fn zero_network_predicts_first_class() {
    let (cube, labels) = common::two_class_scene(9);
    let prepared = prepare(&cube, labels, &small_config(), None).unwrap();
    let params = MlpParams::zeros(prepared.features.input_dim(true), 4, 2, common::checks::arc_relu());
    let preds = predict_all(&params, &prepared.features, true, 64).unwrap();
    assert!(preds.iter().all(|&p| p == 1));
}

#[test]
fn no_spatial_input_narrows_network() {
    let (cube, labels) = common::two_class_scene(10);
    let mut cfg = small_config();
    cfg.no_spatial_input = true;
    cfg.main_epochs = 2;
    let prepared = prepare(&cube, labels, &cfg, None).unwrap();
    let run = run_once(&prepared, &cfg).unwrap();
    assert_eq!(run.state.params.input_dim(), cfg.beta);
}

#[test]
fn nodata_pixels_become_background() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = common::two_class_scene(11);
    let mut values = cube.values().to_vec();
    let plane = 400;
    for b in 0..cube.bands() {
        values[b * plane + 3] = -1.0;
    }
    let cube = HsiCube::new(20, 20, cube.bands(), values).unwrap();
    let (cube_path, _) = common::write_scene(dir.path(), "nd", &cube, &labels);
    let hdr = dir.path().join("nd.hdr.txt");
    let mut text = fs::read_to_string(&hdr).unwrap();
    text.push_str("nodata: -1\n");
    fs::write(&hdr, text).unwrap();
    let cube = gwcl_core::data::load_cube(&cube_path).unwrap();
    let prepared = prepare(&cube, labels, &small_config(), None).unwrap();
    assert_eq!(prepared.features.rows(), 399);
    assert_eq!(prepared.labels.code(0, 3), 0);
}

#[test]
fn rendered_truth_matches_rendered_perfect_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = common::two_class_scene(12);
    let prepared = prepare(&cube, labels.clone(), &small_config(), None).unwrap();
    let truths: Vec<u16> = prepared.features.coords().iter().map(|&(r, c)| labels.code(r as usize, c as usize)).collect();
    let pred_map = ClassMap::from_predictions(&prepared.features, &truths).unwrap();
    let truth_map = ClassMap {
        height: 20,
        width: 20,
        codes: labels.codes().to_vec(),
    };
    render_map(&pred_map, &dir.path().join("p.png")).unwrap();
    render_map(&truth_map, &dir.path().join("t.png")).unwrap();
    let p = fs::read(dir.path().join("p.png")).unwrap();
    assert_eq!(p, fs::read(dir.path().join("t.png")).unwrap());
    let img = image::open(dir.path().join("p.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (20, 20));
    assert_eq!(img.get_pixel(0, 0).0, PALETTE[1]);
    assert_eq!(img.get_pixel(19, 0).0, PALETTE[2]);
}

#[test]
fn two_by_two_map_colours() {
    let dir = tempfile::tempdir().unwrap();
    let map = ClassMap {
        height: 2,
        width: 2,
        codes: vec![1, 2, 0, 2],
    };
    let path = dir.path().join("m.png");
    render_map(&map, &path).unwrap();
    let img = image::open(&path).unwrap().to_rgb8();
    assert_eq!(img.get_pixel(0, 0).0, PALETTE[1]);
    assert_eq!(img.get_pixel(1, 0).0, PALETTE[2]);
    assert_eq!(img.get_pixel(0, 1).0, PALETTE[0]);
    assert_eq!(img.get_pixel(1, 1).0, PALETTE[2]);
}
