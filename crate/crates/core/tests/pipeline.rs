use occdet::augmentation::AugSample;
use occdet::numcore::{Module, Rng};
use occdet::pipeline::checkpoint::{MANIFEST_FILE, PARAMS_FILE};
use occdet::pipeline::train::{CHECKPOINT_DIR, LOG_FILE};
use occdet::pipeline::*;
use occdet::synth::generate_scene;
use occdet::metrics::MetricReport;
use occdet::Error;

/// Half-resolution grid over the same extent, so steps stay cheap.
fn small() -> PipelineConfig {
    let mut c = PipelineConfig::tiny();
    c.scene.grid.voxel_size = [1.0; 3];
    c.scene.grid.dims = [16, 16, 4];
    c.scene.objects = [2, 2];
    c.eval.query_points = 200;
    c.steps = 3;
    c
}

fn first_scene(c: &PipelineConfig) -> Prepared {
    prepare(c, training_scenes(c).unwrap().remove(0)).unwrap()
}

fn params(m: &mut Model<f32>) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push((p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect())));
    out
}

#[test]
fn explicit_path_with_occupancy_head_only() {
    let mut c = small();
    c.flags = AblationFlags {
        use_implicit: false,
        use_local_branch: false,
        use_global_branch: false,
        use_interaction: false,
        use_occ_head: true,
        use_det_head: false,
        use_aug: false,
        use_schedule: false,
    };
    let p = first_scene(&c);
    let m = Model::<f32>::new(&c, &mut Rng::new(1)).unwrap();
    assert!(m.implicit.is_none() && m.det.is_none());
    let fw = m.forward(&p.planes, &p.geo).unwrap();
    let [x, y, z] = c.scene.grid.dims;
    assert_eq!(fw.occ_logits.as_ref().unwrap().dims(), &[c.scene.occ_classes(), x, y, z]);
    assert_eq!(fw.v_fusion.dims(), &[c.model.c_img, x, y, z]);
    assert!(fw.heat.is_none() && fw.reg.is_none());
    let run = train(&c, None).unwrap();
    assert!(run.step_losses().all(|l| l.total.is_finite() && l.det.is_none()));
}

#[test]
fn identity_augmentation_matches_no_augmentation() {
    let c = small();
    let p = first_scene(&c);
    let m = Model::<f32>::new(&c, &mut Rng::new(2)).unwrap();
    let plain = evaluate_losses(&m, &c, &p, None, 1.0).unwrap();
    let ident = AugSample::identity(c.scene.grid.center());
    let aug = evaluate_losses(&m, &c, &p, Some(&ident), 1.0).unwrap();
    assert!((plain.total - aug.total).abs() < 1e-7, "{} vs {}", plain.total, aug.total);
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let mut c = small();
    c.flags.use_aug = true;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut runs: Vec<TrainRun> = dirs.iter().map(|d| train(&c, Some(d.path())).unwrap()).collect();
    assert_eq!(runs[0].log, runs[1].log);
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&dirs[0], LOG_FILE), read(&dirs[1], LOG_FILE));
    let ck = format!("{CHECKPOINT_DIR}/{PARAMS_FILE}");
    assert_eq!(read(&dirs[0], &ck), read(&dirs[1], &ck));
    let (a, b) = runs.split_at_mut(1);
    assert_eq!(params(&mut a[0].model), params(&mut b[0].model));

    c.seed += 1;
    let other = train(&c, None).unwrap();
    assert_ne!(other.log, runs[0].log);
}

#[test]
fn zero_steps_writes_the_initial_checkpoint() {
    let mut c = small();
    c.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let mut run = train(&c, Some(dir.path())).unwrap();
    assert_eq!(run.log.len(), 1);
    assert!(matches!(run.log[0], LogRecord::Header { steps: 0, .. }));
    let (cfg, mut loaded, manifest) = load_checkpoint(&dir.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(cfg, c);
    assert_eq!(manifest.step, 0);
    assert_eq!(manifest.config_hash, c.hash());
    let mut fresh = Model::<f32>::new(&c, &mut Rng::new(c.seed).fork("model")).unwrap();
    assert_eq!(params(&mut loaded), params(&mut fresh));
    assert_eq!(params(&mut run.model), params(&mut fresh));
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let c = small();
    let dir = tempfile::tempdir().unwrap();
    let run = train(&c, Some(dir.path())).unwrap();
    let (cfg, loaded, _) = load_checkpoint(&dir.path().join(CHECKPOINT_DIR)).unwrap();
    let p = &run.scenes[0];
    let a = run.model.forward(&p.planes, &p.geo).unwrap();
    let b = loaded.forward(&p.planes, &p.geo).unwrap();
    assert_eq!(a.occ_logits.unwrap().data(), b.occ_logits.unwrap().data());
    assert_eq!(a.reg.unwrap().data(), b.reg.unwrap().data());
    let scenes: Vec<_> = run.scenes.iter().map(|p| p.scene.clone()).collect();
    assert_eq!(evaluate(&run.model, &cfg, &scenes).unwrap(), evaluate(&loaded, &cfg, &scenes).unwrap());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let mut c = small();
    c.steps = 0;
    let dir = tempfile::tempdir().unwrap();
    train(&c, Some(dir.path())).unwrap();
    let ck = dir.path().join(CHECKPOINT_DIR);
    let text = std::fs::read_to_string(ck.join(MANIFEST_FILE)).unwrap();
    std::fs::write(ck.join(MANIFEST_FILE), text.replace(&c.hash(), "deadbeef")).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(Error::Config(_))));
}

#[test]
fn schedule_flag_is_a_distinct_hash_in_the_log() {
    let mut c = small();
    c.steps = 1;
    let a = train(&c, None).unwrap();
    c.flags.use_schedule = true;
    let b = train(&c, None).unwrap();
    let hash = |r: &TrainRun| match &r.log[0] {
        LogRecord::Header { config_hash, .. } => config_hash.clone(),
        other => panic!("unexpected {other:?}"),
    };
    assert_ne!(hash(&a), hash(&b));
    let delta = |r: &TrainRun| match &r.log[1] {
        LogRecord::Step { delta, .. } => *delta,
        other => panic!("unexpected {other:?}"),
    };
    assert_eq!(delta(&a), 1.0);
    assert_eq!(delta(&b), c.schedule.v_min);
}

#[test]
fn ground_truth_scores_perfectly() {
    let c = small();
    let scenes = training_scenes(&c).unwrap();
    let r = evaluate_ground_truth(&c, &scenes).unwrap();
    assert_eq!(r.miou, 1.0);
    assert_eq!(r.miou_visible, Some(1.0));
    assert_eq!(r.point_miou, Some(1.0));
    assert!((r.nds - 1.0).abs() < 1e-12, "{}", r.nds);
    assert_eq!(r.map, 1.0);
}

#[test]
fn empty_detections_score_zero() {
    let c = small();
    let scenes = training_scenes(&c).unwrap();
    let refs: Vec<_> = scenes.iter().collect();
    let mut pred = eval::ground_truth_prediction(&scenes[0], &[]);
    pred.boxes.clear();
    let r = eval::score(&c, &refs, &[pred], &[Vec::new()]).unwrap();
    assert_eq!(r.map, 0.0);
    assert_eq!([r.mate, r.mase, r.maoe, r.mave, r.maae], [1.0; 5]);
    assert_eq!(r.nds, 0.0);
    assert_eq!(r.miou, 1.0);
}

#[test]
fn report_json_round_trips() {
    let c = small();
    let run = train(&c, None).unwrap();
    let scenes: Vec<_> = run.scenes.iter().map(|p| p.scene.clone()).collect();
    let r = evaluate(&run.model, &c, &scenes).unwrap();
    let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn log_lines_parse_back() {
    let c = small();
    let dir = tempfile::tempdir().unwrap();
    let run = train(&c, Some(dir.path())).unwrap();
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let parsed: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, run.log);
    assert_eq!(parsed.len(), 1 + c.steps);
}

#[test]
fn grid_mismatch_is_rejected() {
    let c = small();
    let mut other = c.scene.clone();
    other.grid.dims = [8, 8, 4];
    let scene = generate_scene(&mut Rng::new(3), &other).unwrap();
    assert!(matches!(prepare(&c, scene), Err(Error::GridMismatch(_))));
}

#[test]
fn non_finite_loss_aborts_and_is_logged() {
    let mut c = small();
    c.grad_clip = None;
    c.optimizer = occdet::numcore::optim::OptimizerSpec::Sgd { lr: 1e30, momentum: 0.0 };
    c.steps = 10;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&c, Some(dir.path())).err().expect("diverges");
    assert!(matches!(err, Error::NonFinite(_)), "{err:?}");
    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let last: LogRecord = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert!(matches!(last, LogRecord::NonFinite { .. }), "{last:?}");
}
