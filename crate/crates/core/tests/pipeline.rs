//! End-to-end paths across modules: simulate, persist, detect, score, train,
//! checkpoint and render.

use aoa_core::array::ArrayGeometry;
use aoa_core::baselines::IaaConfig;
use aoa_core::checkpoint::{checkpoint_bytes, parse_checkpoint};
use aoa_core::config;
use aoa_core::dataset::{read_binary, read_jsonl, write_binary, write_jsonl};
use aoa_core::eval::{run_sweep, AaetrDetector, Detector, EvalConfig, SpectralDetector};
use aoa_core::model::ModelConfig;
use aoa_core::render::{render_comparison, splat};
use aoa_core::scene::{SceneConfig, SceneStream};
use aoa_core::train::{train, TrainConfig};

fn small_eval() -> EvalConfig {
    EvalConfig {
        snr_db: vec![35.0],
        n_targets: vec![1, 3],
        scenes_per_condition: 40,
        angle_tol_deg: 1.0,
        thresholds: 11,
        ..EvalConfig::desk()
    }
}

#[test]
fn shards_feed_the_detectors() {
    let geometry = ArrayGeometry::half_wave_ula(16).unwrap();
    let scenes = SceneStream::new(SceneConfig::desk(), geometry.clone(), 1).unwrap().range(0..25);
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &scenes).unwrap();
    let mut binary = Vec::new();
    write_binary(&mut binary, 16, &scenes).unwrap();
    let from_json = read_jsonl(jsonl.as_slice()).unwrap();
    let (k, from_bin) = read_binary(binary.as_slice()).unwrap();
    assert_eq!((k, from_json.len(), from_bin.len()), (16, 25, 25));

    let iaa = SpectralDetector::iaa(IaaConfig::default());
    let snaps: Vec<_> = from_json.iter().map(|r| r.snapshot()).collect();
    let refs: Vec<&[num_complex::Complex64]> = snaps.iter().map(|s| s.as_slice()).collect();
    let direct: Vec<&[num_complex::Complex64]> = scenes.iter().map(|s| s.snapshot.as_slice()).collect();
    assert_eq!(
        iaa.detect_batch(&geometry, &refs).unwrap(),
        iaa.detect_batch(&geometry, &direct).unwrap()
    );
}

#[test]
fn iaa_sweep_is_reproducible_and_sane() {
    let geometry = ArrayGeometry::half_wave_ula(16).unwrap();
    let iaa = SpectralDetector::iaa(IaaConfig::default());
    let a = run_sweep(&iaa, &geometry, &SceneConfig::desk(), &small_eval()).unwrap();
    let b = run_sweep(&iaa, &geometry, &SceneConfig::desk(), &small_eval()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    // a lone 35 dB target is easy for IAA
    assert!(a[0].max_f1 > 0.9, "{}", a[0].max_f1);
    for r in &a {
        assert_eq!(r.pr_points.len(), 11);
        assert!(r.pr_points.windows(2).all(|w| w[1].recall <= w[0].recall));
    }
}

#[test]
fn short_training_run_round_trips_through_a_checkpoint() {
    let mut c = TrainConfig::desk();
    c.model = ModelConfig::tiny();
    c.options.batch_size = 32;
    c.options.total_samples = 32 * 6;
    c.options.warmup_steps = 2;
    c.options.eval_every = 3;
    c.options.monitor = small_eval();
    let geometry = c.geometry.clone();
    let (weights, log) = train(c).unwrap();
    assert_eq!(log.steps.len(), 6);
    assert_eq!(log.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![3, 6]);
    assert!(log.steps.iter().all(|s| s.total.is_finite()));

    let bytes = checkpoint_bytes(&weights, serde_json::json!({"note": "test"})).unwrap();
    let (back, meta) = parse_checkpoint(&bytes).unwrap();
    assert_eq!(meta["note"], "test");
    let scene = SceneStream::new(SceneConfig::desk(), geometry.clone(), 4).unwrap().scene(0);
    let d1 = weights.forward(&geometry, &scene.snapshot).unwrap();
    let d2 = back.forward(&geometry, &scene.snapshot).unwrap();
    // stored as f32
    for (x, y) in d1.iter().zip(d2.iter()) {
        assert!((x.angle_deg - y.angle_deg).abs() < 1e-3);
        assert!((x.confidence - y.confidence).abs() < 1e-4);
    }

    let det = AaetrDetector { weights: &back };
    let reports = run_sweep(&det, &geometry, &SceneConfig::desk(), &small_eval()).unwrap();
    assert!(reports.iter().all(|r| (0.0..=1.0).contains(&r.max_f1)));

    let grid = IaaConfig::default().grid().unwrap();
    let s = splat(&d2, &grid, 0.0).unwrap();
    let svg = render_comparison(&[("aaetr".into(), s.spectrum)], &scene.targets).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn config_file_drives_a_sparse_array_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(
        &path,
        r#"{
            "geometry": {"kind": "sparse_mimo48"},
            "model": {"embed_dim": 8, "encoder_blocks": 1, "decoder_blocks": 1, "num_queries": 4,
                      "attention_heads": 2, "ffn_hidden": 16},
            "train": {"batch_size": 8, "total_samples": 16, "warmup_steps": 1, "eval_every": 0,
                      "monitor": {"snr_db": [30], "n_targets": [2], "scenes_per_condition": 5}}
        }"#,
    )
    .unwrap();
    let app = config::load(Some(&path), &["scene.snr_db=30".into()]).unwrap();
    let tc = app.train_config(Some(dir.path())).unwrap();
    assert_eq!(tc.geometry.element_count(), 48);
    let (w, log) = train(tc).unwrap();
    assert_eq!(log.steps.len(), 2);
    assert_eq!(w.config().embed_dim, 8);
}
