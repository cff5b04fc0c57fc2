use std::path::PathBuf;
use std::process::Command;

use fewshot::harness::{
    apply_overrides, config_hash, detection_split, emit_plot_data, group_table, load_checkpoint,
    parse_config, plot_from_dirs, plot_points, report_ci, run_experiment, run_group,
    save_checkpoint, seed_streams, Budget, ConfigError, DetReport, ExperimentConfig,
    HarnessError, PlotPoint,
};
use fewshot::methods::EvalReport;
use fewshot::tensor::Tensor;

use proptest::prelude::*;

fn tiny_cfg(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = out.to_string_lossy().into_owned();
    cfg.n_classes = 20;
    cfg.samples_per_class = 10;
    cfg.ratios = (0.5, 0.25, 0.25);
    cfg.channels = 8;
    cfg.blocks = 3;
    cfg.k_shot = 1;
    cfg.n_query = 5;
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 6;
    cfg.val_episodes = 3;
    cfg.eval_tasks = 6;
    cfg
}

#[test]
fn config_echo_round_trips_and_is_canonical() {
    let cfg = ExperimentConfig::default();
    let echo = cfg.echo();
    let back = parse_config(&echo).unwrap();
    // The echo resolves the mirrored eval fields, so compare semantics.
    assert_eq!(back.eval_spec(), cfg.eval_spec());
    assert_eq!(back.train_config(), cfg.train_config());
    assert_eq!(back.yolomaml_config(), cfg.yolomaml_config());
    assert_eq!(back.method, cfg.method);
    assert_eq!(back.echo(), echo, "echo is a fixed point");
    assert_eq!(config_hash(&back), config_hash(&cfg));
    assert!(echo.starts_with("method: proto\nseed: 10\n"));
    // Resolved eval shape appears explicitly.
    assert!(echo.contains("eval.n_way: 5\n"));
}

#[test]
fn parse_reports_line_numbers_for_every_failure_mode() {
    let text = "seed: 3\n\n# comment only\nnope: 7\n";
    match parse_config(text).unwrap_err() {
        ConfigError::UnknownKey { line, key } => {
            assert_eq!(line, 4);
            assert_eq!(key, "nope");
        }
        other => panic!("unexpected {other:?}"),
    }
    match parse_config("seed: not_a_number\n").unwrap_err() {
        ConfigError::BadValue { line, key, .. } => {
            assert_eq!((line, key.as_str()), (1, "seed"));
        }
        other => panic!("unexpected {other:?}"),
    }
    match parse_config("method proto\n").unwrap_err() {
        ConfigError::BadLine { line, .. } => assert_eq!(line, 1),
        other => panic!("unexpected {other:?}"),
    }
    match parse_config("data.ratios: 0.5,0.5\n").unwrap_err() {
        ConfigError::BadValue { key, .. } => assert_eq!(key, "data.ratios"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn later_keys_comments_and_overrides_apply_in_order() {
    let cfg = parse_config("seed: 1 # trailing comment\nseed: 9\n   \n").unwrap();
    assert_eq!(cfg.seed, 9);
    let mut cfg = ExperimentConfig::default();
    apply_overrides(
        &mut cfg,
        &["train.epochs=3".into(), "method=maml".into()],
    )
    .unwrap();
    assert_eq!(cfg.epochs, 3);
    assert_eq!(cfg.method, "maml");
    assert!(matches!(
        apply_overrides(&mut cfg, &["no_equals_sign".into()]),
        Err(ConfigError::BadLine { line: 1, .. })
    ));
    assert!(matches!(
        apply_overrides(&mut cfg, &["bogus=1".into()]),
        Err(ConfigError::UnknownKey { line: 1, .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    // Arbitrary input text must parse or fail cleanly, never panic.
    #[test]
    fn parser_never_panics(text in "\\PC*") {
        let _ = parse_config(&text);
    }
}

#[test]
fn parser_survives_adversarial_inputs() {
    for text in [
        ":::",
        "seed:",
        "seed: 99999999999999999999999999",
        "train.meta_lr: -1e999",
        "data.ratios: ,,,",
        "method: \u{202e}proto",
        "seed: 5\0\n",
        "# only a comment",
    ] {
        let _ = parse_config(text); // outcome may be Ok or Err
    }
}

#[test]
fn validation_rejects_way_changes_for_adapting_methods() {
    let mut cfg = ExperimentConfig::default();
    cfg.method = "maml".into();
    cfg.eval_n_way = Some(10);
    match cfg.validate().unwrap_err() {
        ConfigError::WayChange { train, eval, .. } => assert_eq!((train, eval), (5, 10)),
        other => panic!("unexpected {other:?}"),
    }
    cfg.eval_n_way = Some(5);
    cfg.validate().unwrap();
    // Shot changes are fine; only the way count is structural.
    cfg.eval_k_shot = Some(1);
    cfg.validate().unwrap();

    let mut det = ExperimentConfig::default();
    det.method = "yolomaml".into();
    det.eval_n_way = Some(4);
    assert!(matches!(
        det.validate(),
        Err(ConfigError::WayChange { train: 3, eval: 4, .. })
    ));

    let mut bad = ExperimentConfig::default();
    bad.method = "frobnicate".into();
    assert!(matches!(bad.validate(), Err(ConfigError::Invalid(_))));
    let mut bad_ratio = ExperimentConfig::default();
    bad_ratio.ratios = (0.9, 0.2, 0.2);
    assert!(bad_ratio.validate().is_err());
    let mut bad_det = ExperimentConfig::default();
    bad_det.method = "yolomaml".into();
    bad_det.det_image_size = 40;
    assert!(bad_det.validate().is_err());
}

#[test]
fn config_hash_tracks_content() {
    let a = ExperimentConfig::default();
    let mut b = a.clone();
    assert_eq!(config_hash(&a), config_hash(&b));
    b.seed = 11;
    assert_ne!(config_hash(&a), config_hash(&b));
    assert_eq!(config_hash(&a).len(), 12);
    assert!(config_hash(&a).chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn seed_streams_are_distinct_and_deterministic() {
    let s = seed_streams(10);
    assert_eq!(s, seed_streams(10));
    let all = [s.data, s.split, s.model, s.train];
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
    assert_ne!(seed_streams(11), s);
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    let params = vec![
        Tensor::<f32>::from_vec(vec![1.5, -2.25, 0.0, 3.0, 4.0, 5.5], &[2, 3]).unwrap(),
        Tensor::<f32>::from_vec(vec![7.0], &[1]).unwrap(),
        Tensor::<f32>::from_vec((0..24).map(|i| i as f32).collect(), &[2, 3, 4]).unwrap(),
    ];
    save_checkpoint(&path, &params).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in params.iter().zip(&back) {
        assert_eq!(a.shape(), b.shape());
        assert_eq!(a.data().to_vec(), b.data().to_vec());
    }
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(HarnessError::BadCheckpoint(_))
    ));
    save_checkpoint(&path, &params).unwrap();
    let full = std::fs::read(&path).unwrap();
    std::fs::write(&path, &full[..full.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(HarnessError::BadCheckpoint(_))
    ));
}

#[test]
fn ci_report_formats_percentages() {
    let constant = vec![0.75; 10];
    assert_eq!(report_ci(&constant).unwrap(), "75.00 ± 0.00");
    let alternating: Vec<f64> = (0..600).map(|i| (i % 2) as f64).collect();
    let line = report_ci(&alternating).unwrap();
    assert!(line.starts_with("50.00 ± 4.0"), "{line}");
    assert!(matches!(
        report_ci(&[0.5]),
        Err(HarnessError::TooFewForCi(1))
    ));
}

fn fake_report(method: &str, k_shot: usize, seed: u64) -> EvalReport {
    EvalReport {
        method: method.into(),
        n_way: 5,
        k_shot,
        n_query: 16,
        n_tasks: 10,
        noise_swaps: 0,
        eval_seed: seed,
        mean_accuracy: 0.5 + k_shot as f64 / 100.0,
        ci95: 0.01,
        task_accuracies: vec![0.5; 10],
    }
}

#[test]
fn plot_data_is_sorted_and_byte_stable() {
    let items = vec![
        ("bbb".to_string(), fake_report("proto", 5, 10)),
        ("aaa".to_string(), fake_report("matching", 1, 10)),
        ("ccc".to_string(), fake_report("proto", 1, 10)),
    ];
    let points = plot_points("k_shot", &items).unwrap();
    let csv = emit_plot_data(&points);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,mean,ci95,method,config_hash");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].ends_with("matching,aaa"));
    assert!(lines[2].ends_with("proto,ccc"), "{csv}");
    assert!(lines[3].ends_with("proto,bbb"));
    // Shuffled input, identical bytes.
    let mut rev = points.clone();
    rev.reverse();
    assert_eq!(emit_plot_data(&rev), csv);

    let mixed = vec![
        ("a".to_string(), fake_report("proto", 1, 10)),
        ("b".to_string(), fake_report("proto", 5, 11)),
    ];
    assert!(matches!(
        plot_points("k_shot", &mixed),
        Err(HarnessError::MixedEvalSeeds(10, 11))
    ));
    assert!(matches!(
        plot_points("q_size", &items),
        Err(HarnessError::BadPlotAxis(_))
    ));
    let by_noise = plot_points("noise_swaps", &items).unwrap();
    assert!(by_noise.iter().all(|p| p.x == 0.0));
}

#[test]
fn experiment_run_persists_deterministic_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let budget = Budget::seconds(600);
    let out = run_experiment(&cfg, &budget).unwrap();
    assert_eq!(out.run_id, config_hash(&cfg));
    assert!(out.dir.ends_with(&out.run_id));
    let echo = std::fs::read_to_string(out.dir.join("config.echo")).unwrap();
    assert_eq!(echo, cfg.echo());
    let hist = std::fs::read_to_string(out.dir.join("history.csv")).unwrap();
    let lines: Vec<&str> = hist.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_acc");
    assert_eq!(lines.len(), 1 + cfg.epochs);
    let eval_a = std::fs::read_to_string(out.dir.join("eval.json")).unwrap();
    let report: EvalReport = serde_json::from_str(&eval_a).unwrap();
    assert_eq!(report.method, "proto");
    assert_eq!(report.n_tasks, cfg.eval_tasks);
    assert!((0.0..=1.0).contains(&report.mean_accuracy));
    let params = load_checkpoint(&out.dir.join("checkpoint.bin")).unwrap();
    assert!(!params.is_empty());

    // Same config, same bytes.
    let again = run_experiment(&cfg, &budget).unwrap();
    assert_eq!(again.run_id, out.run_id);
    let eval_b = std::fs::read_to_string(again.dir.join("eval.json")).unwrap();
    assert_eq!(eval_a, eval_b);
}

#[test]
fn group_isolates_failures_and_shares_the_eval_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let budget = Budget::seconds(600);
    let methods = vec![
        "proto".to_string(),
        "frobnicate".to_string(),
        "matching".to_string(),
    ];
    let group = run_group(&cfg, &methods, &budget).unwrap();
    assert_eq!(group.runs.len(), 2);
    assert_eq!(group.failures.len(), 1);
    assert_eq!(group.failures[0].0, "frobnicate");
    let table = group_table(&group);
    assert!(table.contains("proto") && table.contains("FAILED"));

    // The per-run reports agree on the eval seed, so plotting works.
    let dirs: Vec<PathBuf> = group.runs.iter().map(|r| r.dir.clone()).collect();
    let csv = plot_from_dirs(&dirs, "k_shot").unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv, plot_from_dirs(&dirs, "k_shot").unwrap());
}

#[test]
fn exhausted_budget_times_out_before_work_starts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(dir.path());
    let budget = Budget::seconds(0);
    match run_experiment(&cfg, &budget) {
        Err(HarnessError::TimedOut { stage, .. }) => assert_eq!(stage, "data"),
        other => panic!("unexpected {:?}", other.map(|o| o.summary)),
    }
}

#[test]
fn detection_experiment_writes_telemetry_and_f1_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(dir.path());
    cfg.method = "yolomaml".into();
    cfg.det_image_size = 32;
    cfg.det_pretrain_epochs = 1;
    cfg.det_pretrain_images = 8;
    cfg.det_pretrain_batch = 4;
    cfg.det_epochs = 2;
    cfg.det_n_way = 2;
    cfg.det_k_support = 1;
    cfg.det_q_query = 1;
    cfg.det_eval_tasks = 2;
    let out = run_experiment(&cfg, &Budget::seconds(600)).unwrap();
    assert_eq!(out.method, "yolomaml");
    let telemetry = std::fs::read_to_string(out.dir.join("telemetry.csv")).unwrap();
    let lines: Vec<&str> = telemetry.lines().collect();
    assert_eq!(lines[0], "epoch,bbox_mse,obj_bce,noobj_bce,class_ce,total");
    assert_eq!(lines.len(), 1 + cfg.det_epochs);
    let report: DetReport =
        serde_json::from_str(&std::fs::read_to_string(out.dir.join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(report.n_tasks, 2);
    assert!((0.0..=1.0).contains(&report.mean_f1));
    assert!(out.dir.join("checkpoint.bin").exists());
    assert!(!out.dir.join("history.csv").exists());

    let (train, test) = detection_split();
    assert_eq!(train.len() + test.len(), 12);
    assert_eq!(test, vec![2, 5, 8, 11]);
}

#[test]
fn cli_binary_reports_config_errors_with_exit_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "definitely_not_a_key: 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fewshot"))
        .args(["run", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown key"), "{stderr}");

    let missing = Command::new(env!("CARGO_BIN_EXE_fewshot"))
        .args(["run", "--config", "/definitely/not/here.cfg"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
