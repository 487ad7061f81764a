mod common;

use std::f64::consts::PI;
use std::fs;

use prg_distill::graph::init_proxy_bank;
use prg_distill::student::init_student;
use prg_distill::trainer::{
    heatmap_metrics, load_checkpoint, run_training, train, train_observed, IterationRecord, Mode,
    TeacherCache, TrainConfig,
};

fn observed(mode: Mode, lambdas: Option<(f64, f64)>, epochs: usize) -> Vec<IterationRecord> {
    let bundle = common::tiny_bundle(10);
    let mut cfg = TrainConfig {
        mode,
        ..common::tiny_train_config(epochs)
    };
    if let Some((n, e)) = lambdas {
        cfg.lambda_node = n;
        cfg.lambda_edge = e;
    }
    let mut records = Vec::new();
    train_observed(&bundle, &common::tiny_student(&bundle, 1), &cfg, &mut |r| {
        records.push(r.clone())
    })
    .unwrap();
    records
}

#[test]
fn identical_seeds_give_identical_histories_and_parameters() {
    let bundle = common::tiny_bundle(11);
    let scfg = common::tiny_student(&bundle, 2);
    let cfg = common::tiny_train_config(3);
    let (pa, ha) = train(&bundle, &scfg, &cfg).unwrap();
    let (pb, hb) = train(&bundle, &scfg, &cfg).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(pa, pb);
    assert!(pa.is_finite());
    let (_, hc) = train(&bundle, &scfg, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(ha.records[0], hc.records[0]);
}

#[test]
fn zero_lambdas_reduce_prg_to_ce_only_per_iteration() {
    let prg = observed(Mode::Prg, Some((0.0, 0.0)), 2);
    let ce = observed(Mode::CeOnly, None, 2);
    assert_eq!(prg.len(), ce.len());
    for (a, b) in prg.iter().zip(&ce) {
        assert_eq!(a.batch, b.batch);
        assert!((a.losses.total - b.losses.total).abs() <= 1e-12);
        assert!((a.losses.ce - b.losses.ce).abs() <= 1e-12);
        assert!((a.losses.total - a.losses.ce).abs() <= 1e-12);
    }
}

#[test]
fn recorded_totals_decompose_into_their_terms() {
    let cfg = TrainConfig::default();
    for r in observed(Mode::Prg, None, 2) {
        let expected =
            r.losses.ce + cfg.lambda_node * r.losses.node + cfg.lambda_edge * r.losses.edge;
        assert!((r.losses.total - expected).abs() <= 1e-12);
        assert!(r.losses.node > 0.0 && r.losses.edge > 0.0);
    }
    for r in observed(Mode::KdBaseline, None, 1) {
        assert!((r.losses.total - (r.losses.ce + r.losses.kd)).abs() <= 1e-12);
    }
}

#[test]
fn replaying_recorded_batches_reproduces_the_proxy_banks_bit_exactly() {
    let bundle = common::tiny_bundle(12);
    let cfg = common::tiny_train_config(3);
    let mut records = Vec::new();
    let (state, _) = train_observed(&bundle, &common::tiny_student(&bundle, 3), &cfg, &mut |r| {
        records.push(r.clone())
    })
    .unwrap();

    let m = bundle.manifest();
    let alpha = cfg.resolve_alpha(m.split.train.len()).unwrap();
    let dim = m.feature_dim + m.n_classes;
    let cache = TeacherCache::new(&bundle.train_view(), cfg.tau, &cfg.objective()).unwrap();
    let mut proxy_t = init_proxy_bank(m.n_classes, dim, alpha, cfg.teacher_proxy_seed()).unwrap();
    let mut proxy_s = init_proxy_bank(m.n_classes, dim, alpha, cfg.student_proxy_seed()).unwrap();
    for r in &records {
        let assignment: Vec<usize> = r.batch.iter().map(|&i| cache.predictions[i]).collect();
        proxy_t
            .update(&cache.nodes.select_rows(&r.batch).unwrap(), &assignment)
            .unwrap();
        proxy_s.update(&r.student_nodes, &assignment).unwrap();
    }
    assert_eq!(proxy_t, state.proxy_t);
    assert_eq!(proxy_s, state.proxy_s);
    assert_eq!(state.iteration as usize, records.len());
}

fn hand_lr(epoch: f64) -> f64 {
    // restarts at 10, 30, 70 for t0 = 10, t_mult = 2
    let (start, period) = match epoch {
        e if e < 10.0 => (0.0, 10.0),
        e if e < 30.0 => (10.0, 20.0),
        e if e < 70.0 => (30.0, 40.0),
        e if e < 150.0 => (70.0, 80.0),
        _ => unreachable!(),
    };
    0.5 * 0.03 * (1.0 + (PI * (epoch - start) / period).cos())
}

#[test]
fn schedule_matches_the_closed_form() {
    let cfg = TrainConfig::default();
    let expected = [
        (0, 0.03),
        (5, 0.015),
        (10, 0.03),
        (29, 0.015 * (1.0 + (PI * 19.0 / 20.0).cos())),
        (30, 0.03),
        (70, 0.03),
    ];
    for (epoch, lr) in expected {
        assert!((cfg.lr_at(epoch) - lr).abs() <= 1e-12, "epoch {epoch}");
    }
    for epoch in 0..150 {
        assert!(
            (cfg.lr_at(epoch) - hand_lr(epoch as f64)).abs() <= 1e-12,
            "epoch {epoch}"
        );
    }
}

#[test]
fn resumed_run_continues_numbering_and_matches_an_uninterrupted_run() {
    let bundle = common::tiny_bundle(13);
    let scfg = common::tiny_student(&bundle, 5);
    let tmp = tempfile::tempdir().unwrap();
    let (split_dir, full_dir) = (tmp.path().join("split"), tmp.path().join("full"));

    run_training(
        &bundle,
        &scfg,
        &common::tiny_train_config(2),
        &split_dir,
        None,
    )
    .unwrap();
    let ckpt = load_checkpoint(&split_dir.join("checkpoint")).unwrap();
    assert_eq!(ckpt.state.epochs_completed, 2);
    let (history, _) = run_training(
        &bundle,
        &scfg,
        &common::tiny_train_config(4),
        &split_dir,
        Some(&split_dir.join("checkpoint")),
    )
    .unwrap();
    assert_eq!(
        history.records.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        vec![2, 3]
    );

    run_training(
        &bundle,
        &scfg,
        &common::tiny_train_config(4),
        &full_dir,
        None,
    )
    .unwrap();
    let split_metrics = fs::read(split_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(
        split_metrics,
        fs::read(full_dir.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(split_metrics.iter().filter(|&&b| b == b'\n').count(), 4);
    assert_eq!(
        load_checkpoint(&split_dir.join("checkpoint"))
            .unwrap()
            .state,
        load_checkpoint(&full_dir.join("checkpoint")).unwrap().state
    );
}

#[test]
fn metrics_files_are_byte_identical_and_labels_stay_unread_during_training() {
    let bundle = common::tiny_bundle(14);
    let scfg = common::tiny_student(&bundle, 6);
    let tmp = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let (_, summary) =
            run_training(&bundle, &scfg, &common::tiny_train_config(2), &out, None).unwrap();
        assert_eq!(summary.label_reads_during_training, 0);
        files.push(fs::read(out.join("metrics.jsonl")).unwrap());
        let line: serde_json::Value =
            serde_json::from_slice(files[0].split(|&b| b == b'\n').next().unwrap()).unwrap();
        let keys: Vec<_> = line.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 9, "{keys:?}");
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(bundle.label_reads_during_training(), 0);
    // evaluation reads labels outside training
    assert!(bundle.label_reads() > 0);
}

#[test]
fn heatmap_diagonals_are_one_and_teacher_side_ignores_the_student() {
    let bundle = common::tiny_bundle(15);
    let a = init_student(&common::tiny_student(&bundle, 1)).unwrap();
    let b = init_student(&common::tiny_student(&bundle, 2)).unwrap();
    let ha = heatmap_metrics(&a, &bundle, 3, 4, 9).unwrap();
    let hb = heatmap_metrics(&b, &bundle, 3, 4, 9).unwrap();
    assert_eq!(ha.teacher_matrix.shape(), (12, 12));
    for i in 0..12 {
        assert!((ha.teacher_matrix.get(i, i) - 1.0).abs() < 1e-12);
        assert!((ha.student_matrix.get(i, i) - 1.0).abs() < 1e-12);
    }
    assert_eq!(ha.teacher_matrix, hb.teacher_matrix);
    assert_eq!(ha.mean_offdiag_teacher, hb.mean_offdiag_teacher);
    assert_ne!(ha.student_matrix, hb.student_matrix);
    assert!(heatmap_metrics(&a, &bundle.without_labels(), 3, 4, 9).is_err());
}
