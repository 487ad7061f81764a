mod common;

use prg_distill::graph::init_proxy_bank;
use prg_distill::losses::{soft_cross_entropy_on_tape, LossWeights};
use prg_distill::numerics::{gradcheck_many, Tape};
use prg_distill::student::{forward, init_student, StudentConfig, StudentParams};
use prg_distill::trainer::{batch_objective, node_dim, Mode, ObjectiveSettings, TeacherCache};
use prg_distill::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn settings(mode: Mode, weights: LossWeights) -> ObjectiveSettings {
    ObjectiveSettings {
        mode,
        weights,
        temperature: 4.0,
        standardize_nodes: false,
    }
}

/// Student with nonzero biases so every affine path carries signal.
fn perturbed(params: &StudentParams, seed: u64) -> StudentParams {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let values = params
        .params
        .iter()
        .map(|p| {
            if p.is_bias() {
                Matrix::from_fn(p.value.rows(), p.value.cols(), |_, _| {
                    g.gen_range(-0.3..0.3)
                })
            } else {
                p.value.clone()
            }
        })
        .collect();
    params.with_values(values).unwrap()
}

/// Gradient of each parameter of `total` for the first four train samples.
fn batch_gradients(
    bundle: &prg_distill::bundle::TeacherBundle,
    params: &StudentParams,
    settings: &ObjectiveSettings,
) -> Vec<Matrix> {
    let dim = node_dim(
        settings.mode,
        bundle.manifest().feature_dim,
        bundle.manifest().n_classes,
    );
    let cache = TeacherCache::new(&bundle.train_view(), 100.0, settings).unwrap();
    let batch: Vec<usize> = bundle.manifest().split.train[..4].to_vec();
    let teacher = cache
        .batch(&batch, &init_proxy_bank(6, dim, 0.1, 1).unwrap())
        .unwrap();
    let proxy_s = init_proxy_bank(6, dim, 0.1, 2).unwrap();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(bundle.inputs().select_rows(&batch).unwrap());
    let lv = batch_objective(&mut tape, params, &vars, x, &teacher, &proxy_s, settings).unwrap();
    let grads = tape.backward(lv.total).unwrap();
    params.gradients(&grads, &vars)
}

#[test]
fn three_layer_student_full_objective_passes_gradcheck() {
    let bundle = common::tiny_bundle(1);
    let cfg = StudentConfig {
        backbone_hidden: vec![9, 7],
        ..common::tiny_student(&bundle, 4)
    };
    let params = perturbed(&init_student(&cfg).unwrap(), 5);
    assert_eq!(params.backbone_layers, 3);
    for mode in [
        Mode::Prg,
        Mode::KdBaseline,
        Mode::PrgFeatureNodes,
        Mode::PrgPlainLogits,
    ] {
        let s = settings(mode, LossWeights::default());
        let dim = node_dim(mode, 12, 6);
        let cache = TeacherCache::new(&bundle.train_view(), 100.0, &s).unwrap();
        let batch: Vec<usize> = bundle.manifest().split.train[..4].to_vec();
        let teacher = cache
            .batch(&batch, &init_proxy_bank(6, dim, 0.1, 1).unwrap())
            .unwrap();
        let proxy_s = init_proxy_bank(6, dim, 0.1, 2).unwrap();
        let x = bundle.inputs().select_rows(&batch).unwrap();
        let report = gradcheck_many(
            |tape: &mut Tape, vars| {
                let xv = tape.constant(x.clone());
                Ok(batch_objective(tape, &params, vars, xv, &teacher, &proxy_s, &s)?.total)
            },
            &params.values(),
            1e-6,
            |_| {},
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{mode}: {report:?}");
    }
}

#[test]
fn classifier_bias_gradient_sums_to_zero_for_uniform_targets() {
    let bundle = common::tiny_bundle(2);
    let params = perturbed(&init_student(&common::tiny_student(&bundle, 1)).unwrap(), 3);
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let x = tape.constant(bundle.inputs().select_rows(&[0, 1, 2, 3]).unwrap());
    let out = params.forward_with(&mut tape, &vars, x).unwrap();
    let uniform = Matrix::filled(4, 6, 1.0 / 6.0);
    let ce = soft_cross_entropy_on_tape(&mut tape, out.logits, &uniform).unwrap();
    let grads = tape.backward(ce).unwrap();
    let index = params
        .params
        .iter()
        .position(|p| p.name == "classifier.bias")
        .unwrap();
    let g = grads.get_or_zeros(vars[index]);
    assert!(g.data().iter().any(|v| v.abs() > 1e-6));
    assert!(g.sum().abs() < 1e-14);
}

#[test]
fn projection_is_untouched_when_graph_losses_are_off() {
    let bundle = common::tiny_bundle(3);
    let params = perturbed(&init_student(&common::tiny_student(&bundle, 2)).unwrap(), 4);
    let off = LossWeights {
        lambda_node: 0.0,
        lambda_edge: 0.0,
        ..LossWeights::default()
    };
    for s in [
        settings(Mode::Prg, off),
        settings(Mode::CeOnly, LossWeights::default()),
    ] {
        let grads = batch_gradients(&bundle, &params, &s);
        for (p, g) in params.params.iter().zip(&grads) {
            let zero = g.data().iter().all(|&v| v == 0.0);
            assert_eq!(
                zero,
                p.name.starts_with("projection"),
                "{} in {}",
                p.name,
                s.mode
            );
        }
    }
    let grads = batch_gradients(
        &bundle,
        &params,
        &settings(Mode::Prg, LossWeights::default()),
    );
    assert!(params
        .params
        .iter()
        .zip(&grads)
        .all(|(_, g)| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn forward_treats_rows_independently() {
    let bundle = common::tiny_bundle(4);
    let params = perturbed(&init_student(&common::tiny_student(&bundle, 3)).unwrap(), 5);
    let x = bundle.inputs().select_rows(&[5, 9, 2, 7]).unwrap();
    let (s, f, w) = forward(&params, &x).unwrap();
    assert_eq!(f.cols(), bundle.manifest().feature_dim);
    assert_eq!(w.cols(), bundle.manifest().n_classes);
    for r in 0..4 {
        let (s1, f1, w1) = forward(&params, &x.select_rows(&[r]).unwrap()).unwrap();
        assert_eq!(s1.row(0), s.row(r));
        assert_eq!(f1.row(0), f.row(r));
        assert_eq!(w1.row(0), w.row(r));
    }
    let perm = [2, 0, 3, 1];
    let (_, fp, wp) = forward(&params, &x.select_rows(&perm).unwrap()).unwrap();
    assert_eq!(fp, f.select_rows(&perm).unwrap());
    assert_eq!(wp, w.select_rows(&perm).unwrap());
    assert_eq!(node_dim(Mode::Prg, f.cols(), w.cols()), 12 + 6);
}
