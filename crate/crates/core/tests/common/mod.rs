#![allow(dead_code)]

use prg_distill::bundle::{synth_bundle, SynthParams, TeacherBundle};
use prg_distill::student::StudentConfig;
use prg_distill::trainer::TrainConfig;

/// Small synthetic bundle: 6 classes, 3 prompts, d=12, m=20, 30 per class.
pub fn tiny_bundle(seed: u64) -> TeacherBundle {
    synth_bundle(&SynthParams {
        classes: 6,
        prompts: 3,
        dim: 12,
        input_dim: 20,
        per_class: 30,
        noise: 0.3,
        seed,
    })
    .unwrap()
}

pub fn tiny_student(bundle: &TeacherBundle, seed: u64) -> StudentConfig {
    let m = bundle.manifest();
    StudentConfig {
        input_dim: m.input_dim,
        backbone_hidden: vec![16],
        feature_dim: 10,
        n_classes: m.n_classes,
        teacher_dim: m.feature_dim,
        init_seed: seed,
    }
}

pub fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs,
        seed: 3,
        ..TrainConfig::default()
    }
}
