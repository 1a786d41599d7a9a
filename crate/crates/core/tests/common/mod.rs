//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use lpi::continual::Variant;
use lpi::io::{GeneratorSpec, RunConfig};

/// Three tasks of three classes; trains in seconds.
pub fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        tasks: ["appliance", "sports", "outdoor"].map(String::from).to_vec(),
        classes_per_task: 3,
        train_per_class: 12,
        test_per_class: 6,
        pretrain_classes: 6,
        pretrain_train_per_class: 10,
        pretrain_test_per_class: 2,
        seed: 11,
        ..Default::default()
    }
}

pub fn small_config(variant: Variant) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = 20;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 12;
    cfg.train.variant = variant;
    cfg
}
