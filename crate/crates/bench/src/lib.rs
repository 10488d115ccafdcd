//! Shared fixtures for the criterion benchmarks.

use hift_core::{
    Activation, Arch, Decay, Hyperparams, Mode, OptimizerKind, Precision, Seeds, Strategy, TaskSpec, TrainConfig,
    UnitKind,
};

/// A small transformer classifier: 8 hidden units, width 32.
pub fn arch(unit: UnitKind) -> Arch {
    Arch {
        vocab: 64,
        seq_len: 16,
        width: 32,
        hidden: 8,
        outputs: 4,
        unit,
        activation: Activation::Gelu,
        ffn_width: None,
    }
}

/// A config with a step budget large enough that benches never exhaust it.
pub fn config(mode: Mode, m: usize, optimizer: OptimizerKind) -> TrainConfig {
    TrainConfig {
        name: None,
        arch: arch(UnitKind::Transformer),
        task: TaskSpec::SyntheticClassification {
            train_size: 512,
            eval_size: 64,
            margin: 0.1,
        },
        mode,
        strategy: Strategy::Bottom2Up,
        m,
        optimizer,
        hyper: Hyperparams::default(),
        lr: 1e-3,
        warmup: 0.0,
        decay: Decay::Constant,
        precision: Precision::Fp32,
        batch_size: 16,
        steps: 1 << 24,
        seeds: Seeds::default(),
        grad_clip: None,
    }
}
