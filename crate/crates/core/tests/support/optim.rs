//! Hand-derived update sequences for every optimizer, driven through the
//! public registration / residency / step API on a real model parameter.

use hift_core::{
    Arch, DType, Hyperparams, LayeredModel, MemoryLedger, OptimizerKind, OptimizerState, ParamSet, Placement, Precision,
};

const TOL: f64 = 1e-12;
const LR: f64 = 0.1;

fn model() -> LayeredModel {
    let arch = Arch {
        vocab: 4,
        seq_len: 2,
        width: 2,
        hidden: 1,
        outputs: 2,
        unit: Default::default(),
        activation: Default::default(),
        ffn_width: None,
    };
    LayeredModel::build(&arch, 0, DType::F64).unwrap()
}

/// Sets `param` to `w0`, then applies one optimizer step per gradient and
/// returns the weights after each step.
fn trajectory(kind: OptimizerKind, hyper: Hyperparams, param: &str, w0: &[f64], grads: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut m = model();
    let id = m.param_id(param).unwrap();
    m.tensor_mut(id).assign(w0).unwrap();
    let mut ledger = MemoryLedger::new();
    let mut st = OptimizerState::new(kind, hyper, Precision::Fp64, &m, Placement::Device, &mut ledger).unwrap();
    let set = ParamSet::from_ids([id]);
    m.set_trainable(&set, true).unwrap();
    st.update_optimizer_parameter(&set, &mut ledger).unwrap();
    grads
        .iter()
        .map(|g| {
            m.tensor_mut(id).accumulate_grad(g).unwrap();
            st.optimizer_step(&mut m, LR).unwrap();
            m.clear_grads();
            m.tensor(id).data().to_vec()
        })
        .collect()
}

fn assert_close(got: &[Vec<f64>], want: &[Vec<f64>]) {
    assert_eq!(got.len(), want.len());
    for (step, (g, w)) in got.iter().zip(want).enumerate() {
        for (a, b) in g.iter().zip(w) {
            assert!((a - b).abs() < TOL, "step {}: got {g:?}, want {w:?}", step + 1);
        }
    }
}

const W0: [f64; 2] = [1.0, -0.5];
const G: [&[f64]; 3] = [&[0.5, -1.0], &[-1.0, 0.25], &[2.0, 0.5]];

pub fn sgd() {
    // w ← w − 0.1·g
    let got = trajectory(OptimizerKind::Sgd, Hyperparams::default(), "head.bias", &W0, &G);
    assert_close(&got, &[vec![0.95, -0.4], vec![1.05, -0.425], vec![0.85, -0.475]]);
}

pub fn sgd_momentum() {
    // buf ← 0.9·buf + g; w ← w − 0.1·buf
    // element 0: buf = 0.5, -0.55, 1.505  → w = 0.95, 1.005, 0.8545
    // element 1: buf = -1, -0.65, -0.085 → w = -0.4, -0.335, -0.3265
    let got = trajectory(OptimizerKind::Sgdm, Hyperparams::default(), "head.bias", &W0, &G);
    assert_close(&got, &[vec![0.95, -0.4], vec![1.005, -0.335], vec![0.8545, -0.3265]]);
}

pub fn adagrad() {
    // s ← s + g²; w ← w − 0.1·g/√s  (ε = 0)
    // element 0: s = 0.25, 1.25, 5.25
    // element 1: s = 1, 1.0625, 1.3125
    let h = Hyperparams {
        eps: 0.0,
        ..Default::default()
    };
    let got = trajectory(OptimizerKind::Adagrad, h, "head.bias", &W0, &G);
    let w0 = [
        1.0 - 0.1,
        1.0 - 0.1 + 0.1 / 1.25f64.sqrt(),
        1.0 - 0.1 + 0.1 / 1.25f64.sqrt() - 0.2 / 5.25f64.sqrt(),
    ];
    let w1 = [
        -0.5 + 0.1,
        -0.4 - 0.025 / 1.0625f64.sqrt(),
        -0.4 - 0.025 / 1.0625f64.sqrt() - 0.05 / 1.3125f64.sqrt(),
    ];
    assert_close(&got, &[vec![w0[0], w1[0]], vec![w0[1], w1[1]], vec![w0[2], w1[2]]]);
}

pub fn adagrad_unit_gradients() {
    // w0 = 0, g = 1 twice: −1/√1, then −1 − 1/√2 (lr 0.1 scales both)
    let h = Hyperparams {
        eps: 0.0,
        ..Default::default()
    };
    let got = trajectory(
        OptimizerKind::Adagrad,
        h,
        "head.bias",
        &[0.0, 0.0],
        &[&[1.0, 1.0], &[1.0, 1.0]],
    );
    let two = -0.1 - 0.1 / 2f64.sqrt();
    assert_close(&got, &[vec![-0.1, -0.1], vec![two, two]]);
}

/// Scalar AdamW recurrence with decoupled decay applied before the moment
/// update.
fn adamw_oracle(mut w: f64, grads: &[f64], h: &Hyperparams) -> Vec<f64> {
    let (mut m, mut v) = (0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        w *= 1.0 - LR * h.weight_decay;
        m = h.beta1 * m + (1.0 - h.beta1) * g;
        v = h.beta2 * v + (1.0 - h.beta2) * g * g;
        let mh = m / (1.0 - h.beta1.powi(t));
        let vh = v / (1.0 - h.beta2.powi(t));
        w -= LR * mh / (vh.sqrt() + h.eps);
        out.push(w);
    }
    out
}

pub fn adamw_first_step_is_sign_descent() {
    // bias correction makes m̂ = g and v̂ = g², so with ε = 0 the first step
    // is w·(1 − lr·λ) − lr·sign(g)
    let h = Hyperparams {
        eps: 0.0,
        weight_decay: 0.01,
        ..Default::default()
    };
    let got = trajectory(OptimizerKind::AdamW, h, "head.bias", &W0, &G[..1]);
    assert_close(&got, &[vec![1.0 * 0.999 - 0.1, -0.5 * 0.999 + 0.1]]);
}

pub fn adamw_three_steps() {
    let h = Hyperparams {
        eps: 0.0,
        weight_decay: 0.01,
        ..Default::default()
    };
    // second step, element 0, by hand:
    //   m = 0.9·0.05 − 0.1 = −0.055,   m̂ = −0.055 / 0.19
    //   v = 0.999·0.00025 + 0.001 = 0.00124975,   v̂ = v / 0.001999
    let w1 = 0.899;
    let step2 = w1 * 0.999 - 0.1 * (-0.055 / 0.19) / (0.00124975f64 / 0.001999).sqrt();
    let got = trajectory(OptimizerKind::AdamW, h.clone(), "head.bias", &W0, &G);
    assert!((got[1][0] - step2).abs() < TOL);

    let e0 = adamw_oracle(W0[0], &[0.5, -1.0, 2.0], &h);
    let e1 = adamw_oracle(W0[1], &[-1.0, 0.25, 0.5], &h);
    let want: Vec<Vec<f64>> = (0..3).map(|i| vec![e0[i], e1[i]]).collect();
    assert_close(&got, &want);
}

pub fn adamw_with_default_eps_and_decay() {
    let h = Hyperparams {
        weight_decay: 0.1,
        ..Default::default()
    };
    let got = trajectory(OptimizerKind::AdamW, h.clone(), "head.bias", &W0, &G);
    let e0 = adamw_oracle(W0[0], &[0.5, -1.0, 2.0], &h);
    let e1 = adamw_oracle(W0[1], &[-1.0, 0.25, 0.5], &h);
    let want: Vec<Vec<f64>> = (0..3).map(|i| vec![e0[i], e1[i]]).collect();
    assert_close(&got, &want);
}

pub fn adafactor_vector_first_step() {
    // β̂₂ at t = 1 is 1 − 1 = 0, so v = g² + ε₁ and u = g/|g| elementwise;
    // RMS(u) = 1 so clipping is inactive and w ← w − lr·sign(g)
    let got = trajectory(
        OptimizerKind::Adafactor,
        Hyperparams::default(),
        "head.bias",
        &W0,
        &G[..1],
    );
    assert_close(&got, &[vec![0.9, -0.4]]);
}

pub fn adafactor_clips_a_sudden_large_gradient() {
    // t = 1: g = 1e-3 gives v = 1e-6 (+ε₁) and a sign step
    // t = 2: g = 1, v = β·1e-6 + (1 − β) with β = 1 − 2^-0.8, so u ≈ 1.32 per
    //        element; RMS(u) > 1 clips u back to exactly sign(g)
    let grads: [&[f64]; 2] = [&[1e-3, 1e-3], &[1.0, 1.0]];
    let got = trajectory(
        OptimizerKind::Adafactor,
        Hyperparams::default(),
        "head.bias",
        &[0.0, 0.0],
        &grads,
    );
    assert_close(&got, &[vec![-0.1, -0.1], vec![-0.2, -0.2]]);
}

pub fn adafactor_factored_matrix() {
    // G = [[1, 2], [3, 4]]: row sums R = [5, 25], column sums C = [10, 20],
    // V̂ = R Cᵀ / ΣR = [[5/3, 10/3], [25/3, 50/3]], U = G / √V̂ and
    // RMS(U)² = (3/5 + 6/5 + 27/25 + 24/25) / 4 = 0.96, so no clipping
    let g: &[f64] = &[1.0, 2.0, 3.0, 4.0];
    let got = trajectory(
        OptimizerKind::Adafactor,
        Hyperparams::default(),
        "head.weight",
        &[0.0; 4],
        &[g],
    );
    let want = vec![
        -0.1 * 1.0 / (5.0f64 / 3.0).sqrt(),
        -0.1 * 2.0 / (10.0f64 / 3.0).sqrt(),
        -0.1 * 3.0 / (25.0f64 / 3.0).sqrt(),
        -0.1 * 4.0 / (50.0f64 / 3.0).sqrt(),
    ];
    assert_close(&got, &[want]);
}

/// Factored Adafactor for a 2×2 matrix, written out from the recurrence.
fn adafactor_oracle(mut w: [f64; 4], grads: &[[f64; 4]]) -> Vec<Vec<f64>> {
    let (mut r, mut c) = ([0.0f64; 2], [0.0f64; 2]);
    let mut out = Vec::new();
    for (t, g) in grads.iter().enumerate() {
        let beta = 1.0 - ((t + 1) as f64).powf(-0.8);
        let sq: Vec<f64> = g.iter().map(|x| x * x + 1e-30).collect();
        r[0] = beta * r[0] + (1.0 - beta) * (sq[0] + sq[1]);
        r[1] = beta * r[1] + (1.0 - beta) * (sq[2] + sq[3]);
        c[0] = beta * c[0] + (1.0 - beta) * (sq[0] + sq[2]);
        c[1] = beta * c[1] + (1.0 - beta) * (sq[1] + sq[3]);
        let total = r[0] + r[1];
        let mut u = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                u[2 * i + j] = g[2 * i + j] / (r[i] * c[j] / total).sqrt();
            }
        }
        let rms = (u.iter().map(|x| x * x).sum::<f64>() / 4.0).sqrt();
        let d = rms.max(1.0);
        for k in 0..4 {
            w[k] -= LR * u[k] / d;
        }
        out.push(w.to_vec());
    }
    out
}

pub fn adafactor_factored_three_steps() {
    let grads = [[1.0, 2.0, 3.0, 4.0], [-0.5, 0.1, 2.0, -3.0], [4.0, 4.0, -1.0, 0.2]];
    let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
    let w0 = [0.3, -0.2, 0.1, 0.5];
    let got = trajectory(
        OptimizerKind::Adafactor,
        Hyperparams::default(),
        "head.weight",
        &w0,
        &refs,
    );
    assert_close(&got, &adafactor_oracle(w0, &grads));
}

pub fn step_counts_are_per_parameter() {
    let mut m = model();
    let mut ledger = MemoryLedger::new();
    let mut st = OptimizerState::new(
        OptimizerKind::AdamW,
        Hyperparams::default(),
        Precision::Fp64,
        &m,
        Placement::Device,
        &mut ledger,
    )
    .unwrap();
    let a = m.param_id("head.bias").unwrap();
    let b = m.param_id("head.weight").unwrap();
    for (set, times) in [(ParamSet::from_ids([a]), 3), (ParamSet::from_ids([b]), 1)] {
        m.freeze_all();
        m.set_trainable(&set, true).unwrap();
        st.update_optimizer_parameter(&set, &mut ledger).unwrap();
        for _ in 0..times {
            for id in set.iter() {
                let n = m.tensor(id).numel();
                m.tensor_mut(id).accumulate_grad(&vec![0.1; n]).unwrap();
            }
            st.optimizer_step(&mut m, LR).unwrap();
            m.clear_grads();
        }
    }
    assert_eq!(st.step_count(a), 3);
    assert_eq!(st.step_count(b), 1);
}

pub const ALL: &[(&str, fn())] = &[
    ("sgd", sgd),
    ("sgd_momentum", sgd_momentum),
    ("adagrad", adagrad),
    ("adagrad_unit_gradients", adagrad_unit_gradients),
    ("adamw_first_step_is_sign_descent", adamw_first_step_is_sign_descent),
    ("adamw_three_steps", adamw_three_steps),
    ("adamw_with_default_eps_and_decay", adamw_with_default_eps_and_decay),
    ("adafactor_vector_first_step", adafactor_vector_first_step),
    (
        "adafactor_clips_a_sudden_large_gradient",
        adafactor_clips_a_sudden_large_gradient,
    ),
    ("adafactor_factored_matrix", adafactor_factored_matrix),
    ("adafactor_factored_three_steps", adafactor_factored_three_steps),
    ("step_counts_are_per_parameter", step_counts_are_per_parameter),
];
