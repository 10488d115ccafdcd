//! Central finite-difference checks for every tape primitive.
//!
//! Each primitive is wrapped as `L(θ) = Σ R ⊙ f(θ)` with a fixed random
//! projection `R`, so every output element contributes to the gradient.

use hift_core::{DType, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 50;
const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
/// Denominator floor so gradients near zero are compared absolutely.
const FLOOR: f64 = 1e-3;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Values bounded away from zero, for kinked primitives.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn loss_with(params: &Vec<Tensor>, build: &Build, proj_seed: u64) -> Result<(Tape, Var)> {
    let mut tape = Tape::new(DType::F64);
    let vars = (0..params.len())
        .map(|i| tape.param(params, i))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let r = rand_vec(&mut rng, shape.iter().product(), 1.0);
    let r = tape.input(shape, r)?;
    let weighted = tape.mul(out, r)?;
    let l = tape.sum(weighted);
    Ok((tape, l))
}

fn max_rel_error(mut params: Vec<Tensor>, build: &Build, proj_seed: u64) -> f64 {
    for p in &mut params {
        p.set_trainable(true);
    }
    let (tape, l) = loss_with(&params, build, proj_seed).unwrap();
    tape.backward(l, &mut params).unwrap();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap().to_vec()).collect();
    for p in &mut params {
        p.clear_grad();
    }

    let eval = |ps: &Vec<Tensor>| {
        let (tape, l) = loss_with(ps, build, proj_seed).unwrap();
        tape.value(l)[0]
    };
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        for j in 0..params[i].numel() {
            let base = params[i].data().to_vec();
            let mut shifted = base.clone();
            shifted[j] = base[j] + H;
            params[i].assign(&shifted).unwrap();
            let up = eval(&params);
            shifted[j] = base[j] - H;
            params[i].assign(&shifted).unwrap();
            let down = eval(&params);
            params[i].assign(&base).unwrap();
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / FLOOR.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, DType::F64, data).unwrap()
}

/// Runs `INSTANCES` random cases; `case` returns the parameters and the
/// primitive applied to them.
fn check(name: &str, case: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>)) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, build) = case(&mut rng);
        let err = max_rel_error(params, build.as_ref(), seed + 1000);
        assert!(err < TOL, "{name}: instance {seed} has relative error {err:e}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

pub fn matmul() {
    check("matmul", |rng| {
        let (r, s) = dims(rng);
        let c = rng.gen_range(1..5);
        let a = tensor(vec![r, s], rand_vec(rng, r * s, 1.0));
        let b = tensor(vec![s, c], rand_vec(rng, s * c, 1.0));
        (vec![a, b], Box::new(|t, v| t.matmul(v[0], v[1])))
    });
}

pub fn bias_add() {
    check("bias_add", |rng| {
        let (r, c) = dims(rng);
        let x = tensor(vec![r, c], rand_vec(rng, r * c, 1.0));
        let b = tensor(vec![c], rand_vec(rng, c, 1.0));
        (vec![x, b], Box::new(|t, v| t.bias_add(v[0], v[1])))
    });
}

pub fn tile_add() {
    check("tile_add", |rng| {
        let (l, d) = dims(rng);
        let reps = rng.gen_range(1..4);
        let x = tensor(vec![reps * l, d], rand_vec(rng, reps * l * d, 1.0));
        let tile = tensor(vec![l, d], rand_vec(rng, l * d, 1.0));
        (vec![x, tile], Box::new(|t, v| t.tile_add(v[0], v[1])))
    });
}

pub fn add_and_mul() {
    check("add", |rng| {
        let (r, c) = dims(rng);
        let a = tensor(vec![r, c], rand_vec(rng, r * c, 1.0));
        let b = tensor(vec![r, c], rand_vec(rng, r * c, 1.0));
        (vec![a, b], Box::new(|t, v| t.add(v[0], v[1])))
    });
    check("mul", |rng| {
        let (r, c) = dims(rng);
        let a = tensor(vec![r, c], rand_vec(rng, r * c, 1.0));
        let b = tensor(vec![r, c], rand_vec(rng, r * c, 1.0));
        (vec![a, b], Box::new(|t, v| t.mul(v[0], v[1])))
    });
}

pub fn scale_and_sum() {
    check("scale", |rng| {
        let (r, c) = dims(rng);
        let f = rng.gen_range(-3.0..3.0);
        let x = tensor(vec![r, c], rand_vec(rng, r * c, 1.0));
        (vec![x], Box::new(move |t, v| Ok(t.scale(v[0], f))))
    });
    check("sum", |rng| {
        let (r, c) = dims(rng);
        let x = tensor(vec![r, c], rand_vec(rng, r * c, 1.0));
        (vec![x], Box::new(|t, v| Ok(t.sum(v[0]))))
    });
}

pub fn relu() {
    check("relu", |rng| {
        let (r, c) = dims(rng);
        let x = tensor(vec![r, c], away_from_zero(rng, r * c));
        (vec![x], Box::new(|t, v| Ok(t.relu(v[0]))))
    });
}

pub fn gelu() {
    check("gelu", |rng| {
        let (r, c) = dims(rng);
        let x = tensor(vec![r, c], rand_vec(rng, r * c, 3.0));
        (vec![x], Box::new(|t, v| Ok(t.gelu(v[0]))))
    });
}

pub fn layer_norm() {
    check("layer_norm", |rng| {
        let r = rng.gen_range(1..4);
        let c = rng.gen_range(2..6);
        let x = tensor(vec![r, c], rand_vec(rng, r * c, 2.0));
        let g = tensor(vec![c], rand_vec(rng, c, 1.5));
        let b = tensor(vec![c], rand_vec(rng, c, 1.0));
        (vec![x, g, b], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])))
    });
}

pub fn embedding_lookup() {
    check("embedding_lookup", |rng| {
        let (vocab, d) = (rng.gen_range(2..7), rng.gen_range(1..5));
        let n = rng.gen_range(1..8);
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
        let table = tensor(vec![vocab, d], rand_vec(rng, vocab * d, 1.0));
        (vec![table], Box::new(move |t, v| t.embedding_lookup(v[0], &ids)))
    });
}

pub fn self_attention() {
    check("self_attention", |rng| {
        let (batch, l, d) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let n = batch * l * d;
        let q = tensor(vec![batch * l, d], rand_vec(rng, n, 1.0));
        let k = tensor(vec![batch * l, d], rand_vec(rng, n, 1.0));
        let val = tensor(vec![batch * l, d], rand_vec(rng, n, 1.0));
        (
            vec![q, k, val],
            Box::new(move |t, v| t.self_attention(v[0], v[1], v[2], l)),
        )
    });
}

pub fn mean_pool() {
    check("mean_pool", |rng| {
        let (batch, l, d) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let x = tensor(vec![batch * l, d], rand_vec(rng, batch * l * d, 1.0));
        (vec![x], Box::new(move |t, v| t.mean_pool(v[0], l)))
    });
}

pub fn softmax_cross_entropy() {
    check("softmax_cross_entropy", |rng| {
        let (b, c) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let logits = tensor(vec![b, c], rand_vec(rng, b * c, 3.0));
        (
            vec![logits],
            Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels)),
        )
    });
}

pub fn mse() {
    check("mse", |rng| {
        let b = rng.gen_range(1..6);
        let target = rand_vec(rng, b, 2.0);
        let pred = tensor(vec![b, 1], rand_vec(rng, b, 2.0));
        (vec![pred], Box::new(move |t, v| t.mse(v[0], &target)))
    });
}

pub fn composed_network() {
    // a dense unit followed by a classifier, all parameters live at once
    check("composed", |rng| {
        let (b, d, c) = (rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..4));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let x = tensor(vec![b, d], rand_vec(rng, b * d, 1.0));
        let w = tensor(vec![d, d], rand_vec(rng, d * d, 1.0));
        let g = tensor(vec![d], rand_vec(rng, d, 1.0));
        let be = tensor(vec![d], rand_vec(rng, d, 1.0));
        let head = tensor(vec![d, c], rand_vec(rng, d * c, 1.0));
        (
            vec![x, w, g, be, head],
            Box::new(move |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.gelu(h);
                let r = t.add(v[0], h)?;
                let n = t.layer_norm(r, v[2], v[3])?;
                let o = t.matmul(n, v[4])?;
                t.softmax_cross_entropy(o, &labels)
            }),
        )
    });
}

pub const ALL: &[(&str, fn())] = &[
    ("matmul", matmul),
    ("bias_add", bias_add),
    ("tile_add", tile_add),
    ("add_and_mul", add_and_mul),
    ("scale_and_sum", scale_and_sum),
    ("relu", relu),
    ("gelu", gelu),
    ("layer_norm", layer_norm),
    ("embedding_lookup", embedding_lookup),
    ("self_attention", self_attention),
    ("mean_pool", mean_pool),
    ("softmax_cross_entropy", softmax_cross_entropy),
    ("mse", mse),
    ("composed_network", composed_network),
];
