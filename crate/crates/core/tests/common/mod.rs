//! Shared helpers for the integration tests: a central finite-difference
//! gradient oracle and small seeded fixtures.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reconprune::tensor::{Graph, Var};

pub const FD_STEP: f32 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// One differentiable input: shape and starting values.
#[derive(Debug, Clone)]
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Input {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Input {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Self {
        let n = shape.iter().product();
        Input::new(shape, uniform(&mut rng(seed), n, lo, hi))
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Worst per-input relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub rel_err: f64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

fn projection_weights(n: usize) -> Vec<f32> {
    let mut r = rng(0xfd);
    (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()
}

/// Values of `build` at `inputs`, projected onto fixed random weights and
/// summed in f64.
fn projected(inputs: &[Input], build: &dyn Fn(&mut Graph<f32>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.constant(&i.shape, i.data.clone()).expect("constant"))
        .collect();
    let out = build(&mut g, &vars);
    let w = projection_weights(g.value(out).len());
    g.value(out).iter().zip(&w).map(|(&v, &r)| v as f64 * r as f64).sum()
}

/// Compares the tape gradient of `Σ rᵢ·out_i` against central differences
/// of `oracle` (usually `build` itself) with step [`FD_STEP`].
pub fn gradcheck_with(
    inputs: &[Input],
    build: &dyn Fn(&mut Graph<f32>, &[Var]) -> Var,
    oracle: &dyn Fn(&mut Graph<f32>, &[Var]) -> Var,
) -> GradCheck {
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.variable(&i.shape, i.data.clone()).expect("variable"))
        .collect();
    let out = build(&mut g, &vars);
    let shape = g.shape(out).to_vec();
    let w = g.constant(&shape, projection_weights(g.value(out).len())).expect("weights");
    let prod = g.mul(out, w).expect("mul");
    let loss = g.sum(prod).expect("sum");
    g.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(i, &v)| match g.grad(v) {
            Some(gr) => gr.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; i.data.len()],
        })
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut col = Vec::with_capacity(inputs[k].data.len());
        for e in 0..inputs[k].data.len() {
            let mut plus = inputs.to_vec();
            plus[k].data[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data[e] -= FD_STEP;
            let h = (plus[k].data[e] as f64 - minus[k].data[e] as f64) / 2.0;
            col.push((projected(&plus, oracle) - projected(&minus, oracle)) / (2.0 * h));
        }
        numeric.push(col);
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rel_err = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(n));
        if scale > 0.0 {
            rel_err = rel_err.max(norm(&diff) / scale);
        }
    }
    GradCheck {
        rel_err,
        analytic,
        numeric,
    }
}

pub fn gradcheck(inputs: &[Input], build: &dyn Fn(&mut Graph<f32>, &[Var]) -> Var) -> GradCheck {
    gradcheck_with(inputs, build, build)
}
