#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respcl::diffcore::{Graph, Tensor, Var};
use respcl::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Values bounded away from zero (kinks of relu, sign of normalisers).
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Norm-wise relative error ‖a − b‖ / max(‖a‖, ‖b‖); absolute when both
/// norms are below 1e-6 (gradients that vanish identically, e.g. a key bias
/// under softmax shift invariance).
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-6 {
        diff
    } else {
        diff / denom
    }
}

/// Compare reverse-mode gradients of `sum(build(inputs) ⊙ weights)` against
/// central finite differences. `weights` is a fixed random tensor so every
/// output element contributes. Returns the worst relative error across inputs.
pub fn grad_check<F>(seed: u64, inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Graph<f64>, Vec<Var>, Var, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone()).unwrap()).collect();
        let out = build(&mut g, &vars).expect("forward");
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = rng(seed ^ 0x5eed);
                random_tensor(&mut r, g.shape(out), -1.0, 1.0)
            }
        };
        let wv = g.constant(w.clone()).unwrap();
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let l = g.value(loss).item();
        (l, g, vars, loss, w)
    };

    let (_, g, vars, loss, weights) = eval(inputs, None);
    let grads = g.gradients(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k]) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = vec![0.0; input.len()];
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (lp, ..) = eval(&plus, Some(&weights));
            let (lm, ..) = eval(&minus, Some(&weights));
            numeric[i] = (lp - lm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    worst
}

/// Finite-difference check of a scalar function of a flat parameter vector.
pub fn grad_check_scalar<F>(params: &[f64], analytic: &[f64], f: F) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut numeric = vec![0.0; params.len()];
    for i in 0..params.len() {
        let mut p = params.to_vec();
        p[i] += FD_STEP;
        let lp = f(&p);
        p[i] -= 2.0 * FD_STEP;
        let lm = f(&p);
        numeric[i] = (lp - lm) / (2.0 * FD_STEP);
    }
    rel_error(analytic, &numeric)
}
