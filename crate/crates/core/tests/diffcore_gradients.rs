//! Finite-difference checks for every differentiable op, 20+ random shapes and
//! seeds each, in 64-bit.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use respcl::diffcore::{Graph, Tensor};

const SEEDS: u64 = 20;

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..5)).collect()
}

fn run(name: &str, mut case: impl FnMut(u64, &mut ChaCha8Rng) -> f64) {
    for seed in 0..SEEDS {
        let mut r = rng(seed * 7919 + 13);
        let err = case(seed, &mut r);
        assert!(err <= GRAD_TOL, "{name} seed {seed}: rel error {err:e}");
    }
}

#[test]
fn matmul_2d() {
    run("matmul", |seed, r| {
        let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = random_tensor(r, &[m, k], -1.0, 1.0);
        let b = random_tensor(r, &[k, n], -1.0, 1.0);
        grad_check(seed, &[a, b], |g, v| g.matmul(v[0], v[1]))
    });
}

#[test]
fn matmul_shared_weight_over_leading_axes() {
    run("matmul shared", |seed, r| {
        let lead = dims(r, 2);
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = random_tensor(r, &[lead[0], lead[1], m, k], -1.0, 1.0);
        let b = random_tensor(r, &[k, n], -1.0, 1.0);
        grad_check(seed, &[a, b], |g, v| g.matmul(v[0], v[1]))
    });
}

#[test]
fn matmul_batched_and_transposed() {
    run("matmul batched", |seed, r| {
        let bt = r.random_range(1..4);
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = random_tensor(r, &[bt, m, k], -1.0, 1.0);
        let b = random_tensor(r, &[bt, k, n], -1.0, 1.0);
        let c = random_tensor(r, &[bt, n, k], -1.0, 1.0);
        let e1 = grad_check(seed, &[a.clone(), b], |g, v| g.matmul(v[0], v[1]));
        let e2 = grad_check(seed, &[a, c], |g, v| g.matmul_t(v[0], v[1]));
        e1.max(e2)
    });
    run("matmul_t shared", |seed, r| {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let a = random_tensor(r, &[2, m, k], -1.0, 1.0);
        let b = random_tensor(r, &[n, k], -1.0, 1.0);
        grad_check(seed, &[a, b], |g, v| g.matmul_t(v[0], v[1]))
    });
}

#[test]
fn add_sub_mul_with_broadcast() {
    run("add/sub/mul", |seed, r| {
        let s = dims(r, 3);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let b = random_tensor(r, &s, -1.0, 1.0);
        let row = random_tensor(r, &s[2..], -1.0, 1.0);
        let e = [
            grad_check(seed, &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1])),
            grad_check(seed, &[a.clone(), row.clone()], |g, v| g.add(v[0], v[1])),
            grad_check(seed, &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])),
            grad_check(seed, &[a.clone(), b], |g, v| g.mul(v[0], v[1])),
            grad_check(seed, &[a.clone(), row], |g, v| g.mul(v[0], v[1])),
            grad_check(seed, &[a.clone()], |g, v| g.mul(v[0], v[0])),
            grad_check(seed, &[a.clone()], |g, v| g.scale(v[0], -1.7)),
            grad_check(seed, &[a], |g, v| g.add_scalar(v[0], 0.3)),
        ];
        e.into_iter().fold(0.0, f64::max)
    });
}

#[test]
fn pointwise_nonlinearities() {
    run("relu/tanh/sigmoid", |seed, r| {
        let s = dims(r, 2);
        let a = random_away_from_zero(r, &s);
        let e = [
            grad_check(seed, &[a.clone()], |g, v| g.relu(v[0])),
            grad_check(seed, &[a.clone()], |g, v| g.tanh(v[0])),
            grad_check(seed, &[a], |g, v| g.sigmoid(v[0])),
        ];
        e.into_iter().fold(0.0, f64::max)
    });
}

#[test]
fn softmax_and_log_softmax_every_axis() {
    run("softmax", |seed, r| {
        let s = dims(r, 3);
        let axis = r.random_range(0..3);
        let a = random_tensor(r, &s, -2.0, 2.0);
        let e1 = grad_check(seed, &[a.clone()], |g, v| g.softmax(v[0], axis));
        let e2 = grad_check(seed, &[a], |g, v| g.log_softmax(v[0], axis));
        e1.max(e2)
    });
}

#[test]
fn softmax_through_masked_fill() {
    run("masked softmax", |seed, r| {
        let (rows, cols) = (r.random_range(1..5), r.random_range(2..6));
        let a = random_tensor(r, &[rows, cols], -2.0, 2.0);
        // keep column 0 visible so each row has a finite entry
        let mask: Vec<bool> = (0..rows * cols)
            .map(|i| i % cols != 0 && r.random::<bool>())
            .collect();
        let e1 = grad_check(seed, &[a.clone()], |g, v| {
            let m = g.masked_fill(v[0], &mask, f64::NEG_INFINITY)?;
            g.softmax(m, 1)
        });
        let idx: Vec<usize> = vec![0; rows];
        let e2 = grad_check(seed, &[a], |g, v| {
            let m = g.masked_fill(v[0], &mask, f64::NEG_INFINITY)?;
            let ls = g.log_softmax(m, 1)?;
            g.gather(ls, &idx)
        });
        e1.max(e2)
    });
}

#[test]
fn layer_norm_all_inputs() {
    run("layer_norm", |seed, r| {
        let s = dims(r, 2);
        let d = r.random_range(2..7);
        let a = random_tensor(r, &[s[0], s[1], d], -2.0, 2.0);
        let gamma = random_tensor(r, &[d], 0.5, 1.5);
        let beta = random_tensor(r, &[d], -0.5, 0.5);
        grad_check(seed, &[a, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
    });
}

#[test]
fn reductions() {
    run("mean/sum", |seed, r| {
        let s = dims(r, 3);
        let axis = r.random_range(0..3);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let e = [
            grad_check(seed, &[a.clone()], |g, v| g.mean(v[0], axis)),
            grad_check(seed, &[a.clone()], |g, v| g.sum_all(v[0])),
            grad_check(seed, &[a], |g, v| g.mean_all(v[0])),
        ];
        e.into_iter().fold(0.0, f64::max)
    });
}

#[test]
fn structural_ops() {
    run("concat/slice/reshape/permute", |seed, r| {
        let s = dims(r, 3);
        let axis = r.random_range(0..3);
        let a = random_tensor(r, &s, -1.0, 1.0);
        let mut s2 = s.clone();
        s2[axis] = r.random_range(1..4);
        let b = random_tensor(r, &s2, -1.0, 1.0);
        let start = r.random_range(0..s[axis]);
        let len = r.random_range(1..=s[axis] - start);
        let total: usize = s.iter().product();
        let perm = [[0, 1, 2], [2, 0, 1], [1, 2, 0], [0, 2, 1], [2, 1, 0]][r.random_range(0..5)];
        let e = [
            grad_check(seed, &[a.clone(), b], |g, v| g.concat(&[v[0], v[1], v[0]], axis)),
            grad_check(seed, &[a.clone()], |g, v| g.slice(v[0], axis, start, len)),
            grad_check(seed, &[a.clone()], |g, v| g.reshape(v[0], &[total])),
            grad_check(seed, &[a], |g, v| g.permute(v[0], &perm)),
        ];
        e.into_iter().fold(0.0, f64::max)
    });
}

#[test]
fn dropout_with_fixed_stream() {
    run("dropout", |seed, r| {
        let s = dims(r, 2);
        let a = random_tensor(r, &s, -1.0, 1.0);
        grad_check(seed, &[a], |g, v| {
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            g.dropout(v[0], 0.4, true, &mut stream)
        })
    });
}

#[test]
fn normalisation_gather_and_bce() {
    run("l2/gather/bce", |seed, r| {
        let (rows, cols) = (r.random_range(1..5), r.random_range(2..6));
        let a = random_away_from_zero(r, &[rows, cols]);
        let idx: Vec<usize> = (0..rows).map(|_| r.random_range(0..cols)).collect();
        let targets: Vec<f64> = (0..rows * cols).map(|_| f64::from(r.random::<bool>() as u8)).collect();
        let pw = r.random_range(0.5..3.0);
        let e = [
            grad_check(seed, &[a.clone()], |g, v| g.l2_normalize(v[0])),
            grad_check(seed, &[a.clone()], |g, v| g.gather(v[0], &idx)),
            grad_check(seed, &[a], |g, v| g.bce_with_logits(v[0], &targets, pw)),
        ];
        e.into_iter().fold(0.0, f64::max)
    });
}

#[test]
fn composite_attention_like_graph() {
    run("composite", |seed, r| {
        let (t, d) = (r.random_range(2..5), r.random_range(2..5));
        let x = random_tensor(r, &[2, t, d], -1.0, 1.0);
        let w = random_tensor(r, &[d, d], -1.0, 1.0);
        let gamma = random_tensor(r, &[d], 0.5, 1.5);
        let beta = random_tensor(r, &[d], -0.5, 0.5);
        grad_check(seed, &[x, w, gamma, beta], |g, v| {
            let q = g.matmul(v[0], v[1])?;
            let s = g.matmul_t(q, v[0])?;
            let p = g.softmax(s, 2)?;
            let o = g.matmul(p, v[0])?;
            let h = g.add(o, v[0])?;
            let n = g.layer_norm(h, v[2], v[3], 1e-5)?;
            let t = g.tanh(n)?;
            g.mean(t, 1)
        })
    });
}

/// Random `[B, T, T]` table with a visible diagonal.
fn blocked_table(r: &mut ChaCha8Rng, b: usize, t: usize) -> Vec<bool> {
    (0..b * t * t)
        .map(|i| {
            let (q, k) = ((i / t) % t, i % t);
            q != k && r.random_bool(0.4)
        })
        .collect()
}

#[test]
fn multi_head_attention_gradients() {
    run("attention", |seed, r| {
        let (b, t) = (r.random_range(1..3), r.random_range(2..5));
        let heads = r.random_range(1..4);
        let d = heads * r.random_range(1..3);
        let q = random_tensor(r, &[b, t, d], -1.0, 1.0);
        let k = random_tensor(r, &[b, t, d], -1.0, 1.0);
        let v = random_tensor(r, &[b, t, d], -1.0, 1.0);
        let blocked = blocked_table(r, b, t);
        let e1 = grad_check(seed, &[q.clone(), k.clone(), v.clone()], |g, x| {
            Ok(g.multi_head_attention(x[0], x[1], x[2], heads, Some(&blocked))?.0)
        });
        let e2 = grad_check(seed, &[q.clone(), k, v], |g, x| {
            Ok(g.multi_head_attention(x[0], x[1], x[2], heads, None)?.0)
        });
        // one input feeding all three roles
        let e3 = grad_check(seed, &[q], |g, x| Ok(g.multi_head_attention(x[0], x[0], x[0], heads, Some(&blocked))?.0));
        e1.max(e2).max(e3)
    });
}

#[test]
fn multi_head_attention_matches_composed_ops() {
    let mut r = rng(77);
    for _ in 0..20 {
        let (b, t, heads) = (r.random_range(1..4), r.random_range(1..6), r.random_range(1..4));
        let dh = r.random_range(1..4);
        let d = heads * dh;
        let blocked = blocked_table(&mut r, b, t);
        let mut g = Graph::<f64>::new();
        let [q, k, v] = [0; 3].map(|_| g.variable(random_tensor(&mut r, &[b, t, d], -2.0, 2.0)).unwrap());
        let (fused, probs) = g.multi_head_attention(q, k, v, heads, Some(&blocked)).unwrap();

        let split = |g: &mut Graph<f64>, x| {
            let y = g.reshape(x, &[b, t, heads, dh]).unwrap();
            g.permute(y, &[0, 2, 1, 3]).unwrap()
        };
        let (qh, kh, vh) = (split(&mut g, q), split(&mut g, k), split(&mut g, v));
        let s = g.matmul_t(qh, kh).unwrap();
        let s = g.scale(s, 1.0 / (dh as f64).sqrt()).unwrap();
        let per_head: Vec<bool> = blocked
            .chunks(t * t)
            .flat_map(|c| std::iter::repeat_n(c, heads).flatten().copied())
            .collect();
        let s = g.masked_fill(s, &per_head, f64::NEG_INFINITY).unwrap();
        let p = g.softmax(s, 3).unwrap();
        let o = g.matmul(p, vh).unwrap();
        let o = g.permute(o, &[0, 2, 1, 3]).unwrap();
        let o = g.reshape(o, &[b, t, d]).unwrap();
        for (x, y) in g.value(fused).data().iter().zip(g.value(o).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(g.value(probs).shape(), &[b, heads, t, t]);
        for (x, y) in g.value(probs).data().iter().zip(g.value(p).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_examples() {
    // loss = sum(x) -> grad 1
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let l = g.sum_all(x).unwrap();
    let gr = g.gradients(l).unwrap();
    assert_eq!(gr.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    // loss = x·y -> grad x = y, grad y = x
    let mut g = Graph::<f64>::new();
    let xv = [1.0, 2.0, 3.0];
    let yv = [-1.0, 0.5, 4.0];
    let x = g.variable(Tensor::new(&[1, 3], xv.to_vec()).unwrap()).unwrap();
    let y = g.variable(Tensor::new(&[1, 3], yv.to_vec()).unwrap()).unwrap();
    let l = g.matmul_t(x, y).unwrap();
    let l = g.sum_all(l).unwrap();
    let gr = g.gradients(l).unwrap();
    assert_eq!(gr.get(x).unwrap(), &yv);
    assert_eq!(gr.get(y).unwrap(), &xv);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2])).unwrap();
    let err = g.gradients(x).unwrap_err();
    assert_eq!(err.class(), "NonScalarLoss");
}

#[test]
fn unreachable_leaves_get_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::zeros(&[2])).unwrap();
    let y = g.variable(Tensor::zeros(&[2])).unwrap();
    let l = g.sum_all(x).unwrap();
    let gr = g.gradients(l).unwrap();
    assert!(gr.get(y).is_none());
}
