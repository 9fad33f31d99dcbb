//! Finite-difference verification of every differentiable primitive.
//!
//! Each check rebuilds its computation from scratch for the probe
//! evaluations, so the comparison only shares the forward kernels with the
//! reverse-mode path it verifies. Losses are random projections of the op
//! output, which exercises the full Jacobian rather than the column sums.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::oracle::{finite_difference_grads, max_grad_rel_err};
use crate::rng;
use crate::tensor::Tape;

pub const FD_STEP: f64 = 1e-5;

/// Outcome of one suite entry.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: u64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_vec(rng: &mut ChaCha12Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Generic harness: `build` creates its leaves from the given blocks and
/// returns `(loss, leaves)`. The analytic pass runs backward once; the
/// numeric pass rebuilds the whole graph per central-difference probe.
fn run_check(
    params: Vec<Vec<f64>>,
    build: impl Fn(&Tape, &[Vec<f64>]) -> (crate::tensor::Var, Vec<crate::tensor::Var>),
) -> f64 {
    let tape = Tape::new();
    let (loss, leaves) = build(&tape, &params);
    tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad()).collect();

    let f = |p: &[Vec<f64>]| -> f64 {
        let t = Tape::new();
        build(&t, p).0.scalar_value()
    };
    let numeric = finite_difference_grads(&f, &params, FD_STEP);
    max_grad_rel_err(&analytic, &numeric)
}

/// Leaf helper used inside `build` closures: params arrive as flat blocks.
fn leaf(tape: &Tape, data: &[f64], shape: &[usize], grad: bool) -> crate::tensor::Var {
    tape.leaf(data.to_vec(), shape, grad).unwrap()
}

type CheckFn = fn(&mut ChaCha12Rng) -> f64;

fn check_elementwise_binary(rng: &mut ChaCha12Rng) -> f64 {
    // Broadcast [3,4] against [4]; all four arithmetic kinds chained.
    let a = rand_vec(rng, 12, -2.0, 2.0);
    let b = rand_vec(rng, 4, 0.5, 2.0); // keep divisors away from zero
    let r = rand_vec(rng, 12, -1.0, 1.0);
    run_check(vec![a, b], move |t, p| {
        let a = leaf(t, &p[0], &[3, 4], true);
        let b = leaf(t, &p[1], &[4], true);
        let rr = leaf(t, &r, &[3, 4], false);
        let sum = a.add(&b).unwrap();
        let diff = a.sub(&b).unwrap();
        let prod = a.mul(&b).unwrap();
        let quot = a.div(&b).unwrap();
        let mix = sum.mul(&rr).unwrap().add(&diff).unwrap().add(&prod).unwrap().add(&quot).unwrap();
        (mix.sum_all(), vec![a, b])
    })
}

fn check_min_max(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 16, -2.0, 2.0);
    let b = rand_vec(rng, 16, -2.0, 2.0);
    let r = rand_vec(rng, 16, -1.0, 1.0);
    run_check(vec![a, b], move |t, p| {
        let a = leaf(t, &p[0], &[16], true);
        let b = leaf(t, &p[1], &[16], true);
        let rr = leaf(t, &r, &[16], false);
        let m = a.minimum(&b).unwrap().add(&a.maximum(&b).unwrap()).unwrap();
        (m.mul(&rr).unwrap().sum_all(), vec![a, b])
    })
}

fn check_unary_chain(rng: &mut ChaCha12Rng) -> f64 {
    // relu / sigmoid / exp / ln / sqrt / abs / neg with safe domains.
    let a = rand_vec(rng, 24, 0.3, 2.0);
    let r = rand_vec(rng, 24, -1.0, 1.0);
    run_check(vec![a], move |t, p| {
        let a = leaf(t, &p[0], &[24], true);
        let rr = leaf(t, &r, &[24], false);
        let y = a
            .ln()
            .add(&a.sqrt())
            .unwrap()
            .add(&a.exp().scale(0.1))
            .unwrap()
            .add(&a.sigmoid())
            .unwrap()
            .add(&a.add_scalar(-1.0).relu())
            .unwrap()
            .add(&a.add_scalar(-1.0).abs())
            .unwrap()
            .add(&a.neg())
            .unwrap();
        (y.mul(&rr).unwrap().sum_all(), vec![a])
    })
}

fn check_scalar_ops(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 20, 0.2, 1.8);
    let r = rand_vec(rng, 20, -1.0, 1.0);
    run_check(vec![a], move |t, p| {
        let a = leaf(t, &p[0], &[20], true);
        let rr = leaf(t, &r, &[20], false);
        let y = a
            .scale(1.7)
            .add_scalar(0.3)
            .pow_scalar(1.5)
            .add(&a.clamp(0.5, 1.5))
            .unwrap();
        (y.mul(&rr).unwrap().sum_all(), vec![a])
    })
}

fn check_matmul(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 2 * 3 * 4, -1.0, 1.0);
    let b = rand_vec(rng, 4 * 5, -1.0, 1.0);
    let r = rand_vec(rng, 2 * 3 * 5, -1.0, 1.0);
    run_check(vec![a, b], move |t, p| {
        // Batched [2,3,4] x broadcast [4,5].
        let a = leaf(t, &p[0], &[2, 3, 4], true);
        let b = leaf(t, &p[1], &[4, 5], true);
        let rr = leaf(t, &r, &[2, 3, 5], false);
        (a.matmul_scaled(&b, 0.7).unwrap().mul(&rr).unwrap().sum_all(), vec![a, b])
    })
}

fn check_softmax(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 3 * 7, -3.0, 3.0);
    let r = rand_vec(rng, 3 * 7, -1.0, 1.0);
    run_check(vec![a], move |t, p| {
        let a = leaf(t, &p[0], &[3, 7], true);
        let rr = leaf(t, &r, &[3, 7], false);
        (a.softmax(1).unwrap().mul(&rr).unwrap().sum_all(), vec![a])
    })
}

fn check_log_softmax(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 4 * 5, -3.0, 3.0);
    let r = rand_vec(rng, 4 * 5, -1.0, 1.0);
    run_check(vec![a], move |t, p| {
        let a = leaf(t, &p[0], &[4, 5], true);
        let rr = leaf(t, &r, &[4, 5], false);
        (a.log_softmax(1).unwrap().mul(&rr).unwrap().sum_all(), vec![a])
    })
}

fn check_masked_softmax(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 4 * 6, -3.0, 3.0);
    let r = rand_vec(rng, 4 * 6, -1.0, 1.0);
    let mut mask = vec![false; 24];
    for m in mask.iter_mut() {
        *m = rng.gen_bool(0.3);
    }
    // keep one live entry per row
    for row in 0..4 {
        mask[row * 6] = false;
    }
    let mask: std::rc::Rc<[bool]> = mask.into();
    run_check(vec![a], move |t, p| {
        let a = leaf(t, &p[0], &[4, 6], true);
        let rr = leaf(t, &r, &[4, 6], false);
        (a.masked_softmax(1, mask.clone()).unwrap().mul(&rr).unwrap().sum_all(), vec![a])
    })
}

fn check_layer_norm(rng: &mut ChaCha12Rng) -> f64 {
    let x = rand_vec(rng, 3 * 6, -2.0, 2.0);
    let gain = rand_vec(rng, 6, 0.5, 1.5);
    let bias = rand_vec(rng, 6, -0.5, 0.5);
    let r = rand_vec(rng, 3 * 6, -1.0, 1.0);
    run_check(vec![x, gain, bias], move |t, p| {
        let x = leaf(t, &p[0], &[3, 6], true);
        let gain = leaf(t, &p[1], &[6], true);
        let bias = leaf(t, &p[2], &[6], true);
        let rr = leaf(t, &r, &[3, 6], false);
        (x.layer_norm(&gain, &bias, 1e-5).unwrap().mul(&rr).unwrap().sum_all(), vec![x, gain, bias])
    })
}

fn check_conv3d(rng: &mut ChaCha12Rng) -> f64 {
    let x = rand_vec(rng, 2 * 4 * 4 * 4, -1.0, 1.0);
    let w = rand_vec(rng, 3 * 2 * 3 * 3 * 3, -0.5, 0.5);
    let b = rand_vec(rng, 3, -0.2, 0.2);
    run_check(vec![x, w, b], move |t, p| {
        let x = leaf(t, &p[0], &[2, 4, 4, 4], true);
        let w = leaf(t, &p[1], &[3, 2, 3, 3, 3], true);
        let b = leaf(t, &p[2], &[3], true);
        (x.conv3d(&w, Some(&b), [2, 1, 1], [1, 1, 1]).unwrap().sum_all(), vec![x, w, b])
    })
}

fn check_reductions(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 2 * 3 * 4, -2.0, 2.0);
    let r = rand_vec(rng, 2 * 4, -1.0, 1.0);
    run_check(vec![a], move |t, p| {
        let a = leaf(t, &p[0], &[2, 3, 4], true);
        let rr = leaf(t, &r, &[2, 4], false);
        let s = a.sum_axis(1).unwrap().mul(&rr).unwrap().sum_all();
        let loss = s.add(&a.mean_all()).unwrap().add(&a.sum_all().scale(0.25)).unwrap();
        (loss, vec![a])
    })
}

fn check_shape_ops(rng: &mut ChaCha12Rng) -> f64 {
    let a = rand_vec(rng, 2 * 3 * 4, -2.0, 2.0);
    let b = rand_vec(rng, 2 * 3 * 4, -2.0, 2.0);
    let r = rand_vec(rng, 4 * 3 * 4, -1.0, 1.0);
    run_check(vec![a, b], move |t, p| {
        let a = leaf(t, &p[0], &[2, 3, 4], true);
        let b = leaf(t, &p[1], &[2, 3, 4], true);
        let rr = leaf(t, &r, &[4, 3, 4], false);
        let ap = a.permute(&[1, 0, 2]).unwrap().reshape(&[2, 3, 4]).unwrap();
        let cat = crate::tensor::Var::concat(&[&ap, &b], 0).unwrap();
        let sel = cat.index_select(0, &[3, 0, 1, 1]).unwrap();
        (sel.mul(&rr).unwrap().sum_all(), vec![a, b])
    })
}

fn check_trilinear(rng: &mut ChaCha12Rng) -> f64 {
    let grid = rand_vec(rng, 2 * 3 * 3 * 3, -1.0, 1.0);
    // Coordinates strictly inside cells: the sampler's derivative is
    // piecewise constant, so probes must not straddle a grid line.
    let coords: Vec<f64> = (0..5 * 3).map(|_| 0.07 + 0.86 * rng.gen::<f64>()).map(|c| {
        let cell = c * 2.0; // extent-1 for dim 3
        let frac = cell - cell.floor();
        if frac < 0.05 || frac > 0.95 { c + 0.02 } else { c }
    }).collect();
    let r = rand_vec(rng, 5 * 2, -1.0, 1.0);
    run_check(vec![grid, coords], move |t, p| {
        let grid = leaf(t, &p[0], &[2, 3, 3, 3], true);
        let coords = leaf(t, &p[1], &[5, 3], true);
        let rr = leaf(t, &r, &[5, 2], false);
        (grid.trilinear_sample(&coords).unwrap().mul(&rr).unwrap().sum_all(), vec![grid, coords])
    })
}

fn check_composite_conv_attention(rng: &mut ChaCha12Rng) -> f64 {
    // conv -> flatten -> self-attention -> loss, the spec's composite graph.
    let x = rand_vec(rng, 1 * 4 * 4 * 4, -1.0, 1.0);
    let w = rand_vec(rng, 4 * 1 * 3 * 3 * 3, -0.4, 0.4);
    let wq = rand_vec(rng, 4 * 4, -0.5, 0.5);
    let wk = rand_vec(rng, 4 * 4, -0.5, 0.5);
    let wv = rand_vec(rng, 4 * 4, -0.5, 0.5);
    run_check(vec![x, w, wq, wk, wv], move |t, p| {
        let x = leaf(t, &p[0], &[1, 4, 4, 4], true);
        let w = leaf(t, &p[1], &[4, 1, 3, 3, 3], true);
        let wq = leaf(t, &p[2], &[4, 4], true);
        let wk = leaf(t, &p[3], &[4, 4], true);
        let wv = leaf(t, &p[4], &[4, 4], true);
        let feat = x.conv3d(&w, None, [2, 2, 2], [1, 1, 1]).unwrap(); // [4,2,2,2]
        let seq = feat.reshape(&[4, 8]).unwrap().permute(&[1, 0]).unwrap(); // [8,4]
        let q = seq.matmul(&wq).unwrap();
        let k = seq.matmul(&wk).unwrap();
        let v = seq.matmul(&wv).unwrap();
        let scores = q.matmul_scaled(&k.permute(&[1, 0]).unwrap(), 0.5).unwrap();
        let attn = scores.softmax(1).unwrap();
        (attn.matmul(&v).unwrap().sum_all(), vec![x, w, wq, wk, wv])
    })
}

const CHECKS: &[(&str, f64, CheckFn)] = &[
    ("elementwise", 1e-4, check_elementwise_binary),
    ("min_max", 1e-4, check_min_max),
    ("unary_chain", 1e-4, check_unary_chain),
    ("scalar_ops", 1e-4, check_scalar_ops),
    ("matmul", 1e-4, check_matmul),
    ("softmax", 1e-6, check_softmax),
    ("log_softmax", 1e-6, check_log_softmax),
    ("masked_softmax", 1e-6, check_masked_softmax),
    ("layer_norm", 1e-4, check_layer_norm),
    ("conv3d", 1e-5, check_conv3d),
    ("reductions", 1e-4, check_reductions),
    ("shape_ops", 1e-4, check_shape_ops),
    ("trilinear_sample", 1e-4, check_trilinear),
    ("conv_attention_composite", 1e-4, check_composite_conv_attention),
];

/// Run every primitive check for `seeds` seeds; results carry the worst
/// relative error observed.
pub fn run_primitive_suite(seeds: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, tolerance, f)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                let mut r = rng::stream(rng::derive(0x6772_6164, &[s, name.len() as u64]));
                worst = worst.max(f(&mut r));
            }
            CheckResult { name, max_rel_err: worst, tolerance, seeds }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_suite_passes_over_100_seeds() {
        for res in run_primitive_suite(100) {
            assert!(
                res.passed(),
                "{} failed: max rel err {} >= {}",
                res.name,
                res.max_rel_err,
                res.tolerance
            );
        }
    }
}
