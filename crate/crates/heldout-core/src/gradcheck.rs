//! Central finite-difference verification of every autodiff op.
//!
//! This module is the independent oracle for the backward pass: it never
//! touches the VJP code, only repeated forward evaluations. It lives in the
//! library (rather than a test file) because the acceptance suite and the
//! crate's own tests both drive it.
//!
//! For each op a family of random small instances (dims ≤ 8) is generated;
//! the scalar root is `sum(op_output ∘ W)` for a fixed random cotangent `W`,
//! so every output element's contribution is exercised. Inputs to kinked
//! ops (relu, maxpool) are sampled away from their kinks, where the central
//! difference would measure nothing meaningful.

use crate::rng::{Rng, SeedTree};
use crate::tensor::{Graph, Op, PadMode, Tensor};
use crate::Result;
use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

/// Step for the symmetric difference (f(x+h) − f(x−h)) / 2h.
pub const STEP: f64 = 1e-4;

/// Accepted `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub const TOLERANCE: f64 = 1e-6;

/// Every op name the suite covers; must stay in sync with [`Op`].
pub const CHECKED_OPS: &[&str] = &[
    "matmul",
    "matmul_bt",
    "conv2d",
    "avgpool2d",
    "maxpool2d",
    "relu",
    "add",
    "mul",
    "scale",
    "reshape",
    "softmax",
    "log_softmax",
    "log",
    "sum",
    "mean",
    "normalization",
    "concat",
];

/// Worst relative error over all instances of one op.
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
}

type Build = Box<dyn Fn(&mut Graph) -> Result<Tensor>>;

/// One gradcheck problem: differentiable inputs plus the root builder.
struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

/// Run the whole suite: `instances` random cases per op, seeded by `seed`.
pub fn run_suite(seed: u64, instances: usize) -> Vec<OpReport> {
    let tree = SeedTree::new(seed);
    CHECKED_OPS
        .iter()
        .map(|&opname| {
            let mut worst: f64 = 0.0;
            for i in 0..instances {
                let mut rng = tree.child(opname).child_index(i as u64).rng();
                let inst = make_instance(opname, &mut rng);
                let err = max_rel_err(&inst);
                worst = worst.max(err);
            }
            OpReport {
                op: opname,
                instances,
                max_rel_err: worst,
            }
        })
        .collect()
}

fn eval(inst: &Instance) -> f64 {
    let mut g = Graph::inference();
    (inst.build)(&mut g).expect("instance built once already").item()
}

fn max_rel_err(inst: &Instance) -> f64 {
    let mut g = Graph::new();
    let root = (inst.build)(&mut g).expect("valid instance");
    g.backward(&root).expect("scalar root");
    let grads: Vec<Vec<f64>> = inst
        .inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    for t in &inst.inputs {
        t.clear_grad();
    }

    let mut worst: f64 = 0.0;
    for (ti, t) in inst.inputs.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + STEP;
            let up = eval(inst);
            t.data_mut()[i] = orig - STEP;
            let down = eval(inst);
            t.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads[ti][i];
            let rel = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn normal_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Values with pairwise gaps ≫ STEP so maxpool argmaxes can't flip, and
/// magnitudes ≥ 0.05 so relu never sits on its kink: a shuffled grid.
fn kink_safe_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..n)
        .map(|i| 0.05 + 0.05 * i as f64)
        .collect();
    for v in vals.iter_mut() {
        if rng.bernoulli(0.5) {
            *v = -*v;
        }
    }
    rng.shuffle(&mut vals);
    vals
}

fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::param(shape, data).expect("generator shapes are consistent")
}

/// Root builder `sum(y ∘ w)` for a fixed cotangent.
fn rooted(op: Op, inputs: Vec<Tensor>, rng: &mut Rng) -> Instance {
    // Probe the output shape once to size the cotangent.
    let mut probe = Graph::inference();
    let y = probe
        .forward_op(op.clone(), &inputs)
        .expect("generator emits valid instances");
    let w = Tensor::new(&y.shape(), normal_vec(y.len(), rng)).expect("probe shape");
    let ins = inputs.clone();
    let build: Build = Box::new(move |g: &mut Graph| {
        let y = g.forward_op(op.clone(), &ins)?;
        let prod = g.mul(&y, &w)?;
        g.sum(&prod)
    });
    Instance { inputs, build }
}

fn make_instance(opname: &str, rng: &mut Rng) -> Instance {
    match opname {
        "matmul" => {
            let (m, k, n) = (rng.range(1, 6), rng.range(1, 6), rng.range(1, 6));
            let a = param(&[m, k], normal_vec(m * k, rng));
            let b = param(&[k, n], normal_vec(k * n, rng));
            rooted(Op::Matmul, vec![a, b], rng)
        }
        "matmul_bt" => {
            let (n, k, m) = (rng.range(1, 6), rng.range(1, 6), rng.range(1, 6));
            let a = param(&[n, k], normal_vec(n * k, rng));
            let b = param(&[m, k], normal_vec(m * k, rng));
            rooted(Op::MatmulBt, vec![a, b], rng)
        }
        "conv2d" => {
            let n = rng.range(1, 3);
            let c = rng.range(1, 3);
            let h = rng.range(3, 7);
            let w = rng.range(3, 7);
            let f = rng.range(1, 3);
            let k = rng.range(1, 4);
            let stride = rng.range(1, 3);
            let pad = rng.range(0, 2);
            let pad_mode = if rng.bernoulli(0.5) {
                PadMode::Zero
            } else {
                PadMode::Symmetric
            };
            let batched = rng.bernoulli(0.5);
            let x = if batched {
                param(&[n, c, h, w], normal_vec(n * c * h * w, rng))
            } else {
                param(&[c, h, w], normal_vec(c * h * w, rng))
            };
            let wt = param(&[f, c, k, k], normal_vec(f * c * k * k, rng));
            let mut inputs = vec![x, wt];
            if rng.bernoulli(0.5) {
                inputs.push(param(&[f], normal_vec(f, rng)));
            }
            rooted(Op::Conv2d { stride, pad, pad_mode }, inputs, rng)
        }
        "avgpool2d" => {
            let (c, h, w) = (rng.range(1, 3), rng.range(2, 7), rng.range(2, 7));
            let k = rng.range(1, h.min(w) + 1);
            let stride = rng.range(1, 3);
            let x = param(&[2, c, h, w], normal_vec(2 * c * h * w, rng));
            rooted(Op::AvgPool2d { kernel: k, stride }, vec![x], rng)
        }
        "maxpool2d" => {
            let (c, h, w) = (rng.range(1, 3), rng.range(2, 7), rng.range(2, 7));
            let k = rng.range(1, h.min(w) + 1);
            let stride = rng.range(1, 3);
            let x = param(&[1, c, h, w], kink_safe_vec(c * h * w, rng));
            rooted(Op::MaxPool2d { kernel: k, stride }, vec![x], rng)
        }
        "relu" => {
            let n = rng.range(1, 9);
            let x = param(&[n], kink_safe_vec(n, rng));
            rooted(Op::Relu, vec![x], rng)
        }
        "add" => {
            if rng.bernoulli(0.5) {
                let (r, c) = (rng.range(1, 6), rng.range(1, 6));
                let a = param(&[r, c], normal_vec(r * c, rng));
                let b = param(&[r, c], normal_vec(r * c, rng));
                rooted(Op::Add, vec![a, b], rng)
            } else {
                // Row-broadcast form, as used by linear-layer biases.
                let (r, c) = (rng.range(2, 6), rng.range(1, 6));
                let a = param(&[r, c], normal_vec(r * c, rng));
                let b = param(&[c], normal_vec(c, rng));
                rooted(Op::Add, vec![a, b], rng)
            }
        }
        "mul" => {
            let n = rng.range(1, 9);
            let a = param(&[n], normal_vec(n, rng));
            let b = param(&[n], normal_vec(n, rng));
            rooted(Op::Mul, vec![a, b], rng)
        }
        "scale" => {
            let n = rng.range(1, 9);
            let c = rng.uniform_in(-2.0, 2.0);
            let x = param(&[n], normal_vec(n, rng));
            rooted(Op::Scale(c), vec![x], rng)
        }
        "reshape" => {
            let (a, b) = (rng.range(1, 5), rng.range(1, 5));
            let x = param(&[a, b, 2], normal_vec(a * b * 2, rng));
            rooted(Op::Reshape(vec![2 * a, b]), vec![x], rng)
        }
        "softmax" => {
            let (r, c) = (rng.range(1, 5), rng.range(2, 7));
            let x = param(&[r, c], normal_vec(r * c, rng));
            rooted(Op::Softmax, vec![x], rng)
        }
        "log_softmax" => {
            let (r, c) = (rng.range(1, 5), rng.range(2, 7));
            let x = param(&[r, c], normal_vec(r * c, rng));
            rooted(Op::LogSoftmax, vec![x], rng)
        }
        "log" => {
            let n = rng.range(1, 9);
            let x = param(&[n], (0..n).map(|_| rng.uniform_in(0.5, 2.5)).collect());
            rooted(Op::Log, vec![x], rng)
        }
        "sum" => {
            let n = rng.range(1, 9);
            let x = param(&[n, 2], normal_vec(n * 2, rng));
            rooted(Op::Sum, vec![x], rng)
        }
        "mean" => {
            let n = rng.range(1, 9);
            let x = param(&[n, 3], normal_vec(n * 3, rng));
            rooted(Op::Mean, vec![x], rng)
        }
        "normalization" => {
            let (n, c) = (rng.range(1, 3), rng.range(1, 4));
            let (h, w) = (rng.range(2, 5), rng.range(2, 5));
            let x = param(&[n, c, h, w], normal_vec(n * c * h * w, rng));
            let gamma = param(&[c], (0..c).map(|_| rng.uniform_in(0.5, 1.5)).collect());
            let beta = param(&[c], normal_vec(c, rng));
            rooted(Op::Normalize { eps: 1e-5 }, vec![x, gamma, beta], rng)
        }
        "concat" => {
            let parts = rng.range(2, 4);
            let cols = rng.range(1, 5);
            let inputs: Vec<Tensor> = (0..parts)
                .map(|_| {
                    let r = rng.range(1, 4);
                    param(&[r, cols], normal_vec(r * cols, rng))
                })
                .collect();
            rooted(Op::Concat, inputs, rng)
        }
        other => panic!("no instance generator for op {other}"),
    }
}
