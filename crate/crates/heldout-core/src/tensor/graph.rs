//! The op set and the tape.
//!
//! [`Graph::forward_op`] executes one op eagerly and, while recording is on
//! and some input participates in autodiff, pushes a node onto the tape.
//! Insertion order is a topological order by construction, so
//! [`Graph::backward`] is a single reverse sweep applying each op's
//! vector-Jacobian product and accumulating additively across fan-out.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use super::kernels::Padding as PadMode;

/// One differentiable operation, with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// (m×k) · (k×n) → (m×n).
    Matmul,
    /// a · bᵀ for 2-D inputs [n,k] and [m,k] → [n,m]. Pairwise row dot
    /// products without materializing a transpose.
    MatmulBt,
    /// Inputs `[x, w]` or `[x, w, bias]`; x is C×H×W or N×C×H×W, w is
    /// F×C×kh×kw, bias is F.
    Conv2d {
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    },
    AvgPool2d { kernel: usize, stride: usize },
    MaxPool2d { kernel: usize, stride: usize },
    Relu,
    /// Elementwise when shapes match; otherwise the second input must be a
    /// vector matching the last axis of the first (row broadcast, as in a
    /// linear layer's bias).
    Add,
    /// Elementwise product, same shapes.
    Mul,
    /// Multiply by a constant.
    Scale(f64),
    Reshape(Vec<usize>),
    /// Softmax over the last axis.
    Softmax,
    /// log(softmax) over the last axis, computed stably in one op.
    LogSoftmax,
    /// Elementwise natural log.
    Log,
    /// Sum of all elements → scalar.
    Sum,
    /// Mean of all elements → scalar.
    Mean,
    /// Inputs `[x, gamma, beta]`; x is N×C×H×W, gamma/beta are length C.
    /// Normalizes each (sample, channel) slice over its spatial extent.
    Normalize { eps: f64 },
    /// Concatenate along axis 0; all other axes must agree.
    Concat,
}

impl Op {
    /// Stable name used in error messages and coverage checks.
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::MatmulBt => "matmul_bt",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2d { .. } => "avgpool2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Normalize { .. } => "normalization",
            Op::Concat => "concat",
        }
    }
}

/// Values captured during forward that the backward rule reuses.
enum Saved {
    None,
    /// conv2d: per-image column matrices, concatenated, plus geometry.
    Cols { cols: Vec<f64>, geom: ConvGeom, batch: usize },
    /// maxpool2d: flat input index of each output element's max.
    ArgMax(Vec<usize>),
    /// normalization: per (sample, channel) mean and 1/std.
    NormStats { mean: Vec<f64>, inv_std: Vec<f64> },
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
    saved: Saved,
}

/// Tape of executed ops. Build one per forward pass and drop it after
/// [`Graph::backward`]; parameters keep their accumulated gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A graph that never records: pure inference, no tape overhead.
    pub fn inference() -> Graph {
        Graph {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Execute `op` on `inputs`, recording a tape node when recording is on
    /// and any input requires a gradient.
    pub fn forward_op(&mut self, op: Op, inputs: &[Tensor]) -> Result<Tensor> {
        let (output, saved) = execute(&op, inputs)?;
        let track = self.recording && inputs.iter().any(Tensor::requires_grad);
        if track {
            output.set_requires_grad(true);
            self.nodes.push(Node {
                op,
                inputs: inputs.to_vec(),
                output: output.clone(),
                saved,
            });
        }
        Ok(output)
    }

    /// Reverse sweep from a scalar `root`: every participating tensor
    /// receives ∂root/∂tensor added into its gradient.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.len() != 1 {
            return Err(Error::NonScalarRoot { len: root.len() });
        }
        root.grad_mut()[0] += 1.0;
        for node in self.nodes.iter().rev() {
            let go = node.output.grad_ref();
            if let Some(go) = go.as_deref() {
                backward_node(node, go)?;
            }
        }
        Ok(())
    }

    // Typed helpers; thin wrappers over forward_op.

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Matmul, &[a.clone(), b.clone()])
    }

    pub fn matmul_bt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::MatmulBt, &[a.clone(), b.clone()])
    }

    pub fn conv2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> Result<Tensor> {
        let mut inputs = vec![x.clone(), w.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        self.forward_op(Op::Conv2d { stride, pad, pad_mode }, &inputs)
    }

    pub fn avgpool2d(&mut self, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        self.forward_op(Op::AvgPool2d { kernel, stride }, &[x.clone()])
    }

    pub fn maxpool2d(&mut self, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        self.forward_op(Op::MaxPool2d { kernel, stride }, &[x.clone()])
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Relu, &[x.clone()])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Add, &[a.clone(), b.clone()])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Mul, &[a.clone(), b.clone()])
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.forward_op(Op::Scale(c), &[x.clone()])
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.forward_op(Op::Reshape(shape.to_vec()), &[x.clone()])
    }

    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Softmax, &[x.clone()])
    }

    pub fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::LogSoftmax, &[x.clone()])
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Log, &[x.clone()])
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Sum, &[x.clone()])
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward_op(Op::Mean, &[x.clone()])
    }

    pub fn normalize(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        self.forward_op(Op::Normalize { eps }, &[x.clone(), gamma.clone(), beta.clone()])
    }

    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        self.forward_op(Op::Concat, parts.to_vec().as_slice())
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn arg_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::InvalidArgument { op, detail }
}

fn want_inputs(op: &'static str, inputs: &[Tensor], lo: usize, hi: usize) -> Result<()> {
    if inputs.len() < lo || inputs.len() > hi {
        return Err(arg_err(op, format!("expected {lo}..={hi} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// N×C×H×W view of a 3-D or 4-D tensor shape.
fn as_nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(shape_err(op, format!("expected C×H×W or N×C×H×W, got {shape:?}"))),
    }
}

fn last_axis(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    let last = *shape.last().ok_or_else(|| shape_err(op, "empty shape".into()))?;
    Ok((shape.iter().product::<usize>() / last, last))
}

fn execute(op: &Op, inputs: &[Tensor]) -> Result<(Tensor, Saved)> {
    match op {
        Op::Matmul => {
            want_inputs("matmul", inputs, 2, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            kernels::gemm(&a.data(), &b.data(), m, k, n, &mut out);
            Ok((Tensor::new(&[m, n], out)?, Saved::None))
        }
        Op::MatmulBt => {
            want_inputs("matmul_bt", inputs, 2, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
                return Err(shape_err("matmul_bt", format!("{sa:?} · {sb:?}ᵀ")));
            }
            let (n, k, m) = (sa[0], sa[1], sb[0]);
            let mut out = vec![0.0; n * m];
            kernels::gemm_abt(&a.data(), &b.data(), n, k, m, &mut out);
            Ok((Tensor::new(&[n, m], out)?, Saved::None))
        }
        Op::Conv2d { stride, pad, pad_mode } => {
            want_inputs("conv2d", inputs, 2, 3)?;
            conv2d_forward(inputs, *stride, *pad, *pad_mode)
        }
        Op::AvgPool2d { kernel, stride } => {
            want_inputs("avgpool2d", inputs, 1, 1)?;
            pool_forward(&inputs[0], *kernel, *stride, false)
        }
        Op::MaxPool2d { kernel, stride } => {
            want_inputs("maxpool2d", inputs, 1, 1)?;
            pool_forward(&inputs[0], *kernel, *stride, true)
        }
        Op::Relu => {
            want_inputs("relu", inputs, 1, 1)?;
            let x = &inputs[0];
            let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Ok((Tensor::new(&x.shape(), out)?, Saved::None))
        }
        Op::Add => {
            want_inputs("add", inputs, 2, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa == sb {
                let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
                Ok((Tensor::new(&sa, out)?, Saved::None))
            } else if sb.len() == 1 && sb[0] == *sa.last().unwrap() {
                let bd = b.data();
                let out = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + bd[i % sb[0]])
                    .collect();
                Ok((Tensor::new(&sa, out)?, Saved::None))
            } else {
                Err(shape_err("add", format!("{sa:?} + {sb:?}")))
            }
        }
        Op::Mul => {
            want_inputs("mul", inputs, 2, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.shape_ref() != b.shape_ref() {
                return Err(shape_err("mul", format!("{:?} ∘ {:?}", a.shape(), b.shape())));
            }
            let out = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
            Ok((Tensor::new(&a.shape(), out)?, Saved::None))
        }
        Op::Scale(c) => {
            want_inputs("scale", inputs, 1, 1)?;
            let x = &inputs[0];
            let out = x.data().iter().map(|v| v * c).collect();
            Ok((Tensor::new(&x.shape(), out)?, Saved::None))
        }
        Op::Reshape(shape) => {
            want_inputs("reshape", inputs, 1, 1)?;
            let x = &inputs[0];
            if shape.iter().product::<usize>() != x.len() || shape.iter().any(|&d| d == 0) {
                return Err(shape_err("reshape", format!("{:?} → {shape:?}", x.shape())));
            }
            Ok((Tensor::new(shape, x.data().to_vec())?, Saved::None))
        }
        Op::Softmax => {
            want_inputs("softmax", inputs, 1, 1)?;
            let x = &inputs[0];
            let (rows, cols) = last_axis("softmax", &x.shape())?;
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let orow = &mut out[r * cols..(r + 1) * cols];
                softmax_row(row, orow);
            }
            drop(xd);
            Ok((Tensor::new(&x.shape(), out)?, Saved::None))
        }
        Op::LogSoftmax => {
            want_inputs("log_softmax", inputs, 1, 1)?;
            let x = &inputs[0];
            let (rows, cols) = last_axis("log_softmax", &x.shape())?;
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            for r in 0..rows {
                let row = &xd[r * cols..(r + 1) * cols];
                let orow = &mut out[r * cols..(r + 1) * cols];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = v - max - lse;
                }
            }
            drop(xd);
            Ok((Tensor::new(&x.shape(), out)?, Saved::None))
        }
        Op::Log => {
            want_inputs("log", inputs, 1, 1)?;
            let x = &inputs[0];
            let out = x.data().iter().map(|&v| libm::log(v)).collect();
            Ok((Tensor::new(&x.shape(), out)?, Saved::None))
        }
        Op::Sum => {
            want_inputs("sum", inputs, 1, 1)?;
            let s: f64 = inputs[0].data().iter().sum();
            Ok((Tensor::scalar(s), Saved::None))
        }
        Op::Mean => {
            want_inputs("mean", inputs, 1, 1)?;
            let x = &inputs[0];
            let s: f64 = x.data().iter().sum();
            Ok((Tensor::scalar(s / x.len() as f64), Saved::None))
        }
        Op::Normalize { eps } => {
            want_inputs("normalization", inputs, 3, 3)?;
            normalize_forward(inputs, *eps)
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(arg_err("concat", "no inputs".into()));
            }
            let first = inputs[0].shape();
            let mut rows = 0;
            for t in inputs {
                let s = t.shape();
                if s[1..] != first[1..] || s.len() != first.len() {
                    return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
                }
                rows += s[0];
            }
            let mut out = Vec::with_capacity(rows * first[1..].iter().product::<usize>());
            for t in inputs {
                out.extend_from_slice(&t.data());
            }
            let mut shape = first;
            shape[0] = rows;
            Ok((Tensor::new(&shape, out)?, Saved::None))
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = libm::exp(v - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn conv2d_forward(inputs: &[Tensor], stride: usize, pad: usize, pad_mode: PadMode) -> Result<(Tensor, Saved)> {
    let (x, w) = (&inputs[0], &inputs[1]);
    let xs = x.shape();
    let (n, c, h, wd, batched) = as_nchw("conv2d", &xs)?;
    let ws = w.shape();
    if ws.len() != 4 || ws[1] != c {
        return Err(shape_err("conv2d", format!("input {xs:?} vs kernel {ws:?}")));
    }
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    if stride == 0 {
        return Err(arg_err("conv2d", "stride must be ≥ 1".into()));
    }
    if pad_mode == PadMode::Symmetric && (pad >= h || pad >= wd) {
        return Err(arg_err(
            "conv2d",
            format!("symmetric pad {pad} must be < spatial dims {h}×{wd}"),
        ));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(shape_err("conv2d", format!("kernel {kh}×{kw} exceeds padded input")));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let geom = ConvGeom {
        c_in: c,
        h,
        w: wd,
        kh,
        kw,
        oh,
        ow,
        stride,
        pad,
        padding: pad_mode,
    };
    let ocells = oh * ow;
    let crows = geom.col_rows();
    let bias = inputs.get(2);
    if let Some(b) = bias {
        if b.shape_ref() != [f] {
            return Err(shape_err("conv2d", format!("bias {:?} vs {f} filters", b.shape())));
        }
    }

    let xd = x.data();
    let wdat = w.data();
    let mut cols = vec![0.0; n * crows * ocells];
    let mut out = vec![0.0; n * f * ocells];
    for img in 0..n {
        let col = &mut cols[img * crows * ocells..(img + 1) * crows * ocells];
        kernels::im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], &geom, col);
        kernels::gemm(
            &wdat,
            col,
            f,
            crows,
            ocells,
            &mut out[img * f * ocells..(img + 1) * f * ocells],
        );
    }
    if let Some(b) = bias {
        let bd = b.data();
        for img in 0..n {
            for fi in 0..f {
                let seg = &mut out[(img * f + fi) * ocells..(img * f + fi + 1) * ocells];
                for o in seg {
                    *o += bd[fi];
                }
            }
        }
    }
    drop(xd);
    drop(wdat);
    let shape: Vec<usize> = if batched {
        vec![n, f, oh, ow]
    } else {
        vec![f, oh, ow]
    };
    Ok((Tensor::new(&shape, out)?, Saved::Cols { cols, geom, batch: n }))
}

fn pool_forward(x: &Tensor, kernel: usize, stride: usize, is_max: bool) -> Result<(Tensor, Saved)> {
    let op = if is_max { "maxpool2d" } else { "avgpool2d" };
    let xs = x.shape();
    let (n, c, h, w, batched) = as_nchw(op, &xs)?;
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(arg_err(op, format!("kernel {kernel} stride {stride} on {h}×{w}")));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = if is_max { vec![0usize; n * c * oh * ow] } else { Vec::new() };
    let inv = 1.0 / (kernel * kernel) as f64;
    for nc in 0..n * c {
        let plane = &xd[nc * h * w..(nc + 1) * h * w];
        for oi in 0..oh {
            for oj in 0..ow {
                let oidx = (nc * oh + oi) * ow + oj;
                if is_max {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let idx = (oi * stride + ki) * w + oj * stride + kj;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_at = idx;
                            }
                        }
                    }
                    out[oidx] = best;
                    argmax[oidx] = nc * h * w + best_at;
                } else {
                    let mut acc = 0.0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            acc += plane[(oi * stride + ki) * w + oj * stride + kj];
                        }
                    }
                    out[oidx] = acc * inv;
                }
            }
        }
    }
    drop(xd);
    let shape: Vec<usize> = if batched {
        vec![n, c, oh, ow]
    } else {
        vec![c, oh, ow]
    };
    let saved = if is_max { Saved::ArgMax(argmax) } else { Saved::None };
    Ok((Tensor::new(&shape, out)?, saved))
}

fn normalize_forward(inputs: &[Tensor], eps: f64) -> Result<(Tensor, Saved)> {
    let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
    let xs = x.shape();
    let (n, c, h, w, _) = as_nchw("normalization", &xs)?;
    if xs.len() != 4 {
        return Err(shape_err("normalization", format!("expected N×C×H×W, got {xs:?}")));
    }
    if gamma.shape_ref() != [c] || beta.shape_ref() != [c] {
        return Err(shape_err(
            "normalization",
            format!("gamma {:?} / beta {:?} vs {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let g = h * w;
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![0.0; xd.len()];
    let mut means = vec![0.0; n * c];
    let mut invs = vec![0.0; n * c];
    for nc in 0..n * c {
        let ch = nc % c;
        let plane = &xd[nc * g..(nc + 1) * g];
        let mean = plane.iter().sum::<f64>() / g as f64;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / g as f64;
        let inv = 1.0 / libm::sqrt(var + eps);
        means[nc] = mean;
        invs[nc] = inv;
        let orow = &mut out[nc * g..(nc + 1) * g];
        for (o, &v) in orow.iter_mut().zip(plane) {
            *o = gd[ch] * ((v - mean) * inv) + bd[ch];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    Ok((
        Tensor::new(&xs, out)?,
        Saved::NormStats { mean: means, inv_std: invs },
    ))
}

fn backward_node(node: &Node, go: &[f64]) -> Result<()> {
    let inputs = &node.inputs;
    match &node.op {
        Op::Matmul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k) = (a.shape_ref()[0], a.shape_ref()[1]);
            let n = b.shape_ref()[1];
            if a.requires_grad() {
                kernels::gemm_abt(go, &b.data(), m, n, k, &mut a.grad_mut());
            }
            if b.requires_grad() {
                kernels::gemm_atb(&a.data(), go, m, k, n, &mut b.grad_mut());
            }
        }
        Op::MatmulBt => {
            // s = a·bᵀ, so da = go·b and db = goᵀ·a.
            let (a, b) = (&inputs[0], &inputs[1]);
            let (n, k) = (a.shape_ref()[0], a.shape_ref()[1]);
            let m = b.shape_ref()[0];
            if a.requires_grad() {
                kernels::gemm(go, &b.data(), n, m, k, &mut a.grad_mut());
            }
            if b.requires_grad() {
                kernels::gemm_atb(go, &a.data(), n, m, k, &mut b.grad_mut());
            }
        }
        Op::Conv2d { .. } => conv2d_backward(node, go),
        Op::AvgPool2d { kernel, stride } => {
            let (kernel, stride) = (*kernel, *stride);
            let x = &inputs[0];
            if x.requires_grad() {
                let xs = x.shape();
                let (n, c, h, w, _) = as_nchw("avgpool2d", &xs).expect("validated in forward");
                let os = node.output.shape();
                let (oh, ow) = (os[os.len() - 2], os[os.len() - 1]);
                let inv = 1.0 / (kernel * kernel) as f64;
                let mut gx = x.grad_mut();
                for nc in 0..n * c {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let g = go[(nc * oh + oi) * ow + oj] * inv;
                            for ki in 0..kernel {
                                for kj in 0..kernel {
                                    gx[nc * h * w + (oi * stride + ki) * w + oj * stride + kj] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { .. } => {
            let x = &inputs[0];
            if x.requires_grad() {
                let Saved::ArgMax(arg) = &node.saved else {
                    unreachable!("maxpool saves argmax")
                };
                let mut gx = x.grad_mut();
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += go[o];
                }
            }
        }
        Op::Relu => {
            let x = &inputs[0];
            if x.requires_grad() {
                let xd = x.data();
                let mut gx = x.grad_mut();
                for ((gxi, &xi), &gi) in gx.iter_mut().zip(xd.iter()).zip(go) {
                    if xi > 0.0 {
                        *gxi += gi;
                    }
                }
            }
        }
        Op::Add => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad() {
                let mut ga = a.grad_mut();
                for (gai, &gi) in ga.iter_mut().zip(go) {
                    *gai += gi;
                }
            }
            if b.requires_grad() {
                let bn = b.len();
                let mut gb = b.grad_mut();
                if bn == go.len() {
                    for (gbi, &gi) in gb.iter_mut().zip(go) {
                        *gbi += gi;
                    }
                } else {
                    for (i, &g) in go.iter().enumerate() {
                        gb[i % bn] += g;
                    }
                }
            }
        }
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.requires_grad() {
                let bd = b.data();
                let mut ga = a.grad_mut();
                for ((gai, &bi), &gi) in ga.iter_mut().zip(bd.iter()).zip(go) {
                    *gai += gi * bi;
                }
            }
            if b.requires_grad() {
                let ad = a.data();
                let mut gb = b.grad_mut();
                for ((gbi, &ai), &gi) in gb.iter_mut().zip(ad.iter()).zip(go) {
                    *gbi += gi * ai;
                }
            }
        }
        Op::Scale(c) => {
            let x = &inputs[0];
            if x.requires_grad() {
                let mut gx = x.grad_mut();
                for (gxi, &gi) in gx.iter_mut().zip(go) {
                    *gxi += gi * c;
                }
            }
        }
        Op::Reshape(_) => {
            let x = &inputs[0];
            if x.requires_grad() {
                let mut gx = x.grad_mut();
                for (gxi, &gi) in gx.iter_mut().zip(go) {
                    *gxi += gi;
                }
            }
        }
        Op::Softmax => {
            let x = &inputs[0];
            if x.requires_grad() {
                let (rows, cols) = last_axis("softmax", &x.shape())?;
                let s = node.output.data();
                let mut gx = x.grad_mut();
                for r in 0..rows {
                    let srow = &s[r * cols..(r + 1) * cols];
                    let grow = &go[r * cols..(r + 1) * cols];
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    let gxrow = &mut gx[r * cols..(r + 1) * cols];
                    for i in 0..cols {
                        gxrow[i] += srow[i] * (grow[i] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax => {
            let x = &inputs[0];
            if x.requires_grad() {
                let (rows, cols) = last_axis("log_softmax", &x.shape())?;
                let lp = node.output.data();
                let mut gx = x.grad_mut();
                for r in 0..rows {
                    let lprow = &lp[r * cols..(r + 1) * cols];
                    let grow = &go[r * cols..(r + 1) * cols];
                    let gsum: f64 = grow.iter().sum();
                    let gxrow = &mut gx[r * cols..(r + 1) * cols];
                    for i in 0..cols {
                        gxrow[i] += grow[i] - libm::exp(lprow[i]) * gsum;
                    }
                }
            }
        }
        Op::Log => {
            let x = &inputs[0];
            if x.requires_grad() {
                let xd = x.data();
                let mut gx = x.grad_mut();
                for ((gxi, &xi), &gi) in gx.iter_mut().zip(xd.iter()).zip(go) {
                    *gxi += gi / xi;
                }
            }
        }
        Op::Sum => {
            let x = &inputs[0];
            if x.requires_grad() {
                let g = go[0];
                let mut gx = x.grad_mut();
                for v in gx.iter_mut() {
                    *v += g;
                }
            }
        }
        Op::Mean => {
            let x = &inputs[0];
            if x.requires_grad() {
                let g = go[0] / x.len() as f64;
                let mut gx = x.grad_mut();
                for v in gx.iter_mut() {
                    *v += g;
                }
            }
        }
        Op::Normalize { .. } => normalize_backward(node, go),
        Op::Concat => {
            let mut offset = 0;
            for t in inputs {
                let n = t.len();
                if t.requires_grad() {
                    let mut gt = t.grad_mut();
                    for (gti, &gi) in gt.iter_mut().zip(&go[offset..offset + n]) {
                        *gti += gi;
                    }
                }
                offset += n;
            }
        }
    }
    Ok(())
}

fn conv2d_backward(node: &Node, go: &[f64]) {
    let Saved::Cols { cols, geom, batch } = &node.saved else {
        unreachable!("conv2d saves its column matrices")
    };
    let (x, w) = (&node.inputs[0], &node.inputs[1]);
    let bias = node.inputs.get(2);
    let f = w.shape_ref()[0];
    let crows = geom.col_rows();
    let ocells = geom.oh * geom.ow;
    let img_in = geom.c_in * geom.h * geom.w;

    if let Some(b) = bias {
        if b.requires_grad() {
            let mut gb = b.grad_mut();
            for img in 0..*batch {
                for fi in 0..f {
                    let seg = &go[(img * f + fi) * ocells..(img * f + fi + 1) * ocells];
                    gb[fi] += seg.iter().sum::<f64>();
                }
            }
        }
    }
    if w.requires_grad() {
        let mut gw = w.grad_mut();
        for img in 0..*batch {
            kernels::gemm_abt(
                &go[img * f * ocells..(img + 1) * f * ocells],
                &cols[img * crows * ocells..(img + 1) * crows * ocells],
                f,
                ocells,
                crows,
                &mut gw,
            );
        }
    }
    if x.requires_grad() {
        let wd = w.data();
        let mut gx = x.grad_mut();
        let mut dcol = vec![0.0; crows * ocells];
        for img in 0..*batch {
            dcol.iter_mut().for_each(|v| *v = 0.0);
            kernels::gemm_atb(
                &wd,
                &go[img * f * ocells..(img + 1) * f * ocells],
                f,
                crows,
                ocells,
                &mut dcol,
            );
            kernels::col2im(&dcol, geom, &mut gx[img * img_in..(img + 1) * img_in]);
        }
    }
}

fn normalize_backward(node: &Node, go: &[f64]) {
    let Saved::NormStats { mean, inv_std } = &node.saved else {
        unreachable!("normalization saves its statistics")
    };
    let (x, gamma, beta) = (&node.inputs[0], &node.inputs[1], &node.inputs[2]);
    let xs = x.shape();
    let (n, c, h, w, _) = as_nchw("normalization", &xs).expect("validated in forward");
    let g = h * w;
    let xd = x.data();
    let gd = gamma.data();

    for nc in 0..n * c {
        let ch = nc % c;
        let plane = &xd[nc * g..(nc + 1) * g];
        let grow = &go[nc * g..(nc + 1) * g];
        let (mu, inv) = (mean[nc], inv_std[nc]);

        if gamma.requires_grad() || beta.requires_grad() {
            let mut dg = 0.0;
            let mut db = 0.0;
            for i in 0..g {
                let xhat = (plane[i] - mu) * inv;
                dg += grow[i] * xhat;
                db += grow[i];
            }
            if gamma.requires_grad() {
                gamma.grad_mut()[ch] += dg;
            }
            if beta.requires_grad() {
                beta.grad_mut()[ch] += db;
            }
        }
        if x.requires_grad() {
            // Layer-norm style VJP over the (sample, channel) group:
            // dx = inv · γ · (g − mean(g) − x̂ · mean(g·x̂)).
            let gc = gd[ch];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for i in 0..g {
                let xhat = (plane[i] - mu) * inv;
                m1 += grow[i];
                m2 += grow[i] * xhat;
            }
            m1 /= g as f64;
            m2 /= g as f64;
            let mut gx = x.grad_mut();
            let gxrow = &mut gx[nc * g..(nc + 1) * g];
            for i in 0..g {
                let xhat = (plane[i] - mu) * inv;
                gxrow[i] += inv * gc * (grow[i] - m1 - xhat * m2);
            }
        }
    }
}
