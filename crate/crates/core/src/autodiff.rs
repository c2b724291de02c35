//! Tape-based reverse-mode differentiation over the small, closed set of
//! primitives used by the segmenter and the loss stack.
//!
//! Every primitive validates shapes, checks its output for non-finite values
//! and records itself on the tape only when one of its inputs requires a
//! gradient. [`Tape::stop_grad`] is the identity in the forward pass and a
//! hard barrier in the backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::warp::{bilinear_sample, warp_vjp, WarpField};

/// A dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &[n], &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_grid(g: &Grid<f64>) -> Self {
        Tensor {
            shape: vec![g.height(), g.width()],
            data: g.as_slice().to_vec(),
        }
    }

    pub fn to_grid(&self) -> Result<Grid<f64>> {
        match self.shape[..] {
            [h, w] => Grid::from_vec(h, w, self.data.clone()),
            _ => Err(Error::shape("Tensor::to_grid", &[0, 0], &self.shape)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    StopGrad,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    MeanOverMask(Var, Arc<Vec<bool>>, usize),
    Bilinear(Var, Arc<WarpField>),
    BceWithLogits(Var, Arc<Vec<f64>>),
    DiceSoft(Var, Arc<Vec<f64>>, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications. Inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: self.shapes[v.0].clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-major `[m,k] x [k,n]` product with optional transposed operands given by strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked by the callers against m, k, n and the
    // strides above address only elements inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape[..] {
        [r, c] => Ok((r, c)),
        _ => Err(Error::shape(op, &[0, 0], &t.shape)),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = value.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NumericFault {
                op: format!("{name} (produced {bad})"),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// Identity forward, no gradient backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push_raw(value, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[k, n], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false, &mut out, 0.0);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(x), "transpose")?;
        let src = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(&[c, r], out)?, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.value(x).data.clone())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(&ta.shape.clone(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = matrix_dims(self.value(x), "add_bias")?;
        let b = self.value(bias);
        if b.data.len() != n {
            return Err(Error::shape("add_bias", &[n], &b.shape));
        }
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(&b.data).for_each(|(o, bb)| *o += bb);
        }
        self.push("add_bias", Tensor::new(&[m, n], out)?, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(&t.shape.clone(), t.data.iter().map(|v| v * s).collect())?;
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(&t.shape.clone(), t.data.iter().map(|&v| sigmoid(v)).collect())?;
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(&t.shape.clone(), t.data.iter().map(|v| v.abs()).collect())?;
        self.push("abs", value, Op::Abs(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over the entries where `mask` is set; `0` when the mask is empty.
    pub fn mean_over_mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.data.len() {
            return Err(Error::shape("mean_over_mask", &t.shape, &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        let total: f64 = t.data.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        let mean = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::MeanOverMask(x, Arc::new(mask.to_vec()), count);
        self.push("mean_over_mask", Tensor::scalar(mean), op, &[x])
    }

    /// Bilinear resampling of an `[h, w]` source through a warp field.
    pub fn bilinear_sample(&mut self, src: Var, field: Arc<WarpField>, fill: f64) -> Result<Var> {
        let grid = self.value(src).to_grid()?;
        let out = bilinear_sample(&grid, &field, fill)?;
        self.push("bilinear_sample", Tensor::from_grid(&out), Op::Bilinear(src, field), &[src])
    }

    /// Mean binary cross-entropy of logits against `targets`, in the fused
    /// `softplus(x) - t x` form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.data.len() || t.data.is_empty() {
            return Err(Error::shape("bce_with_logits", &t.shape, &[targets.len()]));
        }
        let n = t.data.len() as f64;
        let loss = t.data.iter().zip(targets).map(|(&x, &m)| softplus(x) - m * x).sum::<f64>() / n;
        let op = Op::BceWithLogits(logits, Arc::new(targets.to_vec()));
        self.push("bce_with_logits", Tensor::scalar(loss), op, &[logits])
    }

    /// Soft Dice loss `1 - (2 Σ σ(x) t + eps) / (Σ σ(x) + Σ t + eps)`.
    pub fn dice_soft(&mut self, logits: Var, targets: &[f64], eps: f64) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.data.len() {
            return Err(Error::shape("dice_soft", &t.shape, &[targets.len()]));
        }
        let (inter, denom) = dice_terms(&t.data, targets, eps);
        let loss = 1.0 - (2.0 * inter + eps) / denom;
        let op = Op::DiceSoft(logits, Arc::new(targets.to_vec()), eps);
        self.push("dice_soft", Tensor::scalar(loss), op, &[logits])
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.data.len() != 1 {
            return Err(Error::shape("backward", &[1], &root_value.shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape[0], ta.shape[1]);
                let n = tb.shape[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, &tb.data, true, &mut da, 0.0);
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, true, g, false, &mut db, 0.0);
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.value(*x).shape[0], self.value(*x).shape[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.0], g),
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.value(*a).data, &self.value(*b).data);
                if wants(*a) {
                    let da: Vec<f64> = g.iter().zip(tb).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                if wants(*b) {
                    let db: Vec<f64> = g.iter().zip(ta).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.0], &db);
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g);
                }
                if wants(*bias) {
                    let n = self.value(*bias).data.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(&mut grads[bias.0], &db);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&node.value.data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Abs(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&self.value(*x).data)
                    .map(|(g, v)| if *v > 0.0 { *g } else if *v < 0.0 { -g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.value(*x).data.len()];
                accumulate(&mut grads[x.0], &dx);
            }
            Op::MeanOverMask(x, mask, count) => {
                let w = if *count == 0 { 0.0 } else { g[0] / *count as f64 };
                let dx: Vec<f64> = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::Bilinear(src, field) => {
                let (h, w) = field.dims();
                let upstream = Grid::from_vec(h, w, g.to_vec()).expect("bilinear upstream shape");
                let dx = warp_vjp(field, &upstream).expect("bilinear vjp shape");
                accumulate(&mut grads[src.0], dx.as_slice());
            }
            Op::BceWithLogits(x, targets) => {
                let xs = &self.value(*x).data;
                let n = xs.len() as f64;
                let dx: Vec<f64> = xs
                    .iter()
                    .zip(targets.iter())
                    .map(|(&v, &t)| g[0] * (sigmoid(v) - t) / n)
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
            Op::DiceSoft(x, targets, eps) => {
                let xs = &self.value(*x).data;
                let (inter, denom) = dice_terms(xs, targets, *eps);
                let numer = 2.0 * inter + eps;
                let dx: Vec<f64> = xs
                    .iter()
                    .zip(targets.iter())
                    .map(|(&v, &t)| {
                        let s = sigmoid(v);
                        let ds = -(2.0 * t * denom - numer) / (denom * denom);
                        g[0] * ds * s * (1.0 - s)
                    })
                    .collect();
                accumulate(&mut grads[x.0], &dx);
            }
        }
    }
}

/// `(Σ σ(x) t, Σ σ(x) + Σ t + eps)`
fn dice_terms(logits: &[f64], targets: &[f64], eps: f64) -> (f64, f64) {
    let mut inter = 0.0;
    let mut prob_sum = 0.0;
    let mut target_sum = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let s = sigmoid(x);
        inter += s * t;
        prob_sum += s;
        target_sum += t;
    }
    (inter, prob_sum + target_sum + eps)
}

/// Relative discrepancy used by the gradient checkers. Gradients smaller than
/// `1e-6` in magnitude are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative discrepancy between `analytic` and central differences of `f` at `x`.
pub fn grad_check_values(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], eps: f64) -> f64 {
    assert!(eps > 0.0, "grad_check needs a positive step");
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

/// Differentiates the scalar-valued tape function `f` at `x` and compares the
/// result against central differences. Returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let root = f(&mut tape, input)?;
    let analytic = tape.backward(root)?.wrt(input);

    let shape = x.shape().to_vec();
    let eval = |values: &[f64]| {
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::new(&shape, values.to_vec()).expect("probe shape"));
        let root = f(&mut tape, input).expect("probe evaluation");
        tape.value(root).item()
    };
    Ok(grad_check_values(eval, x.data(), analytic.data(), eps))
}
