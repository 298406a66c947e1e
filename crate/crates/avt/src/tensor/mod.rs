//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major buffers behind an `Rc`; each op appends a node to an
//! implicit DAG holding its parents and a backward closure. `backward()` on a
//! scalar walks the DAG in reverse topological order and accumulates
//! gradients, summing over shared subexpressions. All kernels are sequential
//! with a fixed reduction order, so forward passes are bit-identical across
//! runs.
//!
//! The scalar type is generic: training runs at `f32`, gradient-check suites
//! instantiate the same code at `f64` where central finite differences are
//! reliable.

pub mod optim;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;

/// Scalar types the tensor core can compute with.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    /// Gauss error function, exact to the type's precision.
    fn erf(self) -> Self;
    fn abs(self) -> Self;
    fn neg_infinity() -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    /// Tag written into binary containers: 0 = f32, 1 = f64.
    fn dtype_tag() -> u8;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Payload width in bytes.
    fn width() -> usize;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn dtype_tag() -> u8 {
        0
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn width() -> usize {
        4
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn maximum(self, other: Self) -> Self {
        self.max(other)
    }
    fn dtype_tag() -> u8 {
        1
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
    fn width() -> usize {
        8
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled; ops inside build no graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn recording() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<F> = Box<dyn Fn(&[F], &[F])>;

struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<F>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    parents: Vec<Tensor<F>>,
    /// Called with (upstream gradient, this node's forward data).
    backward: Option<BackwardFn<F>>,
}

/// Dense n-dimensional tensor participating in the gradient tape.
///
/// Cloning is cheap (shared node). Invariant: `product(shape) == data.len()`,
/// and the gradient buffer, when present, matches the data length.
pub struct Tensor<F: Scalar> {
    node: Rc<Node<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tensor<F> {
    // ── Construction ─────────────────────────────────────────────────────

    pub fn leaf(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {:?} implies {} elements, got {}",
            shape,
            numel(&shape),
            data.len()
        );
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<F>) -> Self {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::from_vec(shape, vec![F::ZERO; n])
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = numel(&shape);
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_vec(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![F::ZERO; n * n];
        for i in 0..n {
            data[i * n + i] = F::ONE;
        }
        Self::from_vec(vec![n, n], data)
    }

    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z * std)
            })
            .collect();
        Self::from_vec(shape, data)
    }

    /// Normal(0, std²) truncated to ±2 std, the usual from-scratch embedding init.
    pub fn trunc_normal<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = numel(&shape);
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break F::from_f64(z * std);
                }
            })
            .collect();
        Self::from_vec(shape, data)
    }

    // ── Accessors ────────────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<F>> {
        self.node.data.borrow()
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<F>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        let d = self.node.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.node.shape);
        d[0]
    }

    pub fn at(&self, idx: usize) -> F {
        self.node.data.borrow()[idx]
    }

    /// Overwrites the buffer in place; shape is preserved.
    pub fn set_data(&self, values: &[F]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Adds `delta` to one coordinate; used by finite-difference probes.
    pub fn nudge(&self, idx: usize, delta: F) {
        self.node.data.borrow_mut()[idx] += delta;
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same data as a fresh constant leaf; gradients do not flow through.
    pub fn detach(&self) -> Tensor<F> {
        Tensor::from_vec(self.node.shape.clone(), self.to_vec())
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[F]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b += *c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn make_op(shape: Vec<usize>, data: Vec<F>, parents: Vec<Tensor<F>>, backward: BackwardFn<F>) -> Tensor<F> {
        let track = recording() && parents.iter().any(|p| p.node.requires_grad);
        if track {
            assert_eq!(numel(&shape), data.len());
            Tensor {
                node: Rc::new(Node {
                    shape,
                    data: RefCell::new(data),
                    requires_grad: true,
                    grad: RefCell::new(None),
                    parents,
                    backward: Some(backward),
                }),
            }
        } else {
            Tensor::from_vec(shape, data)
        }
    }

    // ── Backward pass ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar. Gradients of every reachable
    /// gradient-requiring leaf are populated (accumulated if already set);
    /// intermediate gradients are dropped as soon as they are consumed.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar, got shape {:?}", self.node.shape);
        assert!(self.node.requires_grad, "backward() on a non-gradient tensor");

        enum Step<F: Scalar> {
            Enter(Tensor<F>),
            Exit(Tensor<F>),
        }

        let mut order: Vec<Tensor<F>> = Vec::new();
        let mut seen: HashSet<*const Node<F>> = HashSet::new();
        let mut stack = vec![Step::Enter(self.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    let ptr = Rc::as_ptr(&t.node);
                    if !seen.insert(ptr) {
                        continue;
                    }
                    stack.push(Step::Exit(t.clone()));
                    for p in &t.node.parents {
                        if p.node.requires_grad && !seen.contains(&Rc::as_ptr(&p.node)) {
                            stack.push(Step::Enter(p.clone()));
                        }
                    }
                }
                Step::Exit(t) => order.push(t),
            }
        }

        self.accumulate_grad(&[F::ONE]);
        for t in order.iter().rev() {
            let grad = t.node.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            match &t.node.backward {
                Some(bw) => bw(&grad, &t.node.data.borrow()),
                // Leaves keep their gradient for the optimizer.
                None => *t.node.grad.borrow_mut() = Some(grad),
            }
        }
    }

    // ── Elementwise and broadcast arithmetic ─────────────────────────────

    pub fn add(&self, rhs: &Tensor<F>) -> Tensor<F> {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "add: shape {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let out: Vec<F> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(g);
                pb.accumulate_grad(g);
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Tensor<F> {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "sub: shape {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let out: Vec<F> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(g);
                if pb.node.requires_grad {
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    pb.accumulate_grad(&neg);
                }
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Tensor<F> {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "mul: shape {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        let out: Vec<F> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    let b = pb.data();
                    let c: Vec<F> = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect();
                    pa.accumulate_grad(&c);
                }
                if pb.node.requires_grad {
                    let a = pa.data();
                    let c: Vec<F> = g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect();
                    pb.accumulate_grad(&c);
                }
            }),
        )
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&x| x * c).collect();
        let pa = self.clone();
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let contrib: Vec<F> = g.iter().map(|&v| v * c).collect();
                pa.accumulate_grad(&contrib);
            }),
        )
    }

    pub fn neg(&self) -> Tensor<F> {
        self.scale(-F::ONE)
    }

    /// Broadcast add of a length-`cols` vector over every row of a 2-D tensor.
    pub fn add_row(&self, row: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "add_row: lhs must be 2-D, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert_eq!(
            row.len(),
            c,
            "add_row: row length {} vs {} columns",
            row.len(),
            c
        );
        let out: Vec<F> = {
            let a = self.data();
            let b = row.data();
            let mut v = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    v.push(a[i * c + j] + b[j]);
                }
            }
            v
        };
        let (pa, pb) = (self.clone(), row.clone());
        Tensor::make_op(
            vec![r, c],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g, _| {
                pa.accumulate_grad(g);
                if pb.node.requires_grad {
                    let mut db = vec![F::ZERO; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    pb.accumulate_grad(&db);
                }
            }),
        )
    }

    pub fn ln(&self) -> Tensor<F> {
        let out: Vec<F> = self.data().iter().map(|&x| x.ln()).collect();
        let pa = self.clone();
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    let a = pa.data();
                    let c: Vec<F> = g.iter().zip(a.iter()).map(|(&gv, &av)| gv / av).collect();
                    drop(a);
                    pa.accumulate_grad(&c);
                }
            }),
        )
    }

    /// Exact Gaussian-CDF GELU: x · Φ(x) with Φ from erf.
    pub fn gelu(&self) -> Tensor<F> {
        let half = F::from_f64(0.5);
        let inv_sqrt2 = F::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<F> = self
            .data()
            .iter()
            .map(|&x| x * half * (F::ONE + (x * inv_sqrt2).erf()))
            .collect();
        let pa = self.clone();
        let inv_sqrt_2pi = F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        Tensor::make_op(
            self.node.shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    let a = pa.data();
                    let c: Vec<F> = g
                        .iter()
                        .zip(a.iter())
                        .map(|(&gv, &x)| {
                            let cdf = half * (F::ONE + (x * inv_sqrt2).erf());
                            let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
                            gv * (cdf + x * pdf)
                        })
                        .collect();
                    drop(a);
                    pa.accumulate_grad(&c);
                }
            }),
        )
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&self, rhs: &Tensor<F>) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "matmul: lhs must be 2-D, got {:?}", self.shape());
        assert_eq!(rhs.shape().len(), 2, "matmul: rhs must be 2-D, got {:?}", rhs.shape());
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        assert_eq!(
            k, k2,
            "matmul: inner dimensions differ, lhs {:?} vs rhs {:?}",
            self.shape(),
            rhs.shape()
        );
        let out = {
            let a = self.data();
            let b = rhs.data();
            matmul_raw(&a, &b, m, k, n)
        };
        let (pa, pb) = (self.clone(), rhs.clone());
        Tensor::make_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    // dA = G · Bᵀ
                    let b = pb.data();
                    let bt = transpose_raw(&b, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    drop(b);
                    pa.accumulate_grad(&da);
                }
                if pb.node.requires_grad {
                    // dB = Aᵀ · G
                    let a = pa.data();
                    let at = transpose_raw(&a, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    drop(a);
                    pb.accumulate_grad(&db);
                }
            }),
        )
    }

    pub fn transpose2(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "transpose2: need 2-D, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let out = transpose_raw(&self.data(), r, c);
        let pa = self.clone();
        Tensor::make_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    let dg = transpose_raw(g, c, r);
                    pa.accumulate_grad(&dg);
                }
            }),
        )
    }

    // ── Shape surgery ────────────────────────────────────────────────────

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "slice_rows: need 2-D, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(r0 <= r1 && r1 <= r, "slice_rows: range {r0}..{r1} out of {r} rows");
        let out = self.data()[r0 * c..r1 * c].to_vec();
        let pa = self.clone();
        Tensor::make_op(
            vec![r1 - r0, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    let mut full = vec![F::ZERO; r * c];
                    full[r0 * c..r1 * c].copy_from_slice(g);
                    pa.accumulate_grad(&full);
                }
            }),
        )
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "slice_cols: need 2-D, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(c0 <= c1 && c1 <= c, "slice_cols: range {c0}..{c1} out of {c} columns");
        let w = c1 - c0;
        let out: Vec<F> = {
            let a = self.data();
            let mut v = Vec::with_capacity(r * w);
            for i in 0..r {
                v.extend_from_slice(&a[i * c + c0..i * c + c1]);
            }
            v
        };
        let pa = self.clone();
        Tensor::make_op(
            vec![r, w],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    let mut full = vec![F::ZERO; r * c];
                    for i in 0..r {
                        full[i * c + c0..i * c + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    pa.accumulate_grad(&full);
                }
            }),
        )
    }

    pub fn concat_rows(parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let c = parts[0].shape()[1];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.shape().len(), 2, "concat_rows: need 2-D parts");
            assert_eq!(p.shape()[1], c, "concat_rows: column mismatch {:?} vs {c}", p.shape());
            rows += p.shape()[0];
            data.extend_from_slice(&p.data());
        }
        let owned: Vec<Tensor<F>> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        Tensor::make_op(
            vec![rows, c],
            data,
            owned.clone(),
            Box::new(move |g, _| {
                let mut off = 0;
                for (p, &sz) in owned.iter().zip(&sizes) {
                    if p.node.requires_grad {
                        p.accumulate_grad(&g[off..off + sz]);
                    }
                    off += sz;
                }
            }),
        )
    }

    pub fn concat_cols(parts: &[Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let r = parts[0].shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.shape().len(), 2, "concat_cols: need 2-D parts");
                assert_eq!(p.shape()[0], r, "concat_cols: row mismatch {:?} vs {r}", p.shape());
                p.shape()[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![F::ZERO; r * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..r {
                data[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let owned: Vec<Tensor<F>> = parts.to_vec();
        Tensor::make_op(
            vec![r, total],
            data,
            owned.clone(),
            Box::new(move |g, _| {
                let mut off = 0;
                for (p, &w) in owned.iter().zip(&widths) {
                    if p.node.requires_grad {
                        let mut dp = vec![F::ZERO; r * w];
                        for i in 0..r {
                            dp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    off += w;
                }
            }),
        )
    }

    /// Single element as a scalar tensor; gradient scatters back to the slot.
    pub fn pick(&self, idx: usize) -> Tensor<F> {
        let n = self.len();
        assert!(idx < n, "pick: index {idx} out of {n} elements");
        let out = vec![self.data()[idx]];
        let pa = self.clone();
        Tensor::make_op(
            vec![1],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    let mut full = vec![F::ZERO; n];
                    full[idx] = g[0];
                    pa.accumulate_grad(&full);
                }
            }),
        )
    }

    pub fn pick2(&self, row: usize, col: usize) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "pick2: need 2-D, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        assert!(row < r && col < c, "pick2: ({row},{col}) out of ({r},{c})");
        self.pick(row * c + col)
    }

    // ── Reductions and normalizations ────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<F> {
        let mut s = F::ZERO;
        for &v in self.data().iter() {
            s += v;
        }
        let n = self.len();
        let pa = self.clone();
        Tensor::make_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| {
                if pa.node.requires_grad {
                    pa.accumulate_grad(&vec![g[0]; n]);
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<F> {
        let n = self.len();
        self.sum_all().scale(F::ONE / F::from_f64(n as f64))
    }

    /// Softmax along `axis`, max-stabilized. Entries of −∞ get weight exactly 0.
    pub fn softmax(&self, axis: usize) -> Tensor<F> {
        let shape = self.node.shape.clone();
        assert!(axis < shape.len(), "softmax: axis {axis} out of rank {}", shape.len());
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![F::ZERO; self.len()];
        {
            let x = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = F::neg_infinity();
                    for j in 0..len {
                        mx = mx.maximum(x[base + j * inner]);
                    }
                    let mut s = F::ZERO;
                    for j in 0..len {
                        let e = (x[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        s += e;
                    }
                    for j in 0..len {
                        out[base + j * inner] = out[base + j * inner] / s;
                    }
                }
            }
        }
        let pa = self.clone();
        Tensor::make_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                if !pa.node.requires_grad {
                    return;
                }
                let mut dx = vec![F::ZERO; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = F::ZERO;
                        for j in 0..len {
                            let p = base + j * inner;
                            dot += g[p] * y[p];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                pa.accumulate_grad(&dx);
            }),
        )
    }

    /// LayerNorm over the last axis: per row, zero mean and unit variance
    /// before the affine gain/bias.
    pub fn layer_norm(&self, gain: &Tensor<F>, bias: &Tensor<F>, eps: f64) -> Tensor<F> {
        let shape = self.node.shape.clone();
        let n = *shape.last().expect("layer_norm: rank 0");
        assert_eq!(gain.len(), n, "layer_norm: gain length {} vs axis {}", gain.len(), n);
        assert_eq!(bias.len(), n, "layer_norm: bias length {} vs axis {}", bias.len(), n);
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let rows = self.len() / n;
        let epsf = F::from_f64(eps);
        let inv_n = F::ONE / F::from_f64(n as f64);
        let mut out = vec![F::ZERO; self.len()];
        {
            let x = self.data();
            let gm = gain.data();
            let bm = bias.data();
            for r in 0..rows {
                let row = &x[r * n..(r + 1) * n];
                let mut mu = F::ZERO;
                for &v in row {
                    mu += v;
                }
                mu = mu * inv_n;
                let mut var = F::ZERO;
                for &v in row {
                    let d = v - mu;
                    var += d * d;
                }
                var = var * inv_n;
                let s = (var + epsf).sqrt();
                for j in 0..n {
                    let xhat = (row[j] - mu) / s;
                    out[r * n + j] = xhat * gm[j] + bm[j];
                }
            }
        }
        let (px, pg, pb) = (self.clone(), gain.clone(), bias.clone());
        Tensor::make_op(
            shape,
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _| {
                let x = px.data();
                let gm = pg.data();
                let mut dx = vec![F::ZERO; x.len()];
                let mut dgain = vec![F::ZERO; n];
                let mut dbias = vec![F::ZERO; n];
                for r in 0..rows {
                    let row = &x[r * n..(r + 1) * n];
                    let grow = &g[r * n..(r + 1) * n];
                    let mut mu = F::ZERO;
                    for &v in row {
                        mu += v;
                    }
                    mu = mu * inv_n;
                    let mut var = F::ZERO;
                    for &v in row {
                        let d = v - mu;
                        var += d * d;
                    }
                    var = var * inv_n;
                    let s = (var + epsf).sqrt();
                    let mut m1 = F::ZERO;
                    let mut m2 = F::ZERO;
                    for j in 0..n {
                        let xhat = (row[j] - mu) / s;
                        let gh = grow[j] * gm[j];
                        m1 += gh;
                        m2 += gh * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    m1 = m1 * inv_n;
                    m2 = m2 * inv_n;
                    for j in 0..n {
                        let xhat = (row[j] - mu) / s;
                        dx[r * n + j] = (grow[j] * gm[j] - m1 - xhat * m2) / s;
                    }
                }
                drop(x);
                px.accumulate_grad(&dx);
                pg.accumulate_grad(&dgain);
                pb.accumulate_grad(&dbias);
            }),
        )
    }

    /// −log softmax(logits)[target]; shares the softmax kernel so it agrees
    /// bit-for-bit with losses computed from already-softmaxed outputs.
    pub fn cross_entropy(&self, target_class: usize) -> Tensor<F> {
        let k = *self.node.shape.last().expect("cross_entropy: rank 0");
        assert_eq!(self.len(), k, "cross_entropy: logits must be a single row, got {:?}", self.shape());
        assert!(
            target_class < k,
            "cross_entropy: class index {target_class} out of {k} classes"
        );
        let axis = self.node.shape.len() - 1;
        self.softmax(axis).pick(target_class).ln().neg()
    }

    /// Rows scaled to unit L2 norm.
    pub fn normalize_rows(&self) -> Tensor<F> {
        assert_eq!(self.shape().len(), 2, "normalize_rows: need 2-D, got {:?}", self.shape());
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let floor = F::from_f64(1e-30);
        let mut out = vec![F::ZERO; r * c];
        {
            let x = self.data();
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mut sq = F::ZERO;
                for &v in row {
                    sq += v * v;
                }
                let norm = sq.sqrt().maximum(floor);
                for j in 0..c {
                    out[i * c + j] = row[j] / norm;
                }
            }
        }
        let pa = self.clone();
        Tensor::make_op(
            vec![r, c],
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                if !pa.node.requires_grad {
                    return;
                }
                let x = pa.data();
                let mut dx = vec![F::ZERO; r * c];
                for i in 0..r {
                    let row = &x[i * c..(i + 1) * c];
                    let mut sq = F::ZERO;
                    for &v in row {
                        sq += v * v;
                    }
                    let norm = sq.sqrt().maximum(floor);
                    let mut dot = F::ZERO;
                    for j in 0..c {
                        dot += g[i * c + j] * y[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = (g[i * c + j] - y[i * c + j] * dot) / norm;
                    }
                }
                drop(x);
                pa.accumulate_grad(&dx);
            }),
        )
    }
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

fn transpose_raw<F: Scalar>(a: &[F], r: usize, c: usize) -> Vec<F> {
    let mut t = vec![F::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}
