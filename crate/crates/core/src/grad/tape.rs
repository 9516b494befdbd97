//! Tape of recorded primitive applications and its reverse sweep.
//!
//! Every primitive stores its output value on the tape; the backward rule
//! of each node reads its inputs' values (and its own output where that is
//! cheaper) from there. Nodes whose inputs never require a gradient are
//! skipped in the reverse sweep.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use num_complex::Complex64;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::raster::{avg_pool_plane, bicubic_plane, bicubic_plane_transpose};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Differentiable operation implemented outside the closed primitive set.
pub trait ExternalOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    /// Vector-Jacobian product at `x` (with output `y`) for upstream `grad`.
    fn vjp(&self, x: &Tensor, y: &Tensor, grad: &Tensor) -> Result<Tensor>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    Sigmoid(usize),
    Relu(usize),
    Sum(usize),
    FrobeniusSqDiff(usize, usize),
    Conv2d { x: usize, w: usize, b: usize },
    Fft2(usize),
    Ifft2(usize),
    ToComplex(usize),
    RealPart(usize),
    ComplexMul(usize, usize),
    SpectralMix { x: usize, w: usize, k_max: usize },
    PatchSplit { x: usize, p: usize },
    PatchMerge { x: usize, grid_h: usize, grid_w: usize },
    AvgPool { x: usize, f: usize },
    Bicubic { x: usize, f: usize },
    Concat(Vec<usize>),
    StopGradient(usize),
    External { x: usize, op: Arc<dyn ExternalOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::FrobeniusSqDiff(..) => "frobenius_sq_diff",
            Op::Conv2d { .. } => "conv2d",
            Op::Fft2(_) => "fft2",
            Op::Ifft2(_) => "ifft2",
            Op::ToComplex(_) => "to_complex",
            Op::RealPart(_) => "real_part",
            Op::ComplexMul(..) => "complex_mul",
            Op::SpectralMix { .. } => "spectral_mix",
            Op::PatchSplit { .. } => "patch_split",
            Op::PatchMerge { .. } => "patch_merge",
            Op::AvgPool { .. } => "avg_pool",
            Op::Bicubic { .. } => "bicubic_upsample",
            Op::Concat(_) => "concat",
            Op::StopGradient(_) => "stop_gradient",
            Op::External { .. } => "external",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::FrobeniusSqDiff(a, b) | Op::ComplexMul(a, b) => {
                vec![*a, *b]
            }
            Op::ScalarMul(a, _)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Fft2(a)
            | Op::Ifft2(a)
            | Op::ToComplex(a)
            | Op::RealPart(a)
            | Op::StopGradient(a) => vec![*a],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::SpectralMix { x, w, .. } => vec![*x, *w],
            Op::PatchSplit { x, .. }
            | Op::PatchMerge { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Bicubic { x, .. }
            | Op::External { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-writer record of a forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

/// Gradients of the loss with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Frequency index of retained mode `m` out of `2 k_max − 1` per axis.
pub fn mode_index(m: usize, k_max: usize, p: usize) -> usize {
    if m < k_max {
        m
    } else {
        p - (2 * k_max - 1 - m)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::InvalidArgument("variable is not on this tape".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.index].op.name()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient(_) => false,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", a, b)?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", a, b)?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let va = &self.nodes[a].value;
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * s).collect());
        Ok(self.push(out, Op::ScalarMul(a, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let va = &self.nodes[a].value;
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| sigmoid(x)).collect());
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let va = &self.nodes[a].value;
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| x.max(0.0)).collect());
        Ok(self.push(out, Op::Relu(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let s = self.nodes[a].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    /// `Σ (a − b)²` as a scalar.
    pub fn frobenius_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("frobenius_sq_diff", a, b)?;
        let s = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::FrobeniusSqDiff(a, b)))
    }

    /// Stride-1, zero-padded 2D convolution (cross-correlation).
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]` with odd `k`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let (xs, ws, bs) = (
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            self.nodes[bi].value.shape(),
        );
        if xs.len() != 3 || ws.len() != 4 || bs != [ws[0]] || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(shape_err("conv2d", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let out = conv2d_forward(
            self.nodes[xi].value.data(),
            self.nodes[wi].value.data(),
            self.nodes[bi].value.data(),
            cin,
            cout,
            h,
            wd,
            k,
        );
        let out = Tensor::from_parts(vec![cout, h, wd], out);
        Ok(self.push(out, Op::Conv2d { x: xi, w: wi, b: bi }))
    }

    fn check_fft_shape(&self, op: &'static str, a: usize) -> Result<(usize, usize)> {
        let s = self.nodes[a].value.shape();
        if s.len() < 3 || s[s.len() - 1] != 2 {
            return Err(shape_err(op, format!("expected [..., H, W, 2], got {s:?}")));
        }
        let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(shape_err(op, format!("{h}x{w} is not a power-of-two size")));
        }
        Ok((h, w))
    }

    /// Unnormalized 2D DFT over the two axes before the complex axis.
    pub fn fft2(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let (h, w) = self.check_fft_shape("fft2", a)?;
        let va = &self.nodes[a].value;
        let mut buf = va.to_complex_vec();
        Fft2::new(h, w).forward(&mut buf);
        let out = Tensor::from_complex_vec(va.shape().to_vec(), &buf);
        Ok(self.push(out, Op::Fft2(a)))
    }

    /// Inverse of [`Tape::fft2`], normalized by `1/(H·W)`.
    pub fn ifft2(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let (h, w) = self.check_fft_shape("ifft2", a)?;
        let va = &self.nodes[a].value;
        let mut buf = va.to_complex_vec();
        Fft2::new(h, w).inverse_normalized(&mut buf);
        let out = Tensor::from_complex_vec(va.shape().to_vec(), &buf);
        Ok(self.push(out, Op::Ifft2(a)))
    }

    pub fn to_complex(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let va = &self.nodes[a].value;
        let mut shape = va.shape().to_vec();
        shape.push(2);
        let mut data = Vec::with_capacity(va.len() * 2);
        for &x in va.data() {
            data.push(x);
            data.push(0.0);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::ToComplex(a)))
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let va = &self.nodes[a].value;
        if !va.is_complex() {
            return Err(shape_err("real_part", format!("{:?} is not complex", va.shape())));
        }
        let shape = va.shape()[..va.shape().len() - 1].to_vec();
        let data = va.data().chunks_exact(2).map(|c| c[0]).collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::RealPart(a)))
    }

    /// Elementwise complex product of two same-shape complex tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("complex_mul", a, b)?;
        if !self.nodes[a].value.is_complex() {
            return Err(shape_err("complex_mul", "operands are not complex"));
        }
        let ca = self.nodes[a].value.to_complex_vec();
        let cb = self.nodes[b].value.to_complex_vec();
        let prod: Vec<Complex64> = ca.iter().zip(&cb).map(|(x, y)| x * y).collect();
        let out = Tensor::from_complex_vec(self.nodes[a].value.shape().to_vec(), &prod);
        Ok(self.push(out, Op::ComplexMul(a, b)))
    }

    /// Per-mode complex channel mixing on the retained low-frequency modes.
    ///
    /// `x: [P, Cin, p, p, 2]` spectra, `w: [Cin, Cout, K, K, 2]` with
    /// `K = 2 k_max − 1`. Output `[P, Cout, p, p, 2]` is zero outside the
    /// retained modes.
    pub fn spectral_mix(&mut self, x: Var, w: Var, k_max: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        let kk = 2 * k_max.max(1) - 1;
        if xs.len() != 5
            || ws.len() != 5
            || xs[4] != 2
            || ws[4] != 2
            || xs[2] != xs[3]
            || ws[0] != xs[1]
            || ws[2] != kk
            || ws[3] != kk
            || k_max == 0
            || 2 * k_max > xs[2]
        {
            return Err(shape_err("spectral_mix", format!("x {xs:?}, w {ws:?}, k_max {k_max}")));
        }
        let (np, cin, p) = (xs[0], xs[1], xs[2]);
        let cout = ws[1];
        let xc = self.nodes[xi].value.to_complex_vec();
        let wc = self.nodes[wi].value.to_complex_vec();
        let modes: Vec<usize> = (0..kk).map(|m| mode_index(m, k_max, p)).collect();
        let mut out = vec![Complex64::new(0.0, 0.0); np * cout * p * p];
        for pi in 0..np {
            for i in 0..cin {
                let xplane = &xc[(pi * cin + i) * p * p..][..p * p];
                for o in 0..cout {
                    let wplane = &wc[(i * cout + o) * kk * kk..][..kk * kk];
                    let oplane = &mut out[(pi * cout + o) * p * p..][..p * p];
                    for (mu, &u) in modes.iter().enumerate() {
                        for (mv, &v) in modes.iter().enumerate() {
                            oplane[u * p + v] += wplane[mu * kk + mv] * xplane[u * p + v];
                        }
                    }
                }
            }
        }
        let out = Tensor::from_complex_vec(vec![np, cout, p, p, 2], &out);
        Ok(self.push(out, Op::SpectralMix { x: xi, w: wi, k_max }))
    }

    /// `[C, H, W] → [P, C, p, p]`, patches in row-major grid order.
    pub fn patch_split(&mut self, x: Var, p: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        if s.len() != 3 || p == 0 || !s[1].is_multiple_of(p) || !s[2].is_multiple_of(p) {
            return Err(shape_err("patch_split", format!("{s:?} with patch {p}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / p, w / p);
        let out = patch_split_data(self.nodes[xi].value.data(), c, gh, gw, p);
        let out = Tensor::from_parts(vec![gh * gw, c, p, p], out);
        Ok(self.push(out, Op::PatchSplit { x: xi, p }))
    }

    /// Inverse of [`Tape::patch_split`] for a `grid_h × grid_w` patch grid.
    pub fn patch_merge(&mut self, x: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        if s.len() != 4 || s[0] != grid_h * grid_w || s[2] != s[3] {
            return Err(shape_err("patch_merge", format!("{s:?} into {grid_h}x{grid_w} grid")));
        }
        let (c, p) = (s[1], s[2]);
        let out = patch_merge_data(self.nodes[xi].value.data(), c, grid_h, grid_w, p);
        let out = Tensor::from_parts(vec![c, grid_h * p, grid_w * p], out);
        Ok(self.push(out, Op::PatchMerge { x: xi, grid_h, grid_w }))
    }

    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        if s.len() != 3 || f == 0 || !s[1].is_multiple_of(f) || !s[2].is_multiple_of(f) {
            return Err(shape_err("avg_pool", format!("{s:?} with factor {f}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(c * h * w / (f * f));
        for plane in data.chunks_exact(h * w) {
            out.extend(avg_pool_plane(plane, h, w, f));
        }
        let out = Tensor::from_parts(vec![c, h / f, w / f], out);
        Ok(self.push(out, Op::AvgPool { x: xi, f }))
    }

    pub fn bicubic_upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.shape();
        if s.len() != 3 || f == 0 {
            return Err(shape_err("bicubic_upsample", format!("{s:?} with factor {f}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let data = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(c * h * w * f * f);
        for plane in data.chunks_exact(h * w) {
            out.extend(bicubic_plane(plane, h, w, f));
        }
        let out = Tensor::from_parts(vec![c, h * f, w * f], out);
        Ok(self.push(out, Op::Bicubic { x: xi, f }))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let tail = self.nodes[idx[0]].value.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(idx)))
    }

    /// Same value, no gradient flows to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let v = self.nodes[a].value.clone();
        Ok(self.push(v, Op::StopGradient(a)))
    }

    pub fn external(&mut self, x: Var, op: Arc<dyn ExternalOp>) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = op.forward(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::External { x: xi, op }))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, None)
    }

    /// Reverse sweep with an explicit upstream seed (vector-Jacobian product).
    pub fn vjp(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.backward_with_seed(output, Some(seed))
    }

    fn backward_with_seed(&self, out: Var, seed: Option<Tensor>) -> Result<Gradients> {
        let root = self.idx(out)?;
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.nodes[root].value.shape() {
                    return Err(shape_err("backward", "seed shape differs from output"));
                }
                s
            }
            None => {
                if !self.nodes[root].value.is_scalar() {
                    return Err(shape_err(
                        "backward",
                        format!("loss must be scalar, got {:?}", self.nodes[root].value.shape()),
                    ));
                }
                Tensor::scalar(1.0)
            }
        };
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.node_vjp(i, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn node_vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let gd = g.data();
        let like = |j: usize, data: Vec<f64>| Tensor::from_parts(val(j).shape().to_vec(), data);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => {
                let ga = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, like(*a, ga)), (*b, like(*b, gb))]
            }
            Op::ScalarMul(a, s) => vec![(*a, like(*a, gd.iter().map(|g| g * s).collect()))],
            Op::Sigmoid(a) => {
                let y = node.value.data();
                vec![(*a, like(*a, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()))]
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                vec![(*a, like(*a, gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()))]
            }
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), gd[0]))],
            Op::FrobeniusSqDiff(a, b) => {
                let s = 2.0 * gd[0];
                let d: Vec<f64> = val(*a).data().iter().zip(val(*b).data()).map(|(x, y)| s * (x - y)).collect();
                let neg = d.iter().map(|v| -v).collect();
                vec![(*a, like(*a, d)), (*b, like(*b, neg))]
            }
            Op::Conv2d { x, w, b } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (gx, gw, gb) = conv2d_backward(
                    val(*x).data(),
                    val(*w).data(),
                    gd,
                    xs[0],
                    ws[0],
                    xs[1],
                    xs[2],
                    ws[2],
                );
                vec![(*x, like(*x, gx)), (*w, like(*w, gw)), (*b, like(*b, gb))]
            }
            Op::Fft2(a) => {
                let s = g.shape();
                let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
                let mut buf = g.to_complex_vec();
                Fft2::new(h, w).inverse(&mut buf);
                vec![(*a, Tensor::from_complex_vec(s.to_vec(), &buf))]
            }
            Op::Ifft2(a) => {
                let s = g.shape();
                let (h, w) = (s[s.len() - 3], s[s.len() - 2]);
                let mut buf = g.to_complex_vec();
                Fft2::new(h, w).forward(&mut buf);
                let scale = 1.0 / (h * w) as f64;
                for v in &mut buf {
                    *v *= scale;
                }
                vec![(*a, Tensor::from_complex_vec(s.to_vec(), &buf))]
            }
            Op::ToComplex(a) => vec![(*a, like(*a, gd.chunks_exact(2).map(|c| c[0]).collect()))],
            Op::RealPart(a) => {
                let mut data = Vec::with_capacity(gd.len() * 2);
                for &v in gd {
                    data.push(v);
                    data.push(0.0);
                }
                vec![(*a, like(*a, data))]
            }
            Op::ComplexMul(a, b) => {
                let gc = g.to_complex_vec();
                let ca = val(*a).to_complex_vec();
                let cb = val(*b).to_complex_vec();
                let ga: Vec<Complex64> = gc.iter().zip(&cb).map(|(g, y)| y.conj() * g).collect();
                let gb: Vec<Complex64> = gc.iter().zip(&ca).map(|(g, x)| x.conj() * g).collect();
                vec![
                    (*a, Tensor::from_complex_vec(val(*a).shape().to_vec(), &ga)),
                    (*b, Tensor::from_complex_vec(val(*b).shape().to_vec(), &gb)),
                ]
            }
            Op::SpectralMix { x, w, k_max } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (np, cin, p, cout) = (xs[0], xs[1], xs[2], ws[1]);
                let kk = 2 * k_max - 1;
                let modes: Vec<usize> = (0..kk).map(|m| mode_index(m, *k_max, p)).collect();
                let xc = val(*x).to_complex_vec();
                let wc = val(*w).to_complex_vec();
                let gc = g.to_complex_vec();
                let zero = Complex64::new(0.0, 0.0);
                let mut gx = vec![zero; xc.len()];
                let mut gw = vec![zero; wc.len()];
                for pi in 0..np {
                    for i in 0..cin {
                        let xo = (pi * cin + i) * p * p;
                        for o in 0..cout {
                            let wo = (i * cout + o) * kk * kk;
                            let go = (pi * cout + o) * p * p;
                            for (mu, &u) in modes.iter().enumerate() {
                                for (mv, &v) in modes.iter().enumerate() {
                                    let gy = gc[go + u * p + v];
                                    gx[xo + u * p + v] += wc[wo + mu * kk + mv].conj() * gy;
                                    gw[wo + mu * kk + mv] += xc[xo + u * p + v].conj() * gy;
                                }
                            }
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_complex_vec(xs.to_vec(), &gx)),
                    (*w, Tensor::from_complex_vec(ws.to_vec(), &gw)),
                ]
            }
            Op::PatchSplit { x, p } => {
                let s = val(*x).shape();
                let (c, gh, gw) = (s[0], s[1] / p, s[2] / p);
                vec![(*x, like(*x, patch_merge_data(gd, c, gh, gw, *p)))]
            }
            Op::PatchMerge { x, grid_h, grid_w } => {
                let s = val(*x).shape();
                vec![(*x, like(*x, patch_split_data(gd, s[1], *grid_h, *grid_w, s[2])))]
            }
            Op::AvgPool { x, f } => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / f, w / f);
                let inv = 1.0 / (f * f) as f64;
                let mut out = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            out[(ch * h + r) * w + col] = gd[(ch * oh + r / f) * ow + col / f] * inv;
                        }
                    }
                }
                vec![(*x, like(*x, out))]
            }
            Op::Bicubic { x, f } => {
                let s = val(*x).shape();
                let (h, w) = (s[1], s[2]);
                let mut out = Vec::with_capacity(val(*x).len());
                for plane in gd.chunks_exact(h * w * f * f) {
                    out.extend(bicubic_plane_transpose(plane, h, w, *f));
                }
                vec![(*x, like(*x, out))]
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                xs.iter()
                    .map(|&j| {
                        let n = val(j).len();
                        let part = gd[offset..offset + n].to_vec();
                        offset += n;
                        (j, like(j, part))
                    })
                    .collect()
            }
            Op::StopGradient(_) => vec![],
            Op::External { x, op } => vec![(*x, op.vjp(val(*x), &node.value, g)?)],
        })
    }
}

fn patch_split_data(src: &[f64], c: usize, gh: usize, gw: usize, p: usize) -> Vec<f64> {
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![0.0; c * h * w];
    for gr in 0..gh {
        for gc in 0..gw {
            let pi = gr * gw + gc;
            for ch in 0..c {
                for r in 0..p {
                    let s = (ch * h + gr * p + r) * w + gc * p;
                    let d = ((pi * c + ch) * p + r) * p;
                    out[d..d + p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
    }
    out
}

fn patch_merge_data(src: &[f64], c: usize, gh: usize, gw: usize, p: usize) -> Vec<f64> {
    let (h, w) = (gh * p, gw * p);
    let mut out = vec![0.0; c * h * w];
    for gr in 0..gh {
        for gc in 0..gw {
            let pi = gr * gw + gc;
            for ch in 0..c {
                for r in 0..p {
                    let d = (ch * h + gr * p + r) * w + gc * p;
                    let s = ((pi * c + ch) * p + r) * p;
                    out[d..d + p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
    }
    out
}

/// Valid output range `[lo, hi)` for a tap offset `off` over length `n`.
#[inline]
fn tap_range(off: isize, n: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> Vec<f64> {
    let c = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * wd];
    for co in 0..cout {
        let oplane = &mut out[co * h * wd..(co + 1) * h * wd];
        oplane.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..cin {
            let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let oy = ky as isize - c;
                let (r0, r1) = tap_range(oy, h);
                for kx in 0..k {
                    let ox = kx as isize - c;
                    let (c0, c1) = tap_range(ox, wd);
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for r in r0..r1 {
                        let sr = (r as isize + oy) as usize;
                        let src = &xplane[sr * wd..(sr + 1) * wd];
                        let dst = &mut oplane[r * wd..(r + 1) * wd];
                        for col in c0..c1 {
                            dst[col] += wv * src[(col as isize + ox) as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = (k / 2) as isize;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let gb = (0..cout)
        .map(|co| g[co * h * wd..(co + 1) * h * wd].iter().sum())
        .collect();
    for co in 0..cout {
        let gplane = &g[co * h * wd..(co + 1) * h * wd];
        for ci in 0..cin {
            let xplane = &x[ci * h * wd..(ci + 1) * h * wd];
            let gxplane = &mut gx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let oy = ky as isize - c;
                let (r0, r1) = tap_range(oy, h);
                for kx in 0..k {
                    let ox = kx as isize - c;
                    let (c0, c1) = tap_range(ox, wd);
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let sr = (r as isize + oy) as usize;
                        let grow = &gplane[r * wd..(r + 1) * wd];
                        let xrow = &xplane[sr * wd..(sr + 1) * wd];
                        let gxrow = &mut gxplane[sr * wd..(sr + 1) * wd];
                        for col in c0..c1 {
                            let sc = (col as isize + ox) as usize;
                            acc += grow[col] * xrow[sc];
                            gxrow[sc] += wv * grow[col];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}
