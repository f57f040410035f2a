//! Tape of tensor operations with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it in reverse.

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec },
    Relu(Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Transpose(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    Scale(Var, f64),
    ColumnAffine { input: Var, scale: Vec<f64> },
    ContrastiveCe { input: Var, probs: Vec<f64> },
    Mse(Var, Var),
    Exp(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    AffineCombination(Vec<(f64, Var)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn conv_out(size: usize, kernel: usize, spec: Conv2dSpec) -> Option<usize> {
    (size + 2 * spec.padding).checked_sub(kernel).map(|d| d / spec.stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                dx[(c * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a 2-D input, got {s:?}"))),
        }
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match self.shape(v) {
            [n, c, h, w] => Ok([*n, *c, *h, *w]),
            s => Err(Error::shape(op, format!("expected an N×C×H×W input, got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::with_shape(vec![n, m], out), Op::MatMul(a, b), rg))
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims2("add_bias", x)?;
        if self.shape(bias) != [m] {
            return Err(Error::shape("add_bias", format!("input [{n}, {m}] with bias {:?}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.needs(&[x, bias]);
        Ok(self.push(Tensor::with_shape(vec![n, m], out), Op::AddBias(x, bias), rg))
    }

    /// 2-D cross-correlation, NCHW input, `[O, C, KH, KW]` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let [n, c, h, w] = self.dims4("conv2d", input)?;
        let [o, cw, kh, kw] = self.dims4("conv2d", weight)?;
        if c != cw || spec.stride == 0 {
            return Err(Error::shape("conv2d", format!("input {:?} with weight {:?}, stride {}", self.shape(input), self.shape(weight), spec.stride)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {o} output channels", self.shape(b))));
            }
        }
        let (Some(ho), Some(wo)) = (conv_out(h, kh, spec), conv_out(w, kw, spec)) else {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        };
        let g = ConvGeom { c, h, w, kh, kw, ho, wo, stride: spec.stride, pad: spec.padding };
        let (rows, p) = (g.rows(), g.positions());
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; n * o * p];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        for s in 0..n {
            g.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut cols);
            let dst = &mut out[s * o * p..(s + 1) * o * p];
            gemm(o, rows, p, wt, false, &cols, false, 0.0, dst);
            if let Some(b) = bias {
                for (ch, bv) in self.value(b).data().iter().enumerate() {
                    dst[ch * p..(ch + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut parents = vec![input, weight];
        parents.extend(bias);
        let rg = self.needs(&parents);
        Ok(self.push(Tensor::with_shape(vec![n, o, ho, wo], out), Op::Conv2d { input, weight, bias, spec }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&a| a.max(0.0)).collect();
        let t = Tensor::with_shape(v.shape().to_vec(), out);
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    /// Non-overlapping `kh × kw` max pooling; ties keep the first element.
    pub fn max_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4("max_pool", x)?;
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return Err(Error::shape("max_pool", format!("window {kh}x{kw} on {h}x{w}")));
        }
        let (ho, wo) = (h / kh, w / kw);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * kh * w + ox * kw;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let idx = base + (oy * kh + dy) * w + ox * kw + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::with_shape(vec![n, c, ho, wo], out), Op::MaxPool { input: x, argmax }, rg))
    }

    /// `[N, C, H, W] → [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("global_avg_pool", x)?;
        let hw = h * w;
        let out = self.value(x).data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::with_shape(vec![n, c], out), Op::GlobalAvgPool(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(Error::shape("reshape", format!("{:?} to {shape:?}", v.shape())));
        }
        let t = Tensor::with_shape(shape, v.data().to_vec());
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let Some(&n) = shape.first() else {
            return Err(Error::shape("flatten", "scalar input"));
        };
        let rest = shape[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    /// Concatenates 2-D inputs along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let n = self.dims2("concat", parts[0])?.0;
        for &p in parts {
            let (rows, cols) = self.dims2("concat", p)?;
            if rows != n {
                return Err(Error::shape("concat", format!("row counts {n} and {rows}")));
            }
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * wdt..(row + 1) * wdt]);
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::with_shape(vec![n, total], out), Op::Concat(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::with_shape(vec![c, r], out), Op::Transpose(x), rg))
    }

    /// Scales each row of a 2-D input to unit Euclidean norm.
    ///
    /// A zero row has no direction and is reported as a numeric error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.dims2("l2_normalize_rows", x)?;
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * m);
        let mut norms = Vec::with_capacity(n);
        for (i, row) in d.chunks(m).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric(format!("cannot normalize row {i} with norm {norm}")));
            }
            out.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::with_shape(vec![n, m], out), Op::L2NormalizeRows { input: x, norms }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::with_shape(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect());
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Scale(x, factor), rg))
    }

    /// Fixed per-column map `y[:, j] = scale[j]·x[:, j] + shift[j]`.
    pub fn column_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (n, m) = self.dims2("column_affine", x)?;
        if scale.len() != m || shift.len() != m {
            return Err(Error::shape("column_affine", format!("{m} columns, {} scales, {} shifts", scale.len(), shift.len())));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            for j in 0..m {
                row[j] = row[j] * scale[j] + shift[j];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::with_shape(vec![n, m], out), Op::ColumnAffine { input: x, scale: scale.to_vec() }, rg))
    }

    /// Mean over rows of the cross-entropy of `softmax(row i)` against class `i`.
    pub fn row_softmax_cross_entropy_diagonal(&mut self, s: Var) -> Result<Var> {
        let (b, b2) = self.dims2("row_softmax_cross_entropy_diagonal", s)?;
        if b != b2 || b == 0 {
            return Err(Error::shape("row_softmax_cross_entropy_diagonal", format!("expected a nonempty square matrix, got {b}x{b2}")));
        }
        let d = self.value(s).data();
        let mut probs = Vec::with_capacity(b * b);
        let mut loss = 0.0;
        for (i, row) in d.chunks(b).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[i];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let rg = self.needs(&[s]);
        Ok(self.push(Tensor::scalar(loss / b as f64), Op::ContrastiveCe { input: s, probs }, rg))
    }

    /// Batch mean of squared Euclidean row distances.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let (b, _) = self.dims2("mse", pred)?;
        if b == 0 {
            return Err(Error::shape("mse", "empty batch"));
        }
        let total: f64 = self.value(pred).data().iter().zip(self.value(target).data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(total / b as f64), Op::Mse(pred, target), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::with_shape(v.shape().to_vec(), v.data().iter().map(|a| a.exp()).collect());
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Exp(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::with_shape(self.shape(a).to_vec(), out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::with_shape(self.shape(a).to_vec(), out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    /// `Σ cᵢ·xᵢ` over same-shaped inputs.
    pub fn affine_combination(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::shape("affine_combination", "no terms"));
        };
        for &(_, v) in terms {
            self.same_shape("affine_combination", first, v)?;
        }
        let mut out = vec![0.0; self.value(first).numel()];
        for &(c, v) in terms {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let t = Tensor::with_shape(self.shape(first).to_vec(), out);
        let vars: Vec<Var> = terms.iter().map(|t| t.1).collect();
        let rg = self.needs(&vars);
        Ok(self.push(t, Op::AffineCombination(terms.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires a gradient. Earlier gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        let Graph { nodes, grads } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            backprop(nodes, grads, i, &up);
            grads[i] = Some(up);
        }
        Ok(())
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, up: &[f64]) {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (n, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let m = nodes[b.0].value.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(n, m, k, up, false, nodes[b.0].value.data(), true, 1.0, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, n, m, nodes[a.0].value.data(), true, up, false, 1.0, gb);
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(up).for_each(|(g, u)| *g += u);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                let m = gb.len();
                for row in up.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(g, u)| *g += u);
                }
            }
        }
        Op::Conv2d { input, weight, bias, spec } => {
            let &[n, c, h, w] = nodes[input.0].value.shape() else { unreachable!() };
            let &[o, _, kh, kw] = nodes[weight.0].value.shape() else { unreachable!() };
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            let g = ConvGeom { c, h, w, kh, kw, ho, wo, stride: spec.stride, pad: spec.padding };
            let (rows, p) = (g.rows(), g.positions());
            let x = nodes[input.0].value.data();
            let wt = nodes[weight.0].value.data();
            let mut cols = vec![0.0; rows * p];
            if let Some(gw) = slot(nodes, grads, *weight) {
                for s in 0..n {
                    g.im2col(&x[s * c * h * w..(s + 1) * c * h * w], &mut cols);
                    gemm(o, p, rows, &up[s * o * p..(s + 1) * o * p], false, &cols, true, 1.0, gw);
                }
            }
            if let Some(b) = bias {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for s in 0..n {
                        for (ch, gv) in gb.iter_mut().enumerate() {
                            *gv += up[(s * o + ch) * p..(s * o + ch + 1) * p].iter().sum::<f64>();
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *input) {
                for s in 0..n {
                    gemm(rows, o, p, wt, true, &up[s * o * p..(s + 1) * o * p], false, 0.0, &mut cols);
                    g.col2im(&cols, &mut gx[s * c * h * w..(s + 1) * c * h * w]);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((g, u), v) in gx.iter_mut().zip(up).zip(nodes[x.0].value.data()) {
                    if *v > 0.0 {
                        *g += u;
                    }
                }
            }
        }
        Op::MaxPool { input, argmax } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                for (u, &idx) in up.iter().zip(argmax) {
                    gx[idx] += u;
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let hw = gx.len() / up.len();
                for (plane, u) in gx.chunks_mut(hw).zip(up) {
                    plane.iter_mut().for_each(|g| *g += u / hw as f64);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(up).for_each(|(g, u)| *g += u);
            }
        }
        Op::Concat(parts) => {
            let total = out.shape()[1];
            let mut offset = 0;
            for p in parts {
                let wdt = nodes[p.0].value.shape()[1];
                if let Some(gp) = slot(nodes, grads, *p) {
                    for (row, grow) in gp.chunks_mut(wdt).enumerate() {
                        let src = &up[row * total + offset..row * total + offset + wdt];
                        grow.iter_mut().zip(src).for_each(|(g, u)| *g += u);
                    }
                }
                offset += wdt;
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += up[j * r + i];
                    }
                }
            }
        }
        Op::L2NormalizeRows { input, norms } => {
            let m = out.shape()[1];
            if let Some(gx) = slot(nodes, grads, *input) {
                for (row, norm) in norms.iter().enumerate() {
                    let y = &out.data()[row * m..(row + 1) * m];
                    let u = &up[row * m..(row + 1) * m];
                    let proj: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        gx[row * m + j] += (u[j] - y[j] * proj) / norm;
                    }
                }
            }
        }
        Op::Scale(x, factor) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(up).for_each(|(g, u)| *g += factor * u);
            }
        }
        Op::ColumnAffine { input, scale } => {
            if let Some(gx) = slot(nodes, grads, *input) {
                let m = scale.len();
                for (grow, urow) in gx.chunks_mut(m).zip(up.chunks(m)) {
                    for j in 0..m {
                        grow[j] += scale[j] * urow[j];
                    }
                }
            }
        }
        Op::ContrastiveCe { input, probs } => {
            let b = nodes[input.0].value.shape()[0];
            if let Some(gs) = slot(nodes, grads, *input) {
                let coef = up[0] / b as f64;
                for i in 0..b {
                    for j in 0..b {
                        let target = if i == j { 1.0 } else { 0.0 };
                        gs[i * b + j] += coef * (probs[i * b + j] - target);
                    }
                }
            }
        }
        Op::Mse(pred, target) => {
            let b = nodes[pred.0].value.shape()[0];
            let coef = 2.0 * up[0] / b as f64;
            let diff: Vec<f64> = nodes[pred.0].value.data().iter().zip(nodes[target.0].value.data()).map(|(p, t)| p - t).collect();
            if let Some(gp) = slot(nodes, grads, *pred) {
                gp.iter_mut().zip(&diff).for_each(|(g, d)| *g += coef * d);
            }
            if let Some(gt) = slot(nodes, grads, *target) {
                gt.iter_mut().zip(&diff).for_each(|(g, d)| *g -= coef * d);
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((g, u), y) in gx.iter_mut().zip(up).zip(out.data()) {
                    *g += u * y;
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(up).for_each(|(g, u)| *g += u);
                }
            }
        }
        Op::Mul(a, b) => {
            // Read both operands before writing, since `a` may equal `b`.
            let da: Vec<f64> = up.iter().zip(nodes[b.0].value.data()).map(|(u, y)| u * y).collect();
            let db: Vec<f64> = up.iter().zip(nodes[a.0].value.data()).map(|(u, x)| u * x).collect();
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(&da).for_each(|(g, d)| *g += d);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(&db).for_each(|(g, d)| *g += d);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|g| *g += up[0]);
            }
        }
        Op::AffineCombination(terms) => {
            for (c, v) in terms {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(up).for_each(|(g, u)| *g += c * u);
                }
            }
        }
    }
}
