use crate::autodiff::kernels::{self, ConvGeom, Mat};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive that produced a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Linear,
    Conv2d,
    Relu,
    Sigmoid,
    Mul,
    Add,
    Scale,
    MaxPool2d,
    GlobalAvgPool,
    Reshape,
    Concat,
    L2Normalize,
    Sum,
    Contrastive,
    Divergence,
}

/// One designated pair of rows: `(anchor, partner, same_label)`.
pub type PairIndex = (usize, usize, bool);

enum Op {
    Leaf,
    Linear { input: Var, weight: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, cols: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    L2Normalize { input: Var, eps: f64, norms: Vec<f64> },
    Sum(Var),
    Contrastive { input: Var, pairs: Vec<PairIndex>, margin: f64 },
    Divergence { inputs: Vec<Var>, margin: f64 },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Mul(..) => OpKind::Mul,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Sum(_) => OpKind::Sum,
            Op::Contrastive { .. } => OpKind::Contrastive,
            Op::Divergence { .. } => OpKind::Divergence,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
            Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Scale(x, _) | Op::GlobalAvgPool(x) | Op::Reshape(x) | Op::Sum(x) => {
                vec![*x]
            }
            Op::Mul(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::MaxPool2d { input, .. } | Op::L2Normalize { input, .. } | Op::Contrastive { input, .. } => {
                vec![*input]
            }
            Op::Concat { inputs, .. } | Op::Divergence { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

pub(crate) fn contrastive_value(rows: &[f64], width: usize, pairs: &[PairIndex], margin: f64) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|&(i, j, same)| {
            let d2 = sq_dist(&rows[i * width..(i + 1) * width], &rows[j * width..(j + 1) * width]);
            if same {
                d2
            } else {
                (margin - d2).max(0.0)
            }
        })
        .sum();
    total / pairs.len() as f64
}

pub(crate) fn divergence_value(learners: &[&[f64]], width: usize, margin: f64) -> f64 {
    let rows = learners.first().map_or(0, |l| l.len() / width);
    let mut total = 0.0;
    for i in 0..rows {
        for p in 0..learners.len() {
            for q in p + 1..learners.len() {
                let d2 = sq_dist(
                    &learners[p][i * width..(i + 1) * width],
                    &learners[q][i * width..(i + 1) * width],
                );
                total += (margin - d2).max(0.0);
            }
        }
    }
    total
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Tape {
    /// A tape that records everything needed for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            training: true,
        }
    }

    /// A forward-only tape: no saved buffers, backward is refused.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
        }
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.training && self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `out[b,o] = sum_i input[b,i] * weight[i,o] + bias[o]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (xs, ws, bs) = (x.shape(), w.shape(), b.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::dim(format!(
                "linear expects input [B,I], weight [I,O], bias [O]; got {xs:?}, {ws:?}, {bs:?}"
            )));
        }
        let (batch, inner, outer) = (xs[0], xs[1], ws[1]);
        if ws[0] != inner {
            return Err(Error::dim(format!(
                "linear: input axis 1 ({inner}) does not match weight axis 0 ({})",
                ws[0]
            )));
        }
        if bs[0] != outer {
            return Err(Error::dim(format!(
                "linear: bias axis 0 ({}) does not match weight axis 1 ({outer})",
                bs[0]
            )));
        }
        let mut out = vec![0.0; batch * outer];
        for row in out.chunks_exact_mut(outer) {
            row.copy_from_slice(b.data());
        }
        kernels::gemm(Mat::new(x.data(), batch, inner), Mat::new(w.data(), inner, outer), &mut out, true);
        let value = Tensor::new(vec![batch, outer], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    /// Stride-1 cross-correlation with zero same-padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let (xs, ks, bs) = (x.shape(), k.shape(), b.shape());
        if xs.len() != 4 || ks.len() != 4 || bs.len() != 1 {
            return Err(Error::dim(format!(
                "conv2d expects input [B,C,H,W], kernel [K,C,kh,kw], bias [K]; got {xs:?}, {ks:?}, {bs:?}"
            )));
        }
        if ks[1] != xs[1] {
            return Err(Error::dim(format!(
                "conv2d: kernel axis 1 ({}) does not match input channels axis 1 ({})",
                ks[1], xs[1]
            )));
        }
        if bs[0] != ks[0] {
            return Err(Error::dim(format!(
                "conv2d: bias axis 0 ({}) does not match kernel axis 0 ({})",
                bs[0], ks[0]
            )));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernel extent {}x{} must be odd for same-padding",
                ks[2], ks[3]
            )));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            height: xs[2],
            width: xs[3],
            out_c: ks[0],
            kh: ks[2],
            kw: ks[3],
        };
        let cols = kernels::im2col(x.data(), &geom);
        let ncols = geom.columns();
        let mut out_cm = vec![0.0; geom.out_c * ncols];
        for (row, &bias_k) in out_cm.chunks_exact_mut(ncols).zip(b.data()) {
            row.fill(bias_k);
        }
        kernels::gemm(
            Mat::new(k.data(), geom.out_c, geom.patch()),
            Mat::new(&cols, geom.patch(), ncols),
            &mut out_cm,
            true,
        );
        let out = kernels::channel_to_batch_major(&out_cm, geom.batch, geom.out_c, geom.plane());
        let value = Tensor::new(vec![geom.batch, geom.out_c, geom.height, geom.width], out)?;
        let cols = if self.training { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom, cols }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sigmoid(x)))
    }

    /// Element-wise (Hadamard) product of equal-shape operands.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, factor)))
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::dim(format!("max_pool2d expects [B,C,H>=2,W>=2], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = t.data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let argmax = if self.training { argmax } else { Vec::new() };
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }))
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects [B,C,H,W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let data = t.data().chunks_exact(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.is_empty() {
            return Err(Error::dim("flatten of a scalar"));
        }
        let shape = vec![s[0], numel(&s[1..])];
        self.reshape(x, shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for rank {}", base.len())));
        }
        let mut along = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != base.len() {
                return Err(Error::dim(format!("concat: rank mismatch {s:?} vs {base:?}")));
            }
            for (ax, (&a, &b)) in s.iter().zip(&base).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::dim(format!(
                        "concat along axis {axis}: axis {ax} differs ({a} vs {b})"
                    )));
                }
            }
            along += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * along * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = along;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Divide each last-axis row by `max(norm, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::usage(format!("l2_normalize epsilon must be positive, got {eps}")));
        }
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::dim("l2_normalize of a scalar"))?;
        let mut data = Vec::with_capacity(t.len());
        let mut norms = Vec::with_capacity(t.len() / width);
        for row in t.data().chunks_exact(width) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            data.extend(row.iter().map(|v| v / denom));
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize { input: x, eps, norms }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::Sum(x)))
    }

    /// Mean over designated row pairs of `y*D^2 + (1-y)*max(0, margin - D^2)`.
    pub fn contrastive(&mut self, x: Var, pairs: &[PairIndex], margin: f64) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::usage("contrastive loss needs at least one pair"));
        }
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim(format!("contrastive expects [N,d] rows, got {:?}", t.shape())));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        if let Some(&(i, j, _)) = pairs.iter().find(|&&(i, j, _)| i >= rows || j >= rows) {
            return Err(Error::dim(format!("pair ({i},{j}) indexes outside {rows} rows")));
        }
        let loss = contrastive_value(t.data(), width, pairs, margin);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Contrastive {
                input: x,
                pairs: pairs.to_vec(),
                margin,
            },
        ))
    }

    /// Sum over rows and learner pairs `p<q` of `max(0, margin - |e_p - e_q|^2)`.
    pub fn divergence(&mut self, learners: &[Var], margin: f64) -> Result<Var> {
        let first = learners.first().ok_or_else(|| Error::usage("divergence of zero learners"))?;
        let shape = self.value(*first).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("divergence expects [B,d] per learner, got {shape:?}")));
        }
        for v in learners {
            check_same_shape(self.value(*first), self.value(*v), "divergence")?;
        }
        let slices: Vec<&[f64]> = learners.iter().map(|v| self.value(*v).data()).collect();
        let loss = divergence_value(&slices, shape[1], margin);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Divergence {
                inputs: learners.to_vec(),
                margin,
            },
        ))
    }

    /// Propagate `d loss / d node` back to every differentiable leaf. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.training {
            return Err(Error::usage("backward on an inference tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::Internal(format!(
                        "tape order violated: node {idx} reads node {}",
                        input.0
                    )));
                }
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { input, weight, bias } => {
                let s = self.value(*input).shape();
                let (batch, inner) = (s[0], s[1]);
                let outer = self.value(*weight).shape()[1];
                if self.wants(*input) {
                    let mut dx = vec![0.0; batch * inner];
                    kernels::gemm(Mat::new(g, batch, outer), Mat::t(val(*weight), inner, outer), &mut dx, false);
                    send(*input, dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; inner * outer];
                    kernels::gemm(Mat::t(val(*input), batch, inner), Mat::new(g, batch, outer), &mut dw, false);
                    send(*weight, dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; outer];
                    for row in g.chunks_exact(outer) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let ncols = geom.columns();
                let g_cm = kernels::batch_to_channel_major(g, geom.batch, geom.out_c, geom.plane());
                if self.wants(*bias) {
                    send(*bias, g_cm.chunks_exact(ncols).map(|r| r.iter().sum()).collect());
                }
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; geom.out_c * geom.patch()];
                    kernels::gemm(
                        Mat::new(&g_cm, geom.out_c, ncols),
                        Mat::t(cols, geom.patch(), ncols),
                        &mut dk,
                        false,
                    );
                    send(*kernel, dk);
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; geom.patch() * ncols];
                    kernels::gemm(
                        Mat::t(val(*kernel), geom.out_c, geom.patch()),
                        Mat::new(&g_cm, geom.out_c, ncols),
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![0.0; geom.batch * geom.in_c * geom.plane()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    send(*input, dx);
                }
            }
            Op::Relu(x) => {
                let dx = val(*x).iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect();
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = node.value.data().iter().zip(g).map(|(&y, &gi)| gi * y * (1.0 - y)).collect();
                send(*x, dx);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(gi, bi)| gi * bi).collect());
                }
                if self.wants(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(gi, ai)| gi * ai).collect());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Scale(x, factor) => send(*x, g.iter().map(|v| v * factor).collect()),
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (&src, gi) in argmax.iter().zip(g) {
                    dx[src] += gi;
                }
                send(*input, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let plane = s[2] * s[3];
                let dx = g
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi / plane as f64, plane))
                    .collect();
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.value(*v).shape()[*axis] * inner;
                    if self.wants(*v) {
                        let mut dx = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dx.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        send(*v, dx);
                    }
                    offset += chunk;
                }
            }
            Op::L2Normalize { input, eps, norms } => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.len());
                for ((yr, gr), &norm) in y.chunks_exact(width).zip(g.chunks_exact(width)).zip(norms) {
                    if norm > *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        dx.extend(yr.iter().zip(gr).map(|(yi, gi)| (gi - yi * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|gi| gi / eps));
                    }
                }
                send(*input, dx);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Contrastive { input, pairs, margin } => {
                let t = self.value(*input);
                let width = t.shape()[1];
                let rows = t.data();
                let mut dx = vec![0.0; rows.len()];
                let scale = 2.0 * g[0] / pairs.len() as f64;
                for &(i, j, same) in pairs {
                    let (a, b) = (&rows[i * width..(i + 1) * width], &rows[j * width..(j + 1) * width]);
                    let d2 = sq_dist(a, b);
                    let coef = if same {
                        scale
                    } else if d2 < *margin {
                        -scale
                    } else {
                        continue;
                    };
                    for k in 0..width {
                        let diff = coef * (a[k] - b[k]);
                        dx[i * width + k] += diff;
                        dx[j * width + k] -= diff;
                    }
                }
                send(*input, dx);
            }
            Op::Divergence { inputs, margin } => {
                let width = self.value(inputs[0]).shape()[1];
                let rows = self.value(inputs[0]).shape()[0];
                let mut dxs: Vec<Vec<f64>> = inputs.iter().map(|_| vec![0.0; rows * width]).collect();
                for i in 0..rows {
                    let r = i * width..(i + 1) * width;
                    for p in 0..inputs.len() {
                        for q in p + 1..inputs.len() {
                            let (a, b) = (&val(inputs[p])[r.clone()], &val(inputs[q])[r.clone()]);
                            if sq_dist(a, b) >= *margin {
                                continue;
                            }
                            for k in 0..width {
                                let diff = 2.0 * g[0] * (a[k] - b[k]);
                                dxs[p][i * width + k] -= diff;
                                dxs[q][i * width + k] += diff;
                            }
                        }
                    }
                }
                for (v, dx) in inputs.iter().zip(dxs) {
                    send(*v, dx);
                }
            }
        }
    }
}
