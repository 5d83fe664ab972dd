use super::{log_sum_exp, matmul_kernel, softmax_slice, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    /// Softmax over `axis`; also covers the top-k variant, whose dropped
    /// entries are exact zeros and therefore receive no gradient.
    Softmax { x: Var, axis: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDiv { logits: Var, target: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Dynamic record of executed operations, in execution order.
///
/// Nodes are appended as operations run, so every node's inputs precede it
/// and a reverse sweep is a valid topological order for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Non-trainable input leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, mut value: Tensor, trainable: bool) -> Var {
        value.set_grad(None);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            requires_grad: trainable,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of `v` after [`Graph::backward`], shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).unwrap())
    }

    pub fn grad_values(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies the value of `v` into a fresh constant leaf, severing gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2();
        let (k2, n) = vb.dims2();
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let out = matmul_kernel(va.values(), vb.values(), m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let out: Vec<f64> = va.values().iter().zip(vb.values()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape(), out).unwrap();
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// `x[r×c] + row[1×c]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let (r, c) = vx.dims2();
        if vr.dims2() != (1, c) {
            return Err(Error::shape("add_row", vx.shape(), vr.shape()));
        }
        let mut out = vx.values().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(vr.values()) {
                *o += b;
            }
        }
        let t = Tensor::new(vx.shape(), out).unwrap();
        Ok(self.push(t, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.values().iter().map(|v| v * s).collect()).unwrap();
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.values().iter().map(|v| v.tanh()).collect()).unwrap();
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let layout = SliceLayout::new(vx.shape(), axis)?;
        let mut out = vec![0.0; vx.len()];
        let mut buf = vec![0.0; layout.len];
        let mut res = vec![0.0; layout.len];
        for s in 0..layout.count {
            layout.gather(vx.values(), s, &mut buf);
            softmax_slice(&buf, &mut res);
            layout.scatter(&res, s, &mut out);
        }
        let t = Tensor::new(vx.shape(), out).unwrap();
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Row-wise softmax over the `k` largest entries of each row; the other
    /// entries are exactly zero. Ties keep the lower column index.
    pub fn topk_softmax_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        if k == 0 || k > c {
            return Err(Error::invalid(format!("top-k of {k} over {c} entries")));
        }
        let mut out = vec![0.0; r * c];
        let mut order: Vec<usize> = Vec::with_capacity(c);
        let mut kept = vec![0.0; k];
        let mut res = vec![0.0; k];
        for i in 0..r {
            let row = vx.row_slice(i);
            order.clear();
            order.extend(0..c);
            if k < c {
                // stable: equal scores keep ascending index order
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
                order.truncate(k);
                order.sort_unstable();
            }
            for (dst, &j) in kept.iter_mut().zip(&order) {
                *dst = row[j];
            }
            softmax_slice(&kept, &mut res);
            for (&j, &w) in order.iter().zip(&res) {
                out[i * c + j] = w;
            }
        }
        let t = Tensor::new(vx.shape(), out).unwrap();
        let axis = vx.shape().len() - 1;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let c = self.value(*first).cols();
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), v.shape()));
            }
            rows += v.rows();
            values.extend_from_slice(v.values());
        }
        let t = Tensor::new(&[rows, c], values).unwrap();
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let r = self.value(*first).rows();
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), v.shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut values = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                values.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let t = Tensor::new(&[r, total], values).unwrap();
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        if len == 0 || start + len > r {
            return Err(Error::invalid(format!(
                "slice_rows: rows {start}..{} out of {r}",
                start + len
            )));
        }
        let values = vx.values()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(&[len, c], values).unwrap();
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = vx.dims2();
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows: no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("gather_rows: index {bad} out of {r} rows")));
        }
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            values.extend_from_slice(vx.row_slice(i));
        }
        let t = Tensor::new(&[indices.len(), c], values).unwrap();
        Ok(self.push(t, Op::GatherRows { x, indices: indices.to_vec() }, &[x]))
    }

    /// Mean over rows, giving a `1 × cols` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x).mean_rows();
        self.push(t, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits[B×C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vz = self.value(logits);
        let (b, c) = vz.dims2();
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", vz.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = vz.row_slice(i);
            softmax_slice(row, &mut probs[i * c..(i + 1) * c]);
            loss += log_sum_exp(row) - row[y];
        }
        loss /= b as f64;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean over rows of `KL(target_row || softmax(logits_row))`. The target is
    /// a constant (no gradient reaches whatever produced it).
    pub fn kl_div(&mut self, target: &Tensor, logits: Var) -> Result<Var> {
        let vz = self.value(logits);
        let (b, c) = vz.dims2();
        if target.dims2() != (b, c) {
            return Err(Error::shape("kl_div", target.shape(), vz.shape()));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = vz.row_slice(i);
            softmax_slice(row, &mut probs[i * c..(i + 1) * c]);
            let lse = log_sum_exp(row);
            for (p, z) in target.row_slice(i).iter().zip(row) {
                if *p > 0.0 {
                    loss += p * (p.ln() - (z - lse));
                }
            }
        }
        loss /= b as f64;
        let op = Op::KlDiv {
            logits,
            target: target.values().to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Clears every gradient buffer.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every trainable leaf
    /// holds `dloss/dleaf`; leaves the loss does not reach hold zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.zero_grads();
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
        for n in &mut self.nodes {
            if n.trainable && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, grad: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).cols();
                if self.wants(a) {
                    // dA = dC · Bᵀ
                    let bt = self.value(b).transpose();
                    let da = matmul_kernel(grad, bt.values(), m, n, k);
                    self.accumulate(a, &da);
                }
                if self.wants(b) {
                    // dB = Aᵀ · dC
                    let at = self.value(a).transpose();
                    let db = matmul_kernel(at.values(), grad, k, m, n);
                    self.accumulate(b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[i].value.dims2();
                let g = Tensor::new(&[r, c], grad.to_vec()).unwrap().transpose();
                self.accumulate(a, g.values());
            }
            Op::Add(a, b) => {
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::AddRow(x, row) => {
                self.accumulate(x, grad);
                if self.wants(row) {
                    let c = self.value(row).cols();
                    let mut g = vec![0.0; c];
                    for chunk in grad.chunks(c) {
                        g.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(row, &g);
                }
            }
            Op::Scale(a, s) => {
                let g: Vec<f64> = grad.iter().map(|v| v * s).collect();
                self.accumulate(a, &g);
            }
            Op::Tanh(a) => {
                let y = self.nodes[i].value.values();
                let g: Vec<f64> = grad.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                self.accumulate(a, &g);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let layout = SliceLayout::new(y.shape(), axis).unwrap();
                let mut out = vec![0.0; y.len()];
                let mut ys = vec![0.0; layout.len];
                let mut gs = vec![0.0; layout.len];
                let mut res = vec![0.0; layout.len];
                for s in 0..layout.count {
                    layout.gather(y.values(), s, &mut ys);
                    layout.gather(grad, s, &mut gs);
                    let dot: f64 = ys.iter().zip(&gs).map(|(a, b)| a * b).sum();
                    for ((r, y), g) in res.iter_mut().zip(&ys).zip(&gs) {
                        *r = y * (g - dot);
                    }
                    layout.scatter(&res, s, &mut out);
                }
                self.accumulate(x, &out);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).len();
                    let g = grad[offset..offset + n].to_vec();
                    self.accumulate(p, &g);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let r = self.nodes[i].value.rows();
                let mut col = 0;
                for p in parts {
                    let c = self.value(p).cols();
                    let mut g = Vec::with_capacity(r * c);
                    for row in 0..r {
                        g.extend_from_slice(&grad[row * total + col..row * total + col + c]);
                    }
                    self.accumulate(p, &g);
                    col += c;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(x);
                let c = vx.cols();
                let mut g = vec![0.0; vx.len()];
                g[start * c..start * c + grad.len()].copy_from_slice(grad);
                self.accumulate(x, &g);
            }
            Op::GatherRows { x, indices } => {
                let vx = self.value(x);
                let c = vx.cols();
                let mut g = vec![0.0; vx.len()];
                for (k, &row) in indices.iter().enumerate() {
                    for j in 0..c {
                        g[row * c + j] += grad[k * c + j];
                    }
                }
                self.accumulate(x, &g);
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(x).dims2();
                let inv = 1.0 / r as f64;
                let mut g = Vec::with_capacity(r * c);
                for _ in 0..r {
                    g.extend(grad.iter().map(|v| v * inv));
                }
                self.accumulate(x, &g);
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, &vec![grad[0]; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(logits).cols();
                let scale = grad[0] / labels.len() as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    g[row * c + y] -= scale;
                }
                self.accumulate(logits, &g);
            }
            Op::KlDiv { logits, target, probs } => {
                let (b, c) = self.value(logits).dims2();
                let scale = grad[0] / b as f64;
                let mut g = vec![0.0; b * c];
                for row in 0..b {
                    let t = &target[row * c..(row + 1) * c];
                    let mass: f64 = t.iter().sum();
                    for j in 0..c {
                        g[row * c + j] = scale * (probs[row * c + j] * mass - t[j]);
                    }
                }
                self.accumulate(logits, &g);
            }
        }
    }
}

/// Strided view of the 1-D slices of a tensor along one axis.
struct SliceLayout {
    count: usize,
    len: usize,
    outer_stride: usize,
    inner_stride: usize,
}

impl SliceLayout {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        match (shape, axis) {
            ([n], 0) => Ok(SliceLayout { count: 1, len: *n, outer_stride: 0, inner_stride: 1 }),
            ([r, c], 1) => Ok(SliceLayout { count: *r, len: *c, outer_stride: *c, inner_stride: 1 }),
            ([r, c], 0) => Ok(SliceLayout { count: *c, len: *r, outer_stride: 1, inner_stride: *c }),
            _ => Err(Error::invalid(format!("axis {axis} invalid for shape {shape:?}"))),
        }
    }

    fn gather(&self, src: &[f64], s: usize, dst: &mut [f64]) {
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[s * self.outer_stride + j * self.inner_stride];
        }
    }

    fn scatter(&self, src: &[f64], s: usize, dst: &mut [f64]) {
        for (j, v) in src.iter().enumerate() {
            dst[s * self.outer_stride + j * self.inner_stride] = *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap());
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).values(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(Tensor::row(&[1.0, 2.0]));
        let z = g.constant(Tensor::zeros(&[2, 1]));
        let p = g.matmul(a, z).unwrap();
        assert_eq!(g.value(p).values(), &[0.0]);

        let a = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[[5.0, 6.0], [7.0, 8.0]]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).values(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1], vec![5.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).values(), &[1.0]);

        let x = g.constant(Tensor::new(&[3], vec![2.5; 3]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).values(), &[1.0 / 3.0; 3], 1e-15));

        let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).values(), &[0.7311, 0.2689], 1e-4));
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        for c in 0..2 {
            let s: f64 = (0..3).map(|r| v.get(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1e4, -1e4, 0.0, 1e4]));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).values();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap());
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad_values(w).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_zero_scaled_loss_is_zero() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(&[0.3, -0.7, 1.1]));
        let t = g.tanh(w);
        let s = g.sum(t);
        let z = g.scale(s, 0.0);
        g.backward(z).unwrap();
        assert_eq!(g.grad_values(w).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn unreachable_leaves_get_zero_grad() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(&[1.0, 2.0]));
        let unused = g.param(Tensor::row(&[5.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad_values(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(&[1.0, 2.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = [0.2, -1.3, 0.9];
        let mut g = Graph::new();
        let z = g.param(Tensor::row(&logits));
        let l = g.cross_entropy(z, &[2]).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad_values(z).unwrap().to_vec();

        // central differences with step 1e-5
        let loss_at = |z: &[f64]| {
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - z[2]
        };
        let h = 1e-5;
        for j in 0..3 {
            let mut up = logits;
            let mut down = logits;
            up[j] += h;
            down[j] -= h;
            let fd = (loss_at(&up) - loss_at(&down)) / (2.0 * h);
            assert!((fd - analytic[j]).abs() < 1e-8, "coord {j}: {fd} vs {}", analytic[j]);
        }
        let mut p = [0.0; 3];
        softmax_slice(&logits, &mut p);
        p[2] -= 1.0;
        assert!(close(&analytic, &p, 1e-15));
    }

    #[test]
    fn topk_softmax_zeroes_dropped_entries() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.1, 3.0, 2.0, -1.0]]).unwrap());
        let y = g.topk_softmax_rows(x, 2).unwrap();
        let v = g.value(y).values();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[3], 0.0);
        assert!(close(&v[1..3], &[0.7311, 0.2689], 1e-4));
        assert!(g.topk_softmax_rows(x, 5).is_err());
    }

    #[test]
    fn topk_with_all_kept_equals_softmax() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[[0.1, 3.0, 2.0], [4.0, -2.0, 0.5]]).unwrap());
        let a = g.topk_softmax_rows(x, 3).unwrap();
        let b = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(a).values(), g.value(b).values());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::row(&[1.0, 2.0]));
        let d = g.detach(w);
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert_eq!(g.grad_values(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn gather_rows_scatters_gradient_to_selected_rows_only() {
        let mut g = Graph::new();
        let m = g.param(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap());
        let picked = g.gather_rows(m, &[2, 0, 2]).unwrap();
        let s = g.sum(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad_values(m).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
