use std::collections::HashMap;

use super::params::{ParamGrads, ParamId, Params};
use super::tensor::Tensor;
use super::Precision;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    MeanPool2x2(Var),
    Sum(Var),
    Dot(Var, Var),
    AddN(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in execution order, so the arena is
/// already topologically sorted; `backward` walks it once in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            consumed: false,
            bound: HashMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    fn push(&mut self, name: &'static str, op: Op, mut value: Tensor) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage(
                "tape already consumed by backward; start a new graph".into(),
            ));
        }
        self.precision.round(value.data_mut());
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Concat(vs) | Op::AddN(vs) => vs.iter().any(|v| self.nodes[v.0].requires_grad),
            other => inputs_of(other).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let v = self.push("leaf", Op::Leaf, value)?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Free variable whose gradient is reported by `backward`.
    pub fn variable(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Binds a parameter as a gradient-tracked leaf. Binding the same
    /// parameter twice on one graph returns the same handle.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.leaf(params.value(id).clone(), true)?;
        self.bound.insert(id, v);
        Ok(v)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", Op::MatMul(a, b), value)
    }

    /// Matrix `[m x k]` times vector `[k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, k) = self.dims2("matvec", w)?;
        let xs = self.value(x).shape();
        if xs != [k] {
            return Err(Error::dim("matvec", format!("[{m}x{k}] x {xs:?}")));
        }
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let out: Vec<f64> = wd
            .chunks_exact(k)
            .map(|row| row.iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        self.push("matvec", Op::MatVec(w, x), Tensor::vector(out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("transpose", Op::Transpose(a), value)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", Op::Reshape(a), value)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        self.push("add", Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.map(a, |x| x * factor);
        self.push("scale", Op::Scale(a, factor), value)
    }

    /// Elementwise product with a constant of the same length (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::dim(
                "mul_const",
                format!("mask of {} for tensor of {}", mask.len(), self.value(a).len()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push("mul_const", Op::MulConst(a, mask), value)
    }

    /// Adds `row` (`[c]`) to every row of `m` (`[r x c]`).
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row", m)?;
        if self.value(row).shape() != [c] {
            return Err(Error::dim(
                "add_row",
                format!("[{r}x{c}] + {:?}", self.value(row).shape()),
            ));
        }
        let rd = self.value(row).data();
        let data = self
            .value(m)
            .data()
            .chunks_exact(c)
            .flat_map(|chunk| chunk.iter().zip(rd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(vec![r, c], data)?;
        self.push("add_row", Op::AddRow(m, row), value)
    }

    /// Adds a single-element tensor to every element of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::dim(
                "add_scalar",
                format!("expected a scalar, got {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let value = self.map(a, |x| x + sv);
        self.push("add_scalar", Op::AddScalar(a, s), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, sigmoid);
        self.push("sigmoid", Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, f64::tanh);
        self.push("tanh", Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.map(a, |x| x.max(0.0));
        self.push("relu", Op::Relu(a), value)
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).rank() != 1 {
                return Err(Error::dim(
                    "concat",
                    format!("expected vectors, got {:?}", self.value(p).shape()),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        self.push("concat", Op::Concat(parts.to_vec()), Tensor::vector(data))
    }

    /// Sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(a).len();
        if self.value(a).rank() != 1 || len == 0 || start + len > n {
            return Err(Error::dim(
                "slice",
                format!("[{start}..{}] of {:?}", start + len, self.value(a).shape()),
            ));
        }
        let data = self.value(a).data()[start..start + len].to_vec();
        self.push("slice", Op::Slice(a, start), Tensor::vector(data))
    }

    /// 2x2 average pooling over the two leading axes of a `[rows x cols x ch]` grid.
    pub fn mean_pool_2x2(&mut self, a: Var) -> Result<Var> {
        let (r, c, ch) = match self.value(a).shape() {
            [r, c, ch] if r % 2 == 0 && c % 2 == 0 => (*r, *c, *ch),
            s => {
                return Err(Error::dim(
                    "mean_pool_2x2",
                    format!("need [even x even x ch], got {s:?}"),
                ))
            }
        };
        let ad = self.value(a).data();
        let (ro, co) = (r / 2, c / 2);
        let mut out = vec![0.0; ro * co * ch];
        for i in 0..ro {
            for j in 0..co {
                let dst = &mut out[(i * co + j) * ch..(i * co + j + 1) * ch];
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = ((2 * i + di) * c + 2 * j + dj) * ch;
                    for (o, x) in dst.iter_mut().zip(&ad[src..src + ch]) {
                        *o += 0.25 * x;
                    }
                }
            }
        }
        let value = Tensor::new(vec![ro, co, ch], out)?;
        self.push("mean_pool_2x2", Op::MeanPool2x2(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push("dot", Op::Dot(a, b), Tensor::scalar(s))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("add_n", "no inputs"))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape("add_n", first, p)?;
            for (o, x) in acc.data_mut().iter_mut().zip(self.value(p).data()) {
                *o += x;
            }
        }
        self.push("add_n", Op::AddN(parts.to_vec()), acc)
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        if self.value(logits).rank() != 1 {
            return Err(Error::dim(
                "softmax",
                format!("expected a vector, got {:?}", self.value(logits).shape()),
            ));
        }
        let probs = softmax(self.value(logits).data());
        self.push("softmax", Op::Softmax(logits), Tensor::vector(probs))
    }

    /// `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits);
        if v.rank() != 1 {
            return Err(Error::dim(
                "cross_entropy",
                format!("expected a vector, got {:?}", v.shape()),
            ));
        }
        if target >= v.len() {
            return Err(Error::Index {
                index: target,
                len: v.len(),
            });
        }
        let data = v.data();
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = data.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        let loss = log_z - data[target];
        let probs = softmax(data);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", prediction, target)?;
        let n = self.value(prediction).len() as f64;
        let s: f64 = self
            .value(prediction)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push("mse", Op::Mse(prediction, target), Tensor::scalar(s / n))
    }

    /// Runs the reverse pass from a single-element `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = dims(&nodes[a.0].value);
                    let n = nodes[b.0].value.shape()[1];
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                da[i * k + p] +=
                                    gi.iter().zip(&bd[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ad[i * k + p];
                                for (d, x) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *d += aip * x;
                                }
                            }
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    let (_, k) = dims(&nodes[w.0].value);
                    let wd = nodes[w.0].value.data();
                    let xd = nodes[x.0].value.data();
                    if let Some(dw) = slot(&mut grads, nodes, *w) {
                        for (row, &gi) in dw.chunks_exact_mut(k).zip(&g) {
                            if gi == 0.0 {
                                continue;
                            }
                            for (d, xv) in row.iter_mut().zip(xd) {
                                *d += gi * xv;
                            }
                        }
                    }
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (row, &gi) in wd.chunks_exact(k).zip(&g) {
                            if gi == 0.0 {
                                continue;
                            }
                            for (d, wv) in dx.iter_mut().zip(row) {
                                *d += gi * wv;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = dims(&nodes[a.0].value);
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, nodes, *a, &g, 1.0),
                Op::Add(a, b) => {
                    accumulate(&mut grads, nodes, *a, &g, 1.0);
                    accumulate(&mut grads, nodes, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, nodes, *a, &g, 1.0);
                    accumulate(&mut grads, nodes, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, gv), bv) in da.iter_mut().zip(&g).zip(bd) {
                            *d += gv * bv;
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for ((d, gv), av) in db.iter_mut().zip(&g).zip(ad) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads, nodes, *a, &g, *c),
                Op::MulConst(a, mask) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, gv), m) in da.iter_mut().zip(&g).zip(mask) {
                            *d += gv * m;
                        }
                    }
                }
                Op::AddRow(m, row) => {
                    accumulate(&mut grads, nodes, *m, &g, 1.0);
                    let c = nodes[row.0].value.len();
                    if let Some(dr) = slot(&mut grads, nodes, *row) {
                        for chunk in g.chunks_exact(c) {
                            for (d, gv) in dr.iter_mut().zip(chunk) {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::AddScalar(a, s) => {
                    accumulate(&mut grads, nodes, *a, &g, 1.0);
                    if let Some(ds) = slot(&mut grads, nodes, *s) {
                        ds[0] += g.iter().sum::<f64>();
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, gv), y) in da.iter_mut().zip(&g).zip(out) {
                            *d += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, gv), y) in da.iter_mut().zip(&g).zip(out) {
                            *d += gv * (1.0 - y * y);
                        }
                    }
                }
                Op::Relu(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, gv), y) in da.iter_mut().zip(&g).zip(out) {
                            if *y > 0.0 {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        accumulate(&mut grads, nodes, p, &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::Slice(a, start) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for (d, gv) in da[*start..*start + g.len()].iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                }
                Op::MeanPool2x2(a) => {
                    let shape = nodes[a.0].value.shape();
                    let (c, ch) = (shape[1], shape[2]);
                    let (ro, co) = (shape[0] / 2, c / 2);
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for i in 0..ro {
                            for j in 0..co {
                                let src = &g[(i * co + j) * ch..(i * co + j + 1) * ch];
                                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let dst = ((2 * i + di) * c + 2 * j + dj) * ch;
                                    for (d, gv) in da[dst..dst + ch].iter_mut().zip(src) {
                                        *d += 0.25 * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for d in da.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let ad = nodes[a.0].value.data();
                    let bd = nodes[b.0].value.data();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for (d, bv) in da.iter_mut().zip(bd) {
                            *d += g[0] * bv;
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for (d, av) in db.iter_mut().zip(ad) {
                            *d += g[0] * av;
                        }
                    }
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, nodes, p, &g, 1.0);
                    }
                }
                Op::Softmax(a) => {
                    let gy: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, gv), y) in da.iter_mut().zip(&g).zip(out) {
                            *d += y * (gv - gy);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    if let Some(dl) = slot(&mut grads, nodes, *logits) {
                        for (i, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                            let indicator = if i == *target { 1.0 } else { 0.0 };
                            *d += g[0] * (p - indicator);
                        }
                    }
                }
                Op::Mse(p, t) => {
                    let pd = nodes[p.0].value.data();
                    let td = nodes[t.0].value.data();
                    let scale = 2.0 * g[0] / pd.len() as f64;
                    if let Some(dp) = slot(&mut grads, nodes, *p) {
                        for ((d, a), b) in dp.iter_mut().zip(pd).zip(td) {
                            *d += scale * (a - b);
                        }
                    }
                    if let Some(dt) = slot(&mut grads, nodes, *t) {
                        for ((d, a), b) in dt.iter_mut().zip(pd).zip(td) {
                            *d -= scale * (a - b);
                        }
                    }
                }
            }
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }
}

/// Leaf gradients produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf as a flat vector, zeros when untouched.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }

    /// Gradients of every parameter bound on the graph. Bound parameters the
    /// loss never touched receive zeros.
    pub fn into_param_grads(mut self, params: &Params) -> ParamGrads {
        let mut out = ParamGrads::empty(params.len());
        for (id, v) in std::mem::take(&mut self.params) {
            let g = self.grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; params.value(id).len()]);
            out.set(id, g);
        }
        out
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Transpose(a)
        | Op::Reshape(a)
        | Op::Scale(a, _)
        | Op::MulConst(a, _)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Slice(a, _)
        | Op::MeanPool2x2(a)
        | Op::Sum(a)
        | Op::Softmax(a) => vec![*a],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::MatMul(a, b)
        | Op::MatVec(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::AddScalar(a, b)
        | Op::Dot(a, b)
        | Op::Mse(a, b) => vec![*a, *b],
        Op::Concat(vs) | Op::AddN(vs) => vs.clone(),
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: &[f64], factor: f64) {
    if let Some(d) = slot(grads, nodes, v) {
        for (x, gv) in d.iter_mut().zip(g) {
            *x += factor * gv;
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax on a plain slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for o in &mut out {
        *o /= z;
    }
    out
}
