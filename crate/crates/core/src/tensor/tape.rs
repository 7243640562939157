use super::{Tensor, TensorError};

type Res<T> = Result<T, TensorError>;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Square(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Floor { x: usize, floor: f64 },
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    TransposeLast2(usize),
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Softmax(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run gradient graph. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Res<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Ok(long.to_vec())
    } else {
        Err(TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

/// Split `shape` around `axis` into (outer, axis extent, inner).
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

// out[r, j] += sum_p a[r, p] * b[p, j]
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for r in 0..rows {
        let orow = &mut out[r * cols..(r + 1) * cols];
        for p in 0..inner {
            let av = a[r * inner + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * cols..(p + 1) * cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[r, p] += sum_j g[r, j] * b[p, j]
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for r in 0..rows {
        let grow = &g[r * cols..(r + 1) * cols];
        for p in 0..inner {
            let brow = &b[p * cols..(p + 1) * cols];
            out[r * inner + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[p, j] += sum_r a[r, p] * g[r, j]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], rows: usize, inner: usize, cols: usize) {
    for r in 0..rows {
        let grow = &g[r * cols..(r + 1) * cols];
        for p in 0..inner {
            let av = a[r * inner + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * cols..(p + 1) * cols];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; `None` for nodes that do not require gradients
    /// or were not reached by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v).to_vec();
        self.grad(v).map(|g| Tensor { shape, data: g.to_vec() })
    }

    /// Identity in value; the result is a fresh leaf, so nothing upstream
    /// receives gradient through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Takes its value from `value_from` while routing the incoming gradient
    /// unchanged to `x`; `x + stop_gradient(value_from - x)` without the
    /// rounding of the add/subtract pair.
    pub fn straight_through(&mut self, x: Var, value_from: Var) -> Res<Var> {
        if self.shape(x) != self.shape(value_from) {
            return Err(TensorError::Shape { op: "straight_through", lhs: self.shape(x).to_vec(), rhs: self.shape(value_from).to_vec() });
        }
        let value = self.value(value_from).clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Offset(x.0), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Res<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = binary_shape(op, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (ta.numel(), tb.numel());
        let data = (0..n).map(|i| f(ta.data[i % na], tb.data[i % nb])).collect();
        Ok((Tensor { shape, data }, self.rg(&[a.0, b.0])))
    }

    /// Elementwise sum; either operand may be broadcast over the other's
    /// leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Res<Var> {
        let (t, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a.0, b.0), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let tx = self.value(x);
        let value = Tensor { shape: tx.shape.clone(), data: tx.data.iter().map(|&v| f(v)).collect() };
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x.0), |v| -v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x.0), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x.0), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x.0), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x.0), f64::tanh)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// `max(floor, x)`; gradient flows only where `x > floor`.
    pub fn floor_at(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::Floor { x: x.0, floor }, |v| v.max(floor))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] @ b[k, m] -> [..., m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let k = *ta.shape.last().unwrap();
        if tb.shape.len() != 2 || tb.shape[0] != k {
            return Err(TensorError::Shape { op: "matmul", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let m = tb.shape[1];
        let rows = ta.numel() / k;
        let mut data = vec![0.0; rows * m];
        gemm(&ta.data, &tb.data, &mut data, rows, k, m);
        let mut shape = ta.shape[..ta.shape.len() - 1].to_vec();
        shape.push(m);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a.0, b.0), rg))
    }

    /// Batched `a[..., n, k] @ b[..., k, m]` with identical leading axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Res<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, rb) = (ta.shape.len(), tb.shape.len());
        if ra < 2 || ra != rb || ta.shape[..ra - 2] != tb.shape[..rb - 2] || ta.shape[ra - 1] != tb.shape[rb - 2] {
            return Err(TensorError::Shape { op: "bmm", lhs: ta.shape.clone(), rhs: tb.shape.clone() });
        }
        let (n, k, m) = (ta.shape[ra - 2], ta.shape[ra - 1], tb.shape[rb - 1]);
        let batch: usize = ta.shape[..ra - 2].iter().product();
        let mut data = vec![0.0; batch * n * m];
        for bi in 0..batch {
            gemm(
                &ta.data[bi * n * k..(bi + 1) * n * k],
                &tb.data[bi * k * m..(bi + 1) * k * m],
                &mut data[bi * n * m..(bi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let mut shape = ta.shape[..ra - 2].to_vec();
        shape.extend([n, m]);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, Op::BatchMatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Res<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Argument { op: "transpose", shape: self.shape(x).to_vec(), reason: "rank must be at least 2".into() });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let (shape, data) = permute_data(&self.value(x).data, self.shape(x), &axes);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape, data }, Op::TransposeLast2(x.0), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Res<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len() && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::Argument { op: "permute", shape, reason: format!("bad axes {axes:?}") });
        }
        let (out_shape, data) = permute_data(&self.value(x).data, &shape, axes);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute { x: x.0, axes: axes.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Res<Var> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Reshape(x.0), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Res<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Argument { op: "concat", shape: first, reason: format!("axis {axis}") });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(TensorError::Shape { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let w = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor { shape, data }, Op::Concat { inputs: ids, axis }, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Res<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::Argument { op: "narrow", shape, reason: format!("axis {axis}, range {start}..{}", start + len) });
        }
        let (outer, ext, inner) = around(&shape, axis);
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Narrow { x: x.0, axis, start }, rg))
    }

    // ---- normalisation and reductions -------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let w = *t.shape.last().unwrap();
        let mut data = t.data.clone();
        for row in data.chunks_mut(w) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::Softmax(x.0), rg)
    }

    /// Layer normalisation over the last axis without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let w = *t.shape.last().unwrap();
        let mut data = t.data.clone();
        let mut inv_std = Vec::with_capacity(data.len() / w);
        for row in data.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor { shape: t.shape.clone(), data };
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::LayerNorm { x: x.0, inv_std }, rg)
    }

    /// Gather rows of `table[V, E]`; result has shape `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Res<Var> {
        let t = self.value(table);
        if t.shape.len() != 2 || ids.is_empty() {
            return Err(TensorError::Argument { op: "embedding", shape: t.shape.clone(), reason: "need [V, E] table and ids".into() });
        }
        let (v, e) = (t.shape[0], t.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Argument { op: "embedding", shape: t.shape.clone(), reason: format!("id {bad} out of range") });
        }
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&t.data[i * e..(i + 1) * e]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(Tensor { shape: vec![ids.len(), e], data }, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.numel() as f64;
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Res<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Argument { op: "sum_axis", shape, reason: format!("axis {axis}") });
        }
        let (outer, ext, inner) = around(&shape, axis);
        let src = &self.value(x).data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(Tensor { shape: out_shape, data }, Op::SumAxis { x: x.0, axis }, rg))
    }

    /// Mean token-level cross-entropy of `logits[..., V]` against `targets`
    /// (one per row). `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Res<Var> {
        let t = self.value(logits);
        let v = *t.shape.last().unwrap();
        let rows = t.numel() / v;
        if rows != targets.len() {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: t.shape.clone(), rhs: vec![targets.len()] });
        }
        let mut total = 0.0;
        let mut count = 0;
        for (row, target) in t.data.chunks(v).zip(targets) {
            let Some(k) = *target else { continue };
            if k >= v {
                return Err(TensorError::Argument {
                    op: "cross_entropy",
                    shape: t.shape.clone(),
                    reason: format!("target {k} out of range"),
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[k];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::Argument { op: "cross_entropy", shape: t.shape.clone(), reason: "no targets".into() });
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(Tensor::scalar(total / count as f64), Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), count }, rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a single-element root. Gradients accumulate into
    /// every reachable node that requires them.
    pub fn backward(&mut self, root: Var) -> Res<()> {
        let shape = self.shape(root);
        if self.value(root).numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.grads[i] = Some(g);
            for (j, gj) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut self.grads[j] {
                    Some(acc) => acc.iter_mut().zip(&gj).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gj),
                }
            }
        }
        Ok(())
    }

    fn broadcast_grad(&self, input: usize, g: impl Iterator<Item = f64>) -> Vec<f64> {
        let n = self.nodes[input].value.numel();
        let mut out = vec![0.0; n];
        for (i, v) in g.enumerate() {
            out[i % n] += v;
        }
        out
    }

    fn val(&self, i: usize) -> &[f64] {
        &self.nodes[i].value.data
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let out = &self.nodes[i].value;
        let need = |j: usize| self.nodes[j].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            &Op::Add(a, b) => vec![(a, self.broadcast_grad(a, g.iter().copied())), (b, self.broadcast_grad(b, g.iter().copied()))],
            &Op::Sub(a, b) => vec![(a, self.broadcast_grad(a, g.iter().copied())), (b, self.broadcast_grad(b, g.iter().map(|v| -v)))],
            &Op::Mul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (na, nb) = (va.len(), vb.len());
                let mut res = Vec::new();
                if need(a) {
                    res.push((a, self.broadcast_grad(a, g.iter().enumerate().map(|(k, gv)| gv * vb[k % nb]))));
                }
                if need(b) {
                    res.push((b, self.broadcast_grad(b, g.iter().enumerate().map(|(k, gv)| gv * va[k % na]))));
                }
                res
            }
            &Op::Div(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (na, nb) = (va.len(), vb.len());
                let mut res = Vec::new();
                if need(a) {
                    res.push((a, self.broadcast_grad(a, g.iter().enumerate().map(|(k, gv)| gv / vb[k % nb]))));
                }
                if need(b) {
                    res.push((b, self.broadcast_grad(b, g.iter().enumerate().map(|(k, gv)| -gv * va[k % na] / (vb[k % nb] * vb[k % nb])))));
                }
                res
            }
            &Op::Neg(x) => vec![(x, g.iter().map(|v| -v).collect())],
            &Op::Scale(x, c) => vec![(x, g.iter().map(|v| v * c).collect())],
            &Op::Offset(x) | &Op::Reshape(x) => vec![(x, g.to_vec())],
            &Op::Exp(x) => vec![(x, g.iter().zip(&out.data).map(|(gv, y)| gv * y).collect())],
            &Op::Log(x) => vec![(x, g.iter().zip(self.val(x)).map(|(gv, xv)| gv / xv).collect())],
            &Op::Tanh(x) => vec![(x, g.iter().zip(&out.data).map(|(gv, y)| gv * (1.0 - y * y)).collect())],
            &Op::Square(x) => vec![(x, g.iter().zip(self.val(x)).map(|(gv, xv)| 2.0 * gv * xv).collect())],
            &Op::Clamp { x, lo, hi } => {
                vec![(x, g.iter().zip(self.val(x)).map(|(gv, &xv)| if xv >= lo && xv <= hi { *gv } else { 0.0 }).collect())]
            }
            &Op::Floor { x, floor } => {
                vec![(x, g.iter().zip(self.val(x)).map(|(gv, &xv)| if xv > floor { *gv } else { 0.0 }).collect())]
            }
            &Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (k, m) = (tb.shape[0], tb.shape[1]);
                let rows = ta.numel() / k;
                let mut res = Vec::new();
                if need(a) {
                    let mut da = vec![0.0; ta.numel()];
                    gemm_nt(g, &tb.data, &mut da, rows, k, m);
                    res.push((a, da));
                }
                if need(b) {
                    let mut db = vec![0.0; tb.numel()];
                    gemm_tn(&ta.data, g, &mut db, rows, k, m);
                    res.push((b, db));
                }
                res
            }
            &Op::BatchMatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let r = ta.shape.len();
                let (n, k, m) = (ta.shape[r - 2], ta.shape[r - 1], tb.shape[r - 1]);
                let batch = ta.numel() / (n * k);
                let mut da = vec![0.0; ta.numel()];
                let mut db = vec![0.0; tb.numel()];
                for bi in 0..batch {
                    let gs = &g[bi * n * m..(bi + 1) * n * m];
                    if need(a) {
                        gemm_nt(gs, &tb.data[bi * k * m..(bi + 1) * k * m], &mut da[bi * n * k..(bi + 1) * n * k], n, k, m);
                    }
                    if need(b) {
                        gemm_tn(&ta.data[bi * n * k..(bi + 1) * n * k], gs, &mut db[bi * k * m..(bi + 1) * k * m], n, k, m);
                    }
                }
                vec![(a, da), (b, db)]
            }
            &Op::TransposeLast2(x) => {
                let r = out.shape.len();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 2, r - 1);
                vec![(x, permute_data(g, &out.shape, &axes).1)]
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                vec![(*x, permute_data(g, &out.shape, &inverse).1)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = around(&out.shape, *axis);
                let mut res = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &j in inputs {
                    let ext = self.nodes[j].value.shape[*axis];
                    let mut gj = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gj.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    res.push((j, gj));
                }
                res
            }
            &Op::Narrow { x, axis, start } => {
                let in_shape = &self.nodes[x].value.shape;
                let (outer, ext, inner) = around(in_shape, axis);
                let len = out.shape[axis];
                let mut gx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(x, gx)]
            }
            &Op::Softmax(x) => {
                let w = *out.shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(w).zip(out.data.chunks(w)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                vec![(x, gx)]
            }
            Op::LayerNorm { x, inv_std } => {
                let w = *out.shape.last().unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), is) in g.chunks(w).zip(out.data.chunks(w)).zip(inv_std) {
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    gx.extend(gr.iter().zip(yr).map(|(gv, y)| is * (gv - mg - y * mgy)));
                }
                vec![(*x, gx)]
            }
            Op::Embedding { table, ids } => {
                let e = out.shape[1];
                let mut gt = vec![0.0; self.nodes[*table].value.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..e {
                        gt[id * e + c] += g[r * e + c];
                    }
                }
                vec![(*table, gt)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; self.nodes[x].value.numel()])],
            &Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                vec![(x, vec![g[0] / n as f64; n])]
            }
            &Op::SumAxis { x, axis } => {
                let (outer, ext, inner) = around(&self.nodes[x].value.shape, axis);
                let mut gx = Vec::with_capacity(outer * ext * inner);
                for o in 0..outer {
                    for _ in 0..ext {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(x, gx)]
            }
            Op::CrossEntropy { logits, targets, count } => {
                let t = &self.nodes[*logits].value;
                let v = *t.shape.last().unwrap();
                let scale = g[0] / *count as f64;
                let mut gl = vec![0.0; t.numel()];
                for (r, (row, target)) in t.data.chunks(v).zip(targets).enumerate() {
                    let Some(k) = *target else { continue };
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for c in 0..v {
                        let p = (row[c] - max).exp() / z;
                        gl[r * v + c] = scale * (p - if c == k { 1.0 } else { 0.0 });
                    }
                }
                vec![(*logits, gl)]
            }
        }
    }
}
