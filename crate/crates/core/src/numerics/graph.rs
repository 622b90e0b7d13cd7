//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied
//! to its nodes. Values are computed eagerly; [`Graph::backward`] walks the
//! tape from a scalar node back to the parameters and returns their
//! gradients. Every node is a dense row-major matrix; vectors are single
//! rows.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Gradients, ParamId, ParamStore, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Row(Var, usize),
    StackRows(Vec<Var>),
    SoftmaxRows(Var),
    Sum(Var),
    MeanRows(Var),
    CrossEntropy(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    rows: usize,
    cols: usize,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Vec<T>>,
    /// Softmax probabilities for cross-entropy nodes.
    aux: Vec<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail: T = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..8 {
            acc[k] += ca[k] * cb[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.get(*id).data(),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn row_of(&self, v: Var, i: usize) -> &[T] {
        let cols = self.nodes[v.0].cols;
        &self.value(v)[i * cols..(i + 1) * cols]
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        debug_assert_eq!(self.shape(v), (1, 1));
        self.value(v)[0]
    }

    /// Softmax probabilities recorded by a cross-entropy node.
    pub fn probabilities(&self, v: Var) -> &[T] {
        &self.nodes[v.0].aux
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: Some(value),
            aux: Vec::new(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; it receives no gradient outside the graph.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(Error::shape(
                "constant",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, value.len()),
            ));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn row_vector(&mut self, value: Vec<T>) -> Var {
        let n = value.len();
        self.push(1, n, value, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![T::zero(); rows * cols], Op::Leaf)
    }

    /// The node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let (rows, cols) = self.params.get(id).dims();
        self.nodes.push(Node {
            rows,
            cols,
            value: None,
            aux: Vec::new(),
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        Ok(self.param(id))
    }

    /// Rows `ids` of a parameter table, stacked into a `ids.len()`×cols matrix.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let tensor = self.params.get(table);
        let (rows, cols) = tensor.dims();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&tensor.data()[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(ids.len(), cols, out, Op::Gather(table, ids.to_vec())))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{r}x{k} · {k2}x{n}")));
        }
        let mut out = vec![T::zero(); r * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..r {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(av[i * k + p], &bv[p * n..(p + 1) * n], orow);
                }
            }
        }
        Ok(self.push(r, n, out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{r}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![T::zero(); r * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..r {
                let arow = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
                }
            }
        }
        Ok(self.push(r, n, out, Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(r, c, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds the single row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(Error::shape("add_row", format!("{r}x{c} + {:?}", self.shape(bias))));
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(r, c, out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        self.push(r, c, out, Op::Scale(a, factor))
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scale_by", format!("{:?} is not 1x1", self.shape(s))));
        }
        let (r, c) = self.shape(a);
        let k = self.scalar(s);
        let out = self.value(a).iter().map(|&x| x * k).collect();
        Ok(self.push(r, c, out, Op::ScaleBy(a, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push(r, c, out, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{rows} rows vs {:?}", self.shape(*bad)),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.row_of(p, i));
            }
        }
        Ok(self.push(rows, cols, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let av = self.value(a);
        let out = (0..r)
            .flat_map(|i| av[i * c + start..i * c + end].iter().copied())
            .collect();
        Ok(self.push(r, end - start, out, Op::SliceCols(a, start)))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if i >= r {
            return Err(Error::Index {
                what: "matrix rows",
                index: i,
                len: r,
            });
        }
        let out = self.row_of(a, i).to_vec();
        Ok(self.push(1, c, out, Op::Row(a, i)))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(Error::shape("stack_rows", "no inputs"));
        };
        let cols = self.shape(first).1;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &v in rows {
            if self.shape(v) != (1, cols) {
                return Err(Error::shape(
                    "stack_rows",
                    format!("expected 1x{cols}, got {:?}", self.shape(v)),
                ));
            }
            out.extend_from_slice(self.value(v));
        }
        Ok(self.push(rows.len(), cols, out, Op::StackRows(rows.to_vec())))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = vec![T::zero(); c];
        for row in self.value(a).chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        let inv = T::one() / T::from_f64(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(1, c, out, Op::MeanRows(a))
    }

    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Err(Error::shape("add_all", "no inputs"));
        };
        iter.try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `−log softmax(logits)[gold]` for a single row of logits. The
    /// probabilities are kept on the node, see [`Graph::probabilities`].
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 {
            return Err(Error::shape("cross_entropy", format!("{r} rows of logits")));
        }
        if gold >= c {
            return Err(Error::Index {
                what: "classes",
                index: gold,
                len: c,
            });
        }
        let lv = self.value(logits);
        let max = lv.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let log_z = lv.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        let probs: Vec<T> = lv.iter().map(|&x| (x - log_z).exp()).collect();
        let loss = log_z - lv[gold];
        let v = self.push(1, 1, vec![loss], Op::CrossEntropy(logits, gold));
        self.nodes[v.0].aux = probs;
        Ok(v)
    }

    /// Gradients of the 1×1 node `loss` with respect to every parameter that
    /// was reached and is marked `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::shape("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::for_store(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if self.params.get(*id).requires_grad {
                        let slot = out.slot_mut(*id, g.len());
                        slot.iter_mut().zip(&g).for_each(|(s, &x)| *s += x);
                    }
                }
                Op::Gather(id, ids) => {
                    let table = self.params.get(*id);
                    if table.requires_grad {
                        let cols = node.cols;
                        let slot = out.slot_mut(*id, table.len());
                        for (r, &i) in ids.iter().enumerate() {
                            axpy(
                                T::one(),
                                &g[r * cols..(r + 1) * cols],
                                &mut slot[i * cols..(i + 1) * cols],
                            );
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (r, k) = self.shape(*a);
                    let n = node.cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    {
                        let da = grad_buf(&mut grads, *a, r * k);
                        for i in 0..r {
                            for p in 0..k {
                                da[i * k + p] += dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    let db = grad_buf(&mut grads, *b, k * n);
                    for i in 0..r {
                        for p in 0..k {
                            axpy(av[i * k + p], &g[i * n..(i + 1) * n], &mut db[p * n..(p + 1) * n]);
                        }
                    }
                }
                Op::MatMulT(a, b) => {
                    let (r, k) = self.shape(*a);
                    let n = node.cols;
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    {
                        let da = grad_buf(&mut grads, *a, r * k);
                        for i in 0..r {
                            let darow = &mut da[i * k..(i + 1) * k];
                            for j in 0..n {
                                axpy(g[i * n + j], &bv[j * k..(j + 1) * k], darow);
                            }
                        }
                    }
                    let db = grad_buf(&mut grads, *b, n * k);
                    for i in 0..r {
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            axpy(g[i * n + j], arow, &mut db[j * k..(j + 1) * k]);
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let db = grad_buf(&mut grads, *b, g.len());
                    db.iter_mut().zip(&g).for_each(|(d, &x)| *d -= x);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    {
                        let da = grad_buf(&mut grads, *a, g.len());
                        for ((d, &x), &y) in da.iter_mut().zip(&g).zip(bv) {
                            *d += x * y;
                        }
                    }
                    let db = grad_buf(&mut grads, *b, g.len());
                    for ((d, &x), &y) in db.iter_mut().zip(&g).zip(av) {
                        *d += x * y;
                    }
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *a, &g);
                    let c = node.cols;
                    let db = grad_buf(&mut grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, db);
                    }
                }
                Op::Scale(a, factor) => {
                    let da = grad_buf(&mut grads, *a, g.len());
                    axpy(*factor, &g, da);
                }
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let ds = dot(&g, self.value(*a));
                    axpy(k, &g, grad_buf(&mut grads, *a, g.len()));
                    grad_buf(&mut grads, *s, 1)[0] += ds;
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_deref().expect("computed");
                    let da = grad_buf(&mut grads, *a, g.len());
                    for ((d, &gy), &yy) in da.iter_mut().zip(&g).zip(y) {
                        *d += gy * yy * (T::one() - yy);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_deref().expect("computed");
                    let da = grad_buf(&mut grads, *a, g.len());
                    for ((d, &gy), &yy) in da.iter_mut().zip(&g).zip(y) {
                        *d += gy * (T::one() - yy * yy);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let dp = grad_buf(&mut grads, p, r * c);
                        for i in 0..r {
                            let src = &g[i * node.cols + offset..i * node.cols + offset + c];
                            axpy(T::one(), src, &mut dp[i * c..(i + 1) * c]);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let w = node.cols;
                    let da = grad_buf(&mut grads, *a, r * c);
                    for i in 0..r {
                        axpy(
                            T::one(),
                            &g[i * w..(i + 1) * w],
                            &mut da[i * c + start..i * c + start + w],
                        );
                    }
                }
                Op::Row(a, i) => {
                    let (r, c) = self.shape(*a);
                    let da = grad_buf(&mut grads, *a, r * c);
                    axpy(T::one(), &g, &mut da[i * c..(i + 1) * c]);
                }
                Op::StackRows(rows) => {
                    let c = node.cols;
                    for (i, &v) in rows.iter().enumerate() {
                        accumulate(&mut grads, v, &g[i * c..(i + 1) * c]);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_deref().expect("computed");
                    let c = node.cols;
                    let da = grad_buf(&mut grads, *a, g.len());
                    for ((drow, grow), yrow) in da.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let inner = dot(grow, yrow);
                        for ((d, &gy), &yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yy * (gy - inner);
                        }
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    let da = grad_buf(&mut grads, *a, r * c);
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let scale = T::one() / T::from_f64(r as f64);
                    let da = grad_buf(&mut grads, *a, r * c);
                    for row in da.chunks_exact_mut(c) {
                        axpy(scale, &g, row);
                    }
                }
                Op::CrossEntropy(logits, gold) => {
                    let c = self.shape(*logits).1;
                    let dl = grad_buf(&mut grads, *logits, c);
                    for (j, (d, &p)) in dl.iter_mut().zip(&node.aux).enumerate() {
                        let target = if j == *gold { T::one() } else { T::zero() };
                        *d += g[0] * (p - target);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(d) => d.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
