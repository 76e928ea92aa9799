//! The recording tape and its differentiable operations.
//!
//! Nodes are appended in evaluation order, so the reverse of creation order is
//! a valid topological order for the backward sweep; each node is visited once.

use super::{ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        b: usize,
        cols: usize,
    },
    Scale(usize, T),
    Gelu(usize),
    SoftmaxRows {
        x: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
        vocab: usize,
    },
    Mse(usize, usize),
    L1(usize, usize),
    ConcatRows {
        parts: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
        cols: usize,
    },
    MeanRows {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Sum(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        tq: usize,
        tk: usize,
        dim: usize,
        probs: Vec<T>,
    },
    Reshape(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation tape bound to a read-only parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<usize>>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T> {
    by_node: Vec<Option<Vec<T>>>,
    param_nodes: Vec<Option<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a graph input or parameter node, if any reached it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.param_nodes
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|n| self.by_node[n].as_deref())
    }

    /// Moves parameter gradients out, indexed like the parameter store.
    pub fn into_param_grads(mut self) -> Vec<Option<Vec<T>>> {
        self.param_nodes
            .iter()
            .map(|n| n.and_then(|n| self.by_node[n].take()))
            .collect()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var(n);
        }
        let shape = self.params.get(id).shape().to_vec();
        let rg = self.params.is_trainable(id);
        self.nodes.push(Node {
            shape,
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let n = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(n);
        Var(n)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
        }
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let cols = *s.last().unwrap();
        (s.iter().product::<usize>() / cols, cols)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `x · w (+ b)` for `x: [rows, din]`, `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, din) = self.rows_cols(x);
        let (wi, dout) = self.dims2(w, "linear")?;
        if wi != din || self.shape(w).len() != 2 {
            return Err(shape_err("linear", self.shape(x), self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", self.shape(b), &[dout]));
            }
        }
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.value(x),
            din as isize,
            1,
            self.value(w),
            dout as isize,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            dout as isize,
            1,
        );
        let mut deps = vec![x.0, w.0];
        if let Some(b) = b {
            deps.push(b.0);
        }
        let rg = self.rg(&deps);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = dout;
        Ok(self.push(
            shape,
            out,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(s, v, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(s, v, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(s, v, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a vector to every row (trailing dimension).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        if self.shape(b) != [cols] {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in out.chunks_mut(cols) {
            for (o, &bb) in r.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x.0, b.0]);
        let s = self.shape(x).to_vec();
        Ok(self.push(s, out, Op::AddRow { x: x.0, b: b.0, cols }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale(x.0, s), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x.0), rg)
    }

    /// Softmax over the trailing dimension, stabilised by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x);
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = xv.to_vec();
        for r in out.chunks_mut(cols) {
            softmax_in_place(r);
        }
        let rg = self.rg(&[x.0]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxRows { x: x.0, cols }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let (rows, cols) = self.rows_cols(x);
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::lit(eps);
        let n = T::lit(cols as f64);
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                cols,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row gather from a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::IdOutOfRange { id: bad, vocab });
        }
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: "no ids".into(),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                self.shape(logits),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(TensorError::IdOutOfRange { id: t, vocab });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (v - lse).exp();
            }
        }
        let loss = total / T::lit(count as f64);
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
                vocab,
            },
            rg,
        ))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = self.binary(a, b, "mse", |x, y| (x - y) * (x - y))?;
        let n = T::lit(d.len() as f64);
        let v = d.into_iter().sum::<T>() / n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![1], vec![v], Op::Mse(a.0, b.0), rg))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = self.binary(a, b, "l1", |x, y| (x - y).abs())?;
        let n = T::lit(d.len() as f64);
        let v = d.into_iter().sum::<T>() / n;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![1], vec![v], Op::L1(a.0, b.0), rg))
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no parts".into(),
        })?;
        let (_, cols) = self.rows_cols(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows { parts: ids }, rg))
    }

    /// Joins matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no parts".into(),
        })?;
        let (rows, _) = self.rows_cols(first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_cols(p);
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p.0, c));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(Var(p))[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: widths, rows }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.rows_cols(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::IdOutOfRange { id: bad, vocab: n });
        }
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "no rows".into(),
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            vec![rows.len(), cols],
            out,
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
                cols,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &rows)
    }

    /// Column means: `[rows, cols] -> [1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.rows_cols(x);
        let xv = self.value(x);
        let inv = T::one() / T::lit(rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in xv.chunks(cols) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        let rg = self.rg(&[x.0]);
        self.push(vec![1, cols], out, Op::MeanRows { x: x.0, rows, cols }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x.0]);
        self.push(vec![1], vec![v], Op::Sum(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x.0), rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [tq, dim]`, `k, v: [tk, dim]`; `allowed` is a row-major `tq × tk`
    /// mask. Masked keys get exactly zero weight; a query with no allowed key
    /// produces a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, allowed: &[bool]) -> Result<Var> {
        let (tq, dim) = self.dims2(q, "attention")?;
        let (tk, dk) = self.dims2(k, "attention")?;
        if dk != dim || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{heads} heads do not divide width {dim}"),
            });
        }
        if allowed.len() != tq * tk {
            return Err(shape_err("attention", &[tq, tk], &[allowed.len()]));
        }
        let dh = dim / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![T::zero(); heads * tq * tk];
        let mut out = vec![T::zero(); tq * dim];
        let d = dim as isize;
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            T::gemm(
                tq,
                dh,
                tk,
                scale,
                &qv[h * dh..],
                d,
                1,
                &kv[h * dh..],
                1,
                d,
                T::zero(),
                p,
                tk as isize,
                1,
            );
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                let mask = &allowed[i * tk..(i + 1) * tk];
                masked_softmax(row, mask);
            }
            T::gemm(
                tq,
                tk,
                dh,
                T::one(),
                p,
                tk as isize,
                1,
                &vv[h * dh..],
                d,
                1,
                T::zero(),
                &mut out[h * dh..],
                d,
                1,
            );
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        Ok(self.push(
            vec![tq, dim],
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                tq,
                tk,
                dim,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients {
            by_node: grads,
            param_nodes: self.param_nodes.clone(),
        })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| self.value(Var(i));
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        val(*b),
                        1,
                        n as isize,
                        T::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        val(*a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::zero(),
                        &mut db,
                        n as isize,
                        1,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let (rows, din, dout) = (*rows, *din, *dout);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * din];
                    T::gemm(
                        rows,
                        dout,
                        din,
                        T::one(),
                        g,
                        dout as isize,
                        1,
                        val(*w),
                        1,
                        dout as isize,
                        T::zero(),
                        &mut dx,
                        din as isize,
                        1,
                    );
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); din * dout];
                    T::gemm(
                        din,
                        rows,
                        dout,
                        T::one(),
                        val(*x),
                        1,
                        din as isize,
                        g,
                        dout as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        dout as isize,
                        1,
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); dout];
                        for r in g.chunks(dout) {
                            for (o, &v) in db.iter_mut().zip(r) {
                                *o += v;
                            }
                        }
                        accumulate(grads, *b, db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::AddRow { x, b, cols } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); *cols];
                    for r in g.chunks(*cols) {
                        for (o, &v) in db.iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let c = T::lit(GELU_C);
                    let a = T::lit(GELU_A);
                    let half = T::lit(0.5);
                    let three = T::lit(3.0);
                    let d = val(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &g)| {
                            let t = (c * (v + a * v * v * v)).tanh();
                            let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                            g * (half * (T::one() + t) + half * v * dt)
                        })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::SoftmaxRows { x, cols } => {
                if self.wants(*x) {
                    let y = val(id);
                    let mut d = vec![T::zero(); y.len()];
                    for ((dr, yr), gr) in d.chunks_mut(*cols).zip(y.chunks(*cols)).zip(g.chunks(*cols)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - dot);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = val(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![T::zero(); cols];
                    for (hr, gr) in xhat.chunks(cols).zip(g.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += hr[c] * gr[c];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); cols];
                    for gr in g.chunks(cols) {
                        for c in 0..cols {
                            db[c] += gr[c];
                        }
                    }
                    accumulate(grads, *bias, db);
                }
                if self.wants(*x) {
                    let n = T::lit(cols as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, ((dr, hr), gr)) in dx
                        .chunks_mut(cols)
                        .zip(xhat.chunks(cols))
                        .zip(g.chunks(cols))
                        .enumerate()
                    {
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            sum_d += dh;
                            sum_dh += dh * hr[c];
                        }
                        let md = sum_d / n;
                        let mdh = sum_dh / n;
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            dr[c] = rstd[r] * (dh - md - hr[c] * mdh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Embedding { table, ids, dim } => {
                if self.wants(*table) {
                    let n = self.value(Var(*table)).len();
                    let mut d = vec![T::zero(); n];
                    for (row, &i) in g.chunks(*dim).zip(ids) {
                        for (o, &v) in d[i * dim..(i + 1) * dim].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *table, d);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
                vocab,
            } => {
                if self.wants(*logits) {
                    let scale = g[0] / T::lit(*count as f64);
                    let mut d = vec![T::zero(); probs.len()];
                    for (r, (dr, pr)) in d.chunks_mut(*vocab).zip(probs.chunks(*vocab)).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        for (o, &p) in dr.iter_mut().zip(pr) {
                            *o = p * scale;
                        }
                        dr[targets[r]] = dr[targets[r]] - scale;
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::Mse(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let s = g[0] * T::lit(2.0) / T::lit(av.len() as f64);
                let d: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * s).collect();
                if self.wants(*b) {
                    accumulate(grads, *b, d.iter().map(|&v| -v).collect());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::L1(a, b) => {
                let av = val(*a);
                let bv = val(*b);
                let s = g[0] / T::lit(av.len() as f64);
                let d: Vec<T> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        if x > y {
                            s
                        } else if x < y {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    accumulate(grads, *b, d.iter().map(|&v| -v).collect());
                }
                if self.wants(*a) {
                    accumulate(grads, *a, d);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(Var(p)).len();
                    if self.wants(p) {
                        accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, c) in parts {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..*rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        accumulate(grads, p, d);
                    }
                    off += c;
                }
            }
            Op::GatherRows { x, rows, cols } => {
                if self.wants(*x) {
                    let n = self.value(Var(*x)).len();
                    let mut d = vec![T::zero(); n];
                    for (gr, &r) in g.chunks(*cols).zip(rows) {
                        for (o, &v) in d[r * cols..(r + 1) * cols].iter_mut().zip(gr) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::MeanRows { x, rows, cols } => {
                if self.wants(*x) {
                    let inv = T::one() / T::lit(*rows as f64);
                    let mut d = Vec::with_capacity(rows * cols);
                    for _ in 0..*rows {
                        d.extend(g.iter().map(|&v| v * inv));
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.value(Var(*x)).len();
                    accumulate(grads, *x, vec![g[0]; n]);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                tq,
                tk,
                dim,
                probs,
            } => {
                let (heads, tq, tk, dim) = (*heads, *tq, *tk, *dim);
                let dh = dim / heads;
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let d = dim as isize;
                let qv = val(*q);
                let kv = val(*k);
                let vv = val(*v);
                let mut dq = vec![T::zero(); tq * dim];
                let mut dk = vec![T::zero(); tk * dim];
                let mut dv = vec![T::zero(); tk * dim];
                let mut ds = vec![T::zero(); tq * tk];
                for h in 0..heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    // dP = dO · Vᵀ
                    T::gemm(
                        tq,
                        dh,
                        tk,
                        T::one(),
                        &g[h * dh..],
                        d,
                        1,
                        &vv[h * dh..],
                        1,
                        d,
                        T::zero(),
                        &mut ds,
                        tk as isize,
                        1,
                    );
                    // dV = Pᵀ · dO
                    T::gemm(
                        tk,
                        tq,
                        dh,
                        T::one(),
                        p,
                        1,
                        tk as isize,
                        &g[h * dh..],
                        d,
                        1,
                        T::one(),
                        &mut dv[h * dh..],
                        d,
                        1,
                    );
                    for i in 0..tq {
                        let pr = &p[i * tk..(i + 1) * tk];
                        let sr = &mut ds[i * tk..(i + 1) * tk];
                        let dot: T = pr.iter().zip(sr.iter()).map(|(&a, &b)| a * b).sum();
                        for (s, &pp) in sr.iter_mut().zip(pr) {
                            *s = pp * (*s - dot) * scale;
                        }
                    }
                    T::gemm(
                        tq,
                        tk,
                        dh,
                        T::one(),
                        &ds,
                        tk as isize,
                        1,
                        &kv[h * dh..],
                        d,
                        1,
                        T::one(),
                        &mut dq[h * dh..],
                        d,
                        1,
                    );
                    T::gemm(
                        tk,
                        tq,
                        dh,
                        T::one(),
                        &ds,
                        1,
                        tk as isize,
                        &qv[h * dh..],
                        d,
                        1,
                        T::one(),
                        &mut dk[h * dh..],
                        d,
                        1,
                    );
                }
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, d: Vec<T>) {
    match &mut grads[id] {
        Some(g) => {
            for (o, v) in g.iter_mut().zip(d) {
                *o += v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn masked_softmax<T: Scalar>(row: &mut [T], mask: &[bool]) {
    let mut max = T::neg_infinity();
    for (&v, &m) in row.iter().zip(mask) {
        if m && v > max {
            max = v;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for (v, &m) in row.iter_mut().zip(mask) {
        if m {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn matmul_identity() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1., 2., 3., 4.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_identity3_left() {
        let s = store();
        let mut g = Graph::new(&s);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let m: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let i3 = g.constant(Tensor::from_f64(&[3, 3], &eye).unwrap());
        let mm = g.constant(Tensor::from_f64(&[3, 2], &m).unwrap());
        let c = g.matmul(i3, mm).unwrap();
        assert_eq!(g.value(c), m.as_slice());
    }

    #[test]
    fn matmul_shape_mismatch_reports_both() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64(&[2, 3], &[0., 0., 0., 1000., 0., -1000.]).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for &p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((v[3] - 1.0).abs() < 1e-12 && v[4] < 1e-300);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_rejects_nan() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64(&[1, 2], &[f64::NAN, 0.]).unwrap());
        assert!(matches!(g.softmax_rows(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_properties() {
        let s = store();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 5., 5., 5.]).unwrap());
        let gain = g.constant(Tensor::filled(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        let v = g.value(y).to_vec();
        let mean: f64 = v[..3].iter().sum::<f64>() / 3.0;
        let var: f64 = v[..3].iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        assert!(v[3..].iter().all(|a| a.abs() < 1e-9));
        assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
    }

    #[test]
    fn embedding_repeated_id_accumulates() {
        let mut s = store();
        let id = s
            .insert("t", Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let mut g = Graph::new(&s);
        let t = g.param(id);
        let e = g.embedding(t, &[0, 2, 2]).unwrap();
        assert_eq!(&g.value(e)[..2], &[1., 2.]);
        let l = g.sum(e);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.param(id).unwrap(), &[1., 1., 0., 0., 2., 2.]);
        let err = g.embedding(t, &[3]).unwrap_err();
        assert!(matches!(err, TensorError::IdOutOfRange { id: 3, vocab: 3 }));
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let s = store();
        let mut g = Graph::new(&s);
        let uniform = g.constant(Tensor::zeros(&[4, 256]));
        let l = g.cross_entropy(uniform, &[0, 5, 7, 255], &[true; 4]).unwrap();
        assert!((g.scalar_value(l) - 256f64.ln()).abs() < 1e-12);

        let mut peaked = vec![0.0; 2 * 5];
        peaked[3] = 100.0;
        peaked[5 + 1] = 100.0;
        let p = g.constant(Tensor::from_f64(&[2, 5], &peaked).unwrap());
        let l = g.cross_entropy(p, &[3, 1], &[true, true]).unwrap();
        assert!(g.scalar_value(l) < 1e-30);
        assert!(matches!(
            g.cross_entropy(p, &[3, 1], &[false, false]),
            Err(TensorError::EmptyMask)
        ));
    }

    #[test]
    fn mse_l1_unit_offset() {
        let s = store();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::filled(&[3, 2], 2.0));
        let b = g.constant(Tensor::filled(&[3, 2], 1.0));
        let m = g.mse(a, b).unwrap();
        let l = g.l1(a, b).unwrap();
        assert_eq!(g.scalar_value(m), 1.0);
        assert_eq!(g.scalar_value(l), 1.0);
        let z = g.mse(a, a).unwrap();
        assert_eq!(g.scalar_value(z), 0.0);
        let c = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn attention_fully_masked_row_is_zero() {
        let s = store();
        let mut g = Graph::new(&s);
        let q = g.constant(Tensor::filled(&[2, 4], 0.3));
        let k = g.constant(Tensor::filled(&[2, 4], 0.1));
        let v = g.constant(Tensor::from_f64(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let o = g.attention(q, k, v, 2, &[false, false, true, true]).unwrap();
        assert_eq!(&g.value(o)[..4], &[0.0; 4]);
        assert_eq!(&g.value(o)[4..], &[3., 4., 5., 6.]);
    }
}
