use std::collections::HashMap;

use super::kernels::{self, gemm, View};
use super::{shape_err, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position in the graph; indexes the result of [`Graph::backward_inputs`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sequence layout for multi-head attention over `[batch * len, dim]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

/// Per-row result of the cosine-distance loss.
#[derive(Debug, Clone)]
pub struct CosineLoss<T> {
    pub loss: Var,
    pub distances: Vec<T>,
    pub degenerate: usize,
}

/// Norm below which a vector is treated as zero by the cosine distance.
pub const COSINE_NORM_EPS: f64 = 1e-8;

enum Op<T> {
    Constant,
    Param,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    Gather {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    Cosine {
        pred: Var,
        target: Vec<T>,
        saved: Vec<Option<(T, T, T)>>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation over tensors. Values are computed eagerly as
/// operations are added; [`Graph::backward`] replays the record in reverse.
///
/// Each graph supports a single backward pass. Gradients land in the
/// [`ParamStore`] tensors, where they accumulate until explicitly reset.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len(), "{op_name}");
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn rows(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).0
    }

    pub fn cols(&self, v: Var) -> usize {
        rows_cols(self.shape(v)).1
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold consistent shapes")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Records a tensor as an input. It is differentiable only when the
    /// tensor has `requires_grad` set, in which case its gradient is
    /// available through [`Graph::backward_inputs`].
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        let needs = t.requires_grad();
        let shape = t.shape().to_vec();
        let data = t.into_data();
        self.push("constant", shape, data, Op::Constant, needs)
    }

    /// Records a constant from a shape and raw values.
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.constant(Tensor::new(shape, data)?)
    }

    /// Records a parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let needs = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Param,
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a), false, self.value(b), false, m, k, n, &mut out, false);
        let ng = self.ng(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, ng)
    }

    /// `x * w + b` with `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = rows_cols(self.shape(x));
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != k {
            return Err(shape_err("linear", format!("input width {k}, weight {ws:?}")));
        }
        let n = ws[1];
        let mut out = if let Some(b) = b {
            if self.value(b).len() != n {
                return Err(shape_err("linear", format!("bias {:?} for width {n}", self.shape(b))));
            }
            let bias = self.value(b);
            let mut o = Vec::with_capacity(m * n);
            for _ in 0..m {
                o.extend_from_slice(bias);
            }
            o
        } else {
            vec![T::zero(); m * n]
        };
        kernels::matmul(
            self.value(x),
            false,
            self.value(w),
            false,
            m,
            k,
            n,
            &mut out,
            b.is_some(),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push("linear", vec![m, n], out, Op::Linear { x, w, b }, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(&[a, b]);
        self.push("add", self.shape(a).to_vec(), out, Op::Add { a, b }, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(&[a, b]);
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub { a, b }, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(&[a, b]);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul { a, b }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.ng(&[a]);
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale { a, s }, ng)
    }

    /// Adds a `[cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.cols(x);
        if self.value(row).len() != c {
            return Err(shape_err("add_row", format!("row {:?} for width {c}", self.shape(row))));
        }
        let r = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|xr| xr.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let ng = self.ng(&[x, row]);
        self.push("add_row", self.shape(x).to_vec(), out, Op::AddRow { x, row }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::from_f64(self.value(a).len() as f64);
        let s = self.value(a).iter().copied().sum::<T>() / n;
        let ng = self.ng(&[a]);
        self.push("mean", vec![1], vec![s], Op::Mean { a }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let c = self.cols(a);
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows(&mut out, c);
        let ng = self.ng(&[a]);
        self.push("softmax", self.shape(a).to_vec(), out, Op::Softmax { a }, ng)
    }

    /// Row-wise layer normalization.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = rows_cols(self.shape(x));
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err(
                "layer_norm",
                format!("width {c}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        kernels::layer_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            T::from_f64(eps),
            c,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let ng = self.ng(&[x]);
        self.push("gelu", self.shape(x).to_vec(), out, Op::Gelu { x }, ng)
    }

    /// Scaled dot-product multi-head attention. `q` is `[batch * q_len, dim]`,
    /// `k` and `v` are `[batch * kv_len, dim]`; heads split `dim` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let AttentionShape {
            batch,
            q_len,
            kv_len,
            heads,
        } = shape;
        let d = self.cols(q);
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(shape_err(
                "attention",
                format!("dim {d} not divisible by {heads} heads"),
            ));
        }
        if batch == 0 || q_len == 0 || kv_len == 0 {
            return Err(shape_err("attention", "empty sequence"));
        }
        if self.shape(q) != [batch * q_len, d]
            || self.shape(k) != [batch * kv_len, d]
            || self.shape(v) != [batch * kv_len, d]
        {
            return Err(shape_err(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?} for {shape:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * q_len * kv_len];
        let mut out = vec![T::zero(); batch * q_len * d];
        let (qv, kvv, vv) = (self.value(q), self.value(k), self.value(v));
        for b in 0..batch {
            for h in 0..heads {
                let qview = View::row_major(b * q_len * d + h * dh, q_len, dh, d);
                let kview = View::row_major(b * kv_len * d + h * dh, kv_len, dh, d);
                let poff = (b * heads + h) * q_len * kv_len;
                let pview = View::row_major(poff, q_len, kv_len, kv_len);
                gemm(scale, qv, qview, kvv, kview.t(), T::zero(), &mut probs, pview);
                kernels::softmax_rows(&mut probs[poff..poff + q_len * kv_len], kv_len);
                gemm(T::one(), &probs, pview, vv, kview, T::zero(), &mut out, qview);
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            "attention",
            vec![batch * q_len, d],
            out,
            Op::Attention { q, k, v, shape, probs },
            ng,
        )
    }

    /// Assembles rows from several `[rows, cols]` sources; `picks` lists
    /// `(source index, row)` for each output row.
    pub fn gather_rows(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let Some(&first) = sources.first() else {
            return Err(shape_err("gather_rows", "no sources"));
        };
        let c = self.cols(first);
        for &s in sources {
            if self.cols(s) != c {
                return Err(shape_err("gather_rows", "sources differ in width"));
            }
        }
        if picks.is_empty() {
            return Err(shape_err("gather_rows", "no rows selected"));
        }
        let mut out = Vec::with_capacity(picks.len() * c);
        for &(s, r) in picks {
            let src = *sources.get(s).ok_or(TensorError::Index {
                op: "gather_rows",
                index: s,
                limit: sources.len(),
            })?;
            let rows = self.rows(src);
            if r >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    limit: rows,
                });
            }
            out.extend_from_slice(&self.value(src)[r * c..(r + 1) * c]);
        }
        let ng = self.ng(sources);
        self.push(
            "gather_rows",
            vec![picks.len(), c],
            out,
            Op::Gather {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
            ng,
        )
    }

    /// Mean cosine distance between rows of `pred` and the constant `target`.
    /// Rows where either vector has norm at or below [`COSINE_NORM_EPS`]
    /// contribute the neutral distance 1 and no gradient.
    pub fn cosine_distance_loss(&mut self, pred: Var, target: &[T]) -> Result<CosineLoss<T>> {
        let (r, c) = rows_cols(self.shape(pred));
        if target.len() != r * c {
            return Err(shape_err(
                "cosine_distance_loss",
                format!("prediction {:?}, target {} values", self.shape(pred), target.len()),
            ));
        }
        let eps = T::from_f64(COSINE_NORM_EPS);
        let mut distances = Vec::with_capacity(r);
        let mut saved = Vec::with_capacity(r);
        let mut degenerate = 0;
        for (a, b) in self.value(pred).chunks(c).zip(target.chunks(c)) {
            let na = a.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = b.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na <= eps || nb <= eps {
                degenerate += 1;
                distances.push(T::one());
                saved.push(None);
            } else {
                let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
                let cos = dot / (na * nb);
                distances.push(T::one() - cos);
                saved.push(Some((na, nb, cos)));
            }
        }
        let loss = distances.iter().copied().sum::<T>() / T::from_f64(r as f64);
        let ng = self.ng(&[pred]);
        let loss = self.push(
            "cosine_distance_loss",
            vec![1],
            vec![loss],
            Op::Cosine {
                pred,
                target: target.to_vec(),
                saved,
            },
            ng,
        )?;
        Ok(CosineLoss {
            loss,
            distances,
            degenerate,
        })
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        if target.len() != self.value(pred).len() {
            return Err(shape_err("mse_loss", "target size differs from prediction"));
        }
        let n = T::from_f64(target.len() as f64);
        let s = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let ng = self.ng(&[pred]);
        self.push(
            "mse_loss",
            vec![1],
            vec![s],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`, accumulating gradients into the
    /// parameters held by `store`.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward_inputs(loss)?;
        for (&id, &var) in &self.params {
            if let Some(g) = &grads[var.0] {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Reverse pass returning the gradient of every node (None for nodes
    /// that do not need one). Used directly when the differentiated leaves
    /// are constants recorded with `requires_grad`.
    pub fn backward_inputs(&mut self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.backward_done {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.needs_grad {
            return Err(TensorError::DetachedGraph);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            // Only leaf gradients are reported; interior buffers are dropped.
            if matches!(self.nodes[i].op, Op::Constant | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        // Returns the gradient buffer of `v`, or None when `v` needs none.
        fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }
        let node = &nodes[i];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul { a, b } => {
                let (m, k) = rows_cols(&nodes[a.0].shape);
                let n = nodes[b.0].shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::matmul(g, false, &nodes[b.0].value, true, m, n, k, ga, true);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::matmul(&nodes[a.0].value, true, g, false, k, m, n, gb, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = rows_cols(&nodes[x.0].shape);
                let n = nodes[w.0].shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    kernels::matmul(g, false, &nodes[w.0].value, true, m, n, k, gx, true);
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    kernels::matmul(&nodes[x.0].value, true, g, false, k, m, n, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = slot(nodes, grads, *b) {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(a, &d)| *a += d);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(a, &d)| *a += d);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(a, &d)| *a -= d);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((s, &d), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *s += d * o;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((s, &d), &o) in gb.iter_mut().zip(g).zip(av) {
                        *s += d * o;
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(a, &d)| *a += d * *s);
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d);
                }
                let c = nodes[row.0].value.len();
                if let Some(gr) = slot(nodes, grads, *row) {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(a, &d)| *a += d);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean { a } => {
                let n = T::from_f64(nodes[a.0].value.len() as f64);
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::Softmax { a } => {
                let c = rows_cols(&node.shape).1;
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::softmax_rows_backward(&node.value, g, c, ga);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = rows_cols(&node.shape).1;
                let gam = &nodes[gamma.0].value;
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(a, &d)| *a += d);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = T::from_f64(c as f64);
                    for (r, ((gr, hr), xr)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        let s = rstd[r];
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            xr[j] += s * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = &nodes[x.0].value;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((s, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *s += d * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Attention { q, k, v, shape, probs } => {
                self.attention_backward(*q, *k, *v, *shape, probs, g, grads);
            }
            Op::Gather { sources, picks } => {
                let c = rows_cols(&node.shape).1;
                for (o, &(s, r)) in picks.iter().enumerate() {
                    if let Some(gs) = slot(nodes, grads, sources[s]) {
                        let dst = &mut gs[r * c..(r + 1) * c];
                        dst.iter_mut().zip(&g[o * c..(o + 1) * c]).for_each(|(a, &d)| *a += d);
                    }
                }
            }
            Op::Cosine { pred, target, saved } => {
                let c = rows_cols(&nodes[pred.0].shape).1;
                let pv = &nodes[pred.0].value;
                let rows = T::from_f64(saved.len() as f64);
                if let Some(gp) = slot(nodes, grads, *pred) {
                    for (r, s) in saved.iter().enumerate() {
                        let Some((na, nb, cos)) = *s else { continue };
                        let a = &pv[r * c..(r + 1) * c];
                        let b = &target[r * c..(r + 1) * c];
                        let dst = &mut gp[r * c..(r + 1) * c];
                        let coef = g[0] / rows;
                        let inv_ab = T::one() / (na * nb);
                        let inv_aa = cos / (na * na);
                        for j in 0..c {
                            dst[j] -= coef * (b[j] * inv_ab - a[j] * inv_aa);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let n = T::from_f64(target.len() as f64);
                let pv = &nodes[pred.0].value;
                if let Some(gp) = slot(nodes, grads, *pred) {
                    let two = T::from_f64(2.0);
                    for ((s, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        *s += g[0] * two * (p - t) / n;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let AttentionShape {
            batch,
            q_len,
            kv_len,
            heads,
        } = shape;
        let d = rows_cols(&self.nodes[q.0].shape).1;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); q_len * kv_len];
        let mut ds = vec![T::zero(); q_len * kv_len];
        let pl = View::row_major(0, q_len, kv_len, kv_len);
        for b in 0..batch {
            for h in 0..heads {
                let qview = View::row_major(b * q_len * d + h * dh, q_len, dh, d);
                let kview = View::row_major(b * kv_len * d + h * dh, kv_len, dh, d);
                let poff = (b * heads + h) * q_len * kv_len;
                let pview = View::row_major(poff, q_len, kv_len, kv_len);
                // dV += P^T dO
                gemm(T::one(), probs, pview.t(), g, qview, T::one(), &mut dv, kview);
                // dP = dO V^T
                gemm(T::one(), g, qview, vv, kview.t(), T::zero(), &mut dp, pl);
                ds.iter_mut().for_each(|x| *x = T::zero());
                kernels::softmax_rows_backward(&probs[poff..poff + q_len * kv_len], &dp, kv_len, &mut ds);
                // dQ += scale dS K ; dK += scale dS^T Q
                gemm(scale, &ds, pl, kv, kview, T::one(), &mut dq, qview);
                gemm(scale, &ds, pl.t(), qv, qview, T::one(), &mut dk, kview);
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            let n = buf.len();
            let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); n]);
            slot.iter_mut().zip(&buf).for_each(|(a, &d)| *a += d);
        }
    }
}
