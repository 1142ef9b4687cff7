//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A forward pass records one node per primitive application in a Wengert
//! list; `backward` replays the list in reverse and accumulates
//! vector-Jacobian products. Construction order is the topological order, so
//! the backward pass visits every node exactly once.
//!
//! Gradients accumulate additively into tracked leaves across repeated
//! `backward` calls; the caller resets them before each optimizer step.
//! Everything is single-threaded and deterministic: identical inputs produce
//! bitwise-identical outputs and gradients.

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, T),
    MulScalar(NodeId, T),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Max(NodeId),
    RowSums(NodeId),
    ColMeans(NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    DivRow(NodeId, NodeId),
    AddCol(NodeId, NodeId),
    Outer(NodeId, NodeId),
    DiagPart(NodeId),
    TriuSum(NodeId),
    Select(NodeId, usize),
    Reshape(NodeId),
    PairwiseSqDist(NodeId),
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId },
    MaxPool2x2(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Max(..) => "max",
            Op::RowSums(..) => "row_sums",
            Op::ColMeans(..) => "col_means",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::DivRow(..) => "div_row",
            Op::AddCol(..) => "add_col",
            Op::Outer(..) => "outer",
            Op::DiagPart(..) => "diag_part",
            Op::TriuSum(..) => "triu_sum",
            Op::Select(..) => "select",
            Op::Reshape(..) => "reshape",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2x2(..) => "maxpool2x2",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Depends on at least one tracked leaf; backward skips the rest.
    tracked: bool,
    /// Gradient accumulator, allocated on first backward reaching this leaf.
    grad: Option<Tensor<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// First primitive that produced a non-finite value (debug builds only).
    poison: Option<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), poison: None }
    }

    /// Tracked leaf: gradients will be accumulated for it.
    pub fn var(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf: data flowing through the graph without a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Non-finite status for a loss evaluation rooted at `root`.
    ///
    /// Debug builds flag the first offending primitive; release builds only
    /// inspect the root value here.
    pub fn finite_status(&self, root: NodeId) -> Result<()> {
        if let Some(op) = &self.poison {
            return Err(Error::NonFinite { op: op.clone() });
        }
        if self.value(root).first_non_finite().is_some() {
            return Err(Error::NonFinite { op: "loss evaluation".into() });
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> NodeId {
        #[cfg(debug_assertions)]
        if self.poison.is_none() {
            if let Some((idx, v)) = value.first_non_finite() {
                self.poison = Some(format!("{} ({} at flat index {})", op.name(), v, idx));
            }
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, tracked, grad: None });
        id
    }

    fn emit(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let tracked = inputs.iter().any(|i| self.nodes[i.0].tracked);
        self.push(value, op, tracked)
    }

    // -- primitives ---------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul_nn(self.value(a), self.value(b));
        self.emit(out, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.set2(j, i, v.get2(i, j));
            }
        }
        self.emit(out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_elementwise(a, b, |x, y| x + y);
        self.emit(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_elementwise(a, b, |x, y| x - y);
        self.emit(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_elementwise(a, b, |x, y| x * y);
        self.emit(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.zip_elementwise(a, b, |x, y| x / y);
        self.emit(out, Op::Div(a, b), &[a, b])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).map(|x| x + c);
        self.emit(out, Op::AddScalar(a, c), &[a])
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        self.emit(out, Op::MulScalar(a, c), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.exp());
        self.emit(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.ln());
        self.emit(out, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.sqrt());
        self.emit(out, Op::Sqrt(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.emit(out, Op::Relu(a), &[a])
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = v.row(i);
            let mut mx = row[0];
            for &x in row {
                if x > mx {
                    mx = x;
                }
            }
            let mut denom = T::zero();
            let mut exps = vec![T::zero(); n];
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                exps[j] = e;
                denom += e;
            }
            for (j, e) in exps.into_iter().enumerate() {
                out.set2(i, j, e / denom);
            }
        }
        self.emit(out, Op::Softmax(a), &[a])
    }

    /// Sum of all entries -> scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().fold(T::zero(), |acc, v| acc + v);
        self.emit(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Maximum entry -> scalar. Ties resolve to the lowest flat index, and
    /// the gradient flows only to that entry.
    pub fn max(&mut self, a: NodeId) -> NodeId {
        let (_, mx) = max_with_index(self.value(a));
        self.emit(Tensor::scalar(mx), Op::Max(a), &[a])
    }

    /// [m,n] -> [m]: sum across each row.
    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            let mut s = T::zero();
            for j in 0..n {
                s += v.get2(i, j);
            }
            out[i] = s;
        }
        self.emit(Tensor::from_vec(&[m], out), Op::RowSums(a), &[a])
    }

    /// [m,n] -> [n]: mean down each column.
    pub fn col_means(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        let inv = T::one() / cast::<T>(m as f64);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            let row = v.row(i);
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        self.emit(Tensor::from_vec(&[n], out), Op::ColMeans(a), &[a])
    }

    /// [m,n] + [n] broadcast across rows.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let out = self.broadcast_row(a, v, |x, y| x + y);
        self.emit(out, Op::AddRow(a, v), &[a, v])
    }

    /// [m,n] * [n] broadcast across rows.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let out = self.broadcast_row(a, v, |x, y| x * y);
        self.emit(out, Op::MulRow(a, v), &[a, v])
    }

    /// [m,n] / [n] broadcast across rows.
    pub fn div_row(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let out = self.broadcast_row(a, v, |x, y| x / y);
        self.emit(out, Op::DivRow(a, v), &[a, v])
    }

    /// [m,n] + [m] broadcast across columns.
    pub fn add_col(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let av = self.value(a);
        let vv = self.value(v);
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(vv.numel(), m, "add_col: vector length {} vs {} rows", vv.numel(), m);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let c = vv.data()[i];
            for j in 0..n {
                out.set2(i, j, av.get2(i, j) + c);
            }
        }
        self.emit(out, Op::AddCol(a, v), &[a, v])
    }

    /// Outer product of two vectors: [m] x [n] -> [m,n].
    pub fn outer(&mut self, u: NodeId, v: NodeId) -> NodeId {
        let uv = self.value(u);
        let vv = self.value(v);
        let (m, n) = (uv.numel(), vv.numel());
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                out.set2(i, j, uv.data()[i] * vv.data()[j]);
            }
        }
        self.emit(out, Op::Outer(u, v), &[u, v])
    }

    /// Diagonal of a square matrix -> vector.
    pub fn diag_part(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        assert_eq!(m, n, "diag_part: matrix must be square, got {}x{}", m, n);
        let out: Vec<T> = (0..m).map(|i| v.get2(i, i)).collect();
        self.emit(Tensor::from_vec(&[m], out), Op::DiagPart(a), &[a])
    }

    /// Sum of strictly upper-triangular entries -> scalar.
    pub fn triu_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (m, n) = (v.rows(), v.cols());
        assert_eq!(m, n, "triu_sum: matrix must be square, got {}x{}", m, n);
        let mut s = T::zero();
        for i in 0..m {
            for j in (i + 1)..n {
                s += v.get2(i, j);
            }
        }
        self.emit(Tensor::scalar(s), Op::TriuSum(a), &[a])
    }

    /// Single entry by flat index -> scalar.
    pub fn select(&mut self, a: NodeId, flat_index: usize) -> NodeId {
        let v = self.value(a);
        assert!(flat_index < v.numel(), "select: index {} out of {}", flat_index, v.numel());
        let s = v.data()[flat_index];
        self.emit(Tensor::scalar(s), Op::Select(a, flat_index), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let out = self.value(a).reshaped(shape);
        self.emit(out, Op::Reshape(a), &[a])
    }

    /// Squared Euclidean distances between the rows of H: [m,d] -> [m,m].
    ///
    /// Computed as the direct difference sum, which is symmetric with a zero
    /// diagonal by construction; results are clamped at zero anyway.
    pub fn pairwise_sq_dist(&mut self, h: NodeId) -> NodeId {
        let out = pairwise_sq_dist_values(self.value(h));
        self.emit(out, Op::PairwiseSqDist(h), &[h])
    }

    /// Valid (no padding), stride-1 convolution.
    /// input [b,c,h,w], weight [f,c,kh,kw], bias [f] -> [b,f,h-kh+1,w-kw+1].
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let out = conv2d_values(self.value(input), self.value(weight), self.value(bias));
        self.emit(out, Op::Conv2d { input, weight, bias }, &[input, weight, bias])
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties resolve to the first entry in scan order and receive the whole
    /// gradient.
    pub fn maxpool2x2(&mut self, a: NodeId) -> NodeId {
        let out = maxpool2x2_values(self.value(a));
        self.emit(out, Op::MaxPool2x2(a), &[a])
    }

    fn zip_elementwise(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "elementwise op: shape {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    fn broadcast_row(&self, a: NodeId, v: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, vv) = (self.value(a), self.value(v));
        let (m, n) = (av.rows(), av.cols());
        assert_eq!(vv.numel(), n, "row broadcast: vector length {} vs {} cols", vv.numel(), n);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                out.set2(i, j, f(av.get2(i, j), vv.data()[j]));
            }
        }
        out
    }

    // -- backward ------------------------------------------------------------

    /// Reverse pass from a scalar root. Gradients of tracked leaves
    /// accumulate; interior flows are transient per call.
    pub fn backward(&mut self, root: NodeId) {
        self.backward_impl(root, false);
    }

    /// Backward pass with the guided rule at every relu: the flow is zeroed
    /// both where the forward activation was <= 0 and where the incoming
    /// flow is negative.
    pub fn backward_guided(&mut self, root: NodeId) {
        self.backward_impl(root, true);
    }

    fn backward_impl(&mut self, root: NodeId, guided: bool) {
        let rnode = &self.nodes[root.0];
        assert!(rnode.value.is_scalar(), "backward root must be scalar, got {:?}", rnode.value.shape());
        assert!(rnode.tracked, "backward root does not depend on any tracked leaf");

        let mut flows: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        flows[root.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let flow = match flows[i].take() {
                Some(f) => f,
                None => continue,
            };
            // Ops are cloned (cheap: ids and scalars) to satisfy borrows.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(g) => add_into(g, &flow),
                        None => node.grad = Some(flow),
                    }
                }
                Op::Matmul(a, b) => {
                    let da = matmul_nt(&flow, self.value(b));
                    let db = matmul_tn(self.value(a), &flow);
                    self.accumulate(&mut flows, a, da);
                    self.accumulate(&mut flows, b, db);
                }
                Op::Transpose(a) => {
                    let (m, n) = (flow.rows(), flow.cols());
                    let mut da = Tensor::zeros(&[n, m]);
                    for i2 in 0..m {
                        for j in 0..n {
                            da.set2(j, i2, flow.get2(i2, j));
                        }
                    }
                    self.accumulate(&mut flows, a, da);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut flows, a, flow.clone());
                    self.accumulate(&mut flows, b, flow);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut flows, a, flow.clone());
                    self.accumulate(&mut flows, b, flow.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = elementwise(&flow, self.value(b), |g, y| g * y);
                    let db = elementwise(&flow, self.value(a), |g, x| g * x);
                    self.accumulate(&mut flows, a, da);
                    self.accumulate(&mut flows, b, db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(b);
                    let da = elementwise(&flow, bv, |g, y| g / y);
                    let av = self.value(a);
                    let mut db = Tensor::zeros(bv.shape());
                    for ((o, &g), (&x, &y)) in db
                        .data_mut()
                        .iter_mut()
                        .zip(flow.data())
                        .zip(av.data().iter().zip(bv.data()))
                    {
                        *o = -g * x / (y * y);
                    }
                    self.accumulate(&mut flows, a, da);
                    self.accumulate(&mut flows, b, db);
                }
                Op::AddScalar(a, _) => self.accumulate(&mut flows, a, flow),
                Op::MulScalar(a, c) => {
                    self.accumulate(&mut flows, a, flow.map(|g| g * c));
                }
                Op::Exp(a) => {
                    let da = elementwise(&flow, &self.nodes[i].value, |g, y| g * y);
                    self.accumulate(&mut flows, a, da);
                }
                Op::Log(a) => {
                    let da = elementwise(&flow, self.value(a), |g, x| g / x);
                    self.accumulate(&mut flows, a, da);
                }
                Op::Sqrt(a) => {
                    let two = cast::<T>(2.0);
                    let da = elementwise(&flow, &self.nodes[i].value, |g, y| g / (two * y));
                    self.accumulate(&mut flows, a, da);
                }
                Op::Relu(a) => {
                    let da = if guided {
                        elementwise(&flow, self.value(a), |g, x| {
                            if x > T::zero() && g > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        })
                    } else {
                        elementwise(&flow, self.value(a), |g, x| if x > T::zero() { g } else { T::zero() })
                    };
                    self.accumulate(&mut flows, a, da);
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[i].value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += flow.get2(r, j) * y.get2(r, j);
                        }
                        for j in 0..n {
                            da.set2(r, j, y.get2(r, j) * (flow.get2(r, j) - dot));
                        }
                    }
                    self.accumulate(&mut flows, a, da);
                }
                Op::Sum(a) => {
                    let g = flow.scalar_value();
                    let da = Tensor::filled(self.value(a).shape(), g);
                    self.accumulate(&mut flows, a, da);
                }
                Op::Max(a) => {
                    let (idx, _) = max_with_index(self.value(a));
                    let mut da = Tensor::zeros(self.value(a).shape());
                    da.data_mut()[idx] = flow.scalar_value();
                    self.accumulate(&mut flows, a, da);
                }
                Op::RowSums(a) => {
                    let av = self.value(a);
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        let g = flow.data()[r];
                        for j in 0..n {
                            da.set2(r, j, g);
                        }
                    }
                    self.accumulate(&mut flows, a, da);
                }
                Op::ColMeans(a) => {
                    let av = self.value(a);
                    let (m, n) = (av.rows(), av.cols());
                    let inv = T::one() / cast::<T>(m as f64);
                    let mut da = Tensor::zeros(&[m, n]);
                    for r in 0..m {
                        for j in 0..n {
                            da.set2(r, j, flow.data()[j] * inv);
                        }
                    }
                    self.accumulate(&mut flows, a, da);
                }
                Op::AddRow(a, v) => {
                    let n = self.value(v).numel();
                    let mut dv = vec![T::zero(); n];
                    for r in 0..flow.rows() {
                        for (acc, &g) in dv.iter_mut().zip(flow.row(r)) {
                            *acc += g;
                        }
                    }
                    self.accumulate(&mut flows, a, flow);
                    self.accumulate(&mut flows, v, Tensor::from_vec(&[n], dv));
                }
                Op::MulRow(a, v) => {
                    let av = self.value(a);
                    let vv = self.value(v);
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = Tensor::zeros(&[m, n]);
                    let mut dv = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            let g = flow.get2(r, j);
                            da.set2(r, j, g * vv.data()[j]);
                            dv[j] += g * av.get2(r, j);
                        }
                    }
                    self.accumulate(&mut flows, a, da);
                    self.accumulate(&mut flows, v, Tensor::from_vec(&[n], dv));
                }
                Op::DivRow(a, v) => {
                    let av = self.value(a);
                    let vv = self.value(v);
                    let (m, n) = (av.rows(), av.cols());
                    let mut da = Tensor::zeros(&[m, n]);
                    let mut dv = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            let g = flow.get2(r, j);
                            let y = vv.data()[j];
                            da.set2(r, j, g / y);
                            dv[j] -= g * av.get2(r, j) / (y * y);
                        }
                    }
                    self.accumulate(&mut flows, a, da);
                    self.accumulate(&mut flows, v, Tensor::from_vec(&[n], dv));
                }
                Op::AddCol(a, v) => {
                    let m = self.value(v).numel();
                    let mut dv = vec![T::zero(); m];
                    for (r, acc) in dv.iter_mut().enumerate() {
                        for &g in flow.row(r) {
                            *acc += g;
                        }
                    }
                    self.accumulate(&mut flows, a, flow);
                    self.accumulate(&mut flows, v, Tensor::from_vec(&[m], dv));
                }
                Op::Outer(u, v) => {
                    let uv = self.value(u);
                    let vv = self.value(v);
                    let (m, n) = (uv.numel(), vv.numel());
                    let mut du = vec![T::zero(); m];
                    let mut dv = vec![T::zero(); n];
                    for r in 0..m {
                        for j in 0..n {
                            let g = flow.get2(r, j);
                            du[r] += g * vv.data()[j];
                            dv[j] += g * uv.data()[r];
                        }
                    }
                    self.accumulate(&mut flows, u, Tensor::from_vec(&[m], du));
                    self.accumulate(&mut flows, v, Tensor::from_vec(&[n], dv));
                }
                Op::DiagPart(a) => {
                    let n = self.value(a).rows();
                    let mut da = Tensor::zeros(&[n, n]);
                    for r in 0..n {
                        da.set2(r, r, flow.data()[r]);
                    }
                    self.accumulate(&mut flows, a, da);
                }
                Op::TriuSum(a) => {
                    let n = self.value(a).rows();
                    let g = flow.scalar_value();
                    let mut da = Tensor::zeros(&[n, n]);
                    for r in 0..n {
                        for j in (r + 1)..n {
                            da.set2(r, j, g);
                        }
                    }
                    self.accumulate(&mut flows, a, da);
                }
                Op::Select(a, idx) => {
                    let mut da = Tensor::zeros(self.value(a).shape());
                    da.data_mut()[idx] = flow.scalar_value();
                    self.accumulate(&mut flows, a, da);
                }
                Op::Reshape(a) => {
                    let da = flow.reshaped(self.value(a).shape());
                    self.accumulate(&mut flows, a, da);
                }
                Op::PairwiseSqDist(h) => {
                    let hv = self.value(h);
                    let (m, d) = (hv.rows(), hv.cols());
                    let two = cast::<T>(2.0);
                    let mut dh = Tensor::zeros(&[m, d]);
                    // d D_pj / d H_pf = 2 (H_pf - H_jf); both (p,j) and (j,p)
                    // entries of the flow contribute.
                    for p in 0..m {
                        for j in 0..m {
                            if p == j {
                                continue;
                            }
                            let g = flow.get2(p, j) + flow.get2(j, p);
                            if g == T::zero() {
                                continue;
                            }
                            let coeff = two * g;
                            let hp = &hv.data()[p * d..(p + 1) * d];
                            let hj = &hv.data()[j * d..(j + 1) * d];
                            let dp = &mut dh.data_mut()[p * d..(p + 1) * d];
                            for ((acc, &a), &b) in dp.iter_mut().zip(hp).zip(hj) {
                                *acc += coeff * (a - b);
                            }
                        }
                    }
                    self.accumulate(&mut flows, h, dh);
                }
                Op::Conv2d { input, weight, bias } => {
                    let (di, dw, db) = conv2d_backward(self.value(input), self.value(weight), &flow);
                    self.accumulate(&mut flows, input, di);
                    self.accumulate(&mut flows, weight, dw);
                    let _ = self.value(bias);
                    self.accumulate(&mut flows, bias, db);
                }
                Op::MaxPool2x2(a) => {
                    let da = maxpool2x2_backward(self.value(a), &flow);
                    self.accumulate(&mut flows, a, da);
                }
            }
        }
    }

    fn accumulate(&self, flows: &mut [Option<Tensor<T>>], target: NodeId, contribution: Tensor<T>) {
        if !self.nodes[target.0].tracked {
            return;
        }
        match &mut flows[target.0] {
            Some(existing) => add_into(existing, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, add: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), add.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(add.data()) {
        *a += b;
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

fn max_with_index<T: Scalar>(t: &Tensor<T>) -> (usize, T) {
    let mut idx = 0;
    let mut mx = t.data()[0];
    for (i, &v) in t.data().iter().enumerate().skip(1) {
        if v > mx {
            mx = v;
            idx = i;
        }
    }
    (idx, mx)
}

pub(crate) fn pairwise_sq_dist_values<T: Scalar>(h: &Tensor<T>) -> Tensor<T> {
    let (m, d) = (h.rows(), h.cols());
    assert!(m >= 2, "pairwise_sq_dist needs a batch of at least 2, got {}", m);
    let mut out = Tensor::zeros(&[m, m]);
    for i in 0..m {
        let ri = h.row(i);
        for j in (i + 1)..m {
            let rj = h.row(j);
            let mut s = T::zero();
            for f in 0..d {
                let diff = ri[f] - rj[f];
                s += diff * diff;
            }
            if s < T::zero() {
                s = T::zero();
            }
            out.set2(i, j, s);
            out.set2(j, i, s);
        }
    }
    out
}

pub(crate) fn conv2d_values<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let ishape = input.shape();
    let wshape = weight.shape();
    assert_eq!(ishape.len(), 4, "conv2d input must be [b,c,h,w], got {:?}", ishape);
    assert_eq!(wshape.len(), 4, "conv2d weight must be [f,c,kh,kw], got {:?}", wshape);
    let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (f, wc, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    assert_eq!(c, wc, "conv2d: input channels {} vs weight channels {}", c, wc);
    assert!(h >= kh && w >= kw, "conv2d: spatial {}x{} too small for {}x{} kernel", h, w, kh, kw);
    assert_eq!(bias.numel(), f, "conv2d: bias length {} vs {} filters", bias.numel(), f);
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let mut out = vec![T::zero(); b * f * oh * ow];
    for bi in 0..b {
        for fi in 0..f {
            let obase = ((bi * f) + fi) * oh * ow;
            let bv = bias.data()[fi];
            for v in &mut out[obase..obase + oh * ow] {
                *v = bv;
            }
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weight.data()[((fi * c + ci) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let irow = ((bi * c + ci) * h + oy + ky) * w + kx;
                            let orow = obase + oy * ow;
                            let src = &input.data()[irow..irow + ow];
                            let dst = &mut out[orow..orow + ow];
                            for (o, &x) in dst.iter_mut().zip(src) {
                                *o += wv * x;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, f, oh, ow], out)
}

fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    flow: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ishape = input.shape();
    let wshape = weight.shape();
    let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (f, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let (oh, ow) = (h - kh + 1, w - kw + 1);

    let mut dinput = Tensor::zeros(ishape);
    let mut dweight = Tensor::zeros(wshape);
    let mut dbias = vec![T::zero(); f];

    for bi in 0..b {
        for fi in 0..f {
            let obase = ((bi * f) + fi) * oh * ow;
            let gplane = &flow.data()[obase..obase + oh * ow];
            for &g in gplane {
                dbias[fi] += g;
            }
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = ((fi * c + ci) * kh + ky) * kw + kx;
                        let wv = weight.data()[widx];
                        let mut wacc = T::zero();
                        for oy in 0..oh {
                            let irow = ((bi * c + ci) * h + oy + ky) * w + kx;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow = &input.data()[irow..irow + ow];
                            let drow = &mut dinput.data_mut()[irow..irow + ow];
                            for ((dx, &g), &x) in drow.iter_mut().zip(grow).zip(xrow) {
                                *dx += wv * g;
                                wacc += g * x;
                            }
                        }
                        dweight.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    (dinput, dweight, Tensor::from_vec(&[f], dbias))
}

pub(crate) fn maxpool2x2_values<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let shape = input.shape();
    assert_eq!(shape.len(), 4, "maxpool2x2 input must be [b,c,h,w], got {:?}", shape);
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(h >= 2 && w >= 2, "maxpool2x2: spatial {}x{} too small", h, w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut mx = input.data()[((bi * c + ci) * h + oy * 2) * w + ox * 2];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = input.data()[((bi * c + ci) * h + oy * 2 + dy) * w + ox * 2 + dx];
                            if v > mx {
                                mx = v;
                            }
                        }
                    }
                    out.data_mut()[((bi * c + ci) * oh + oy) * ow + ox] = mx;
                }
            }
        }
    }
    out
}

fn maxpool2x2_backward<T: Scalar>(input: &Tensor<T>, flow: &Tensor<T>) -> Tensor<T> {
    let shape = input.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dinput = Tensor::zeros(shape);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    // Recompute the argmax; first maximum in scan order wins.
                    let mut best = (0usize, 0usize);
                    let mut mx = input.data()[((bi * c + ci) * h + oy * 2) * w + ox * 2];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = input.data()[((bi * c + ci) * h + oy * 2 + dy) * w + ox * 2 + dx];
                            if v > mx {
                                mx = v;
                                best = (dy, dx);
                            }
                        }
                    }
                    let g = flow.data()[((bi * c + ci) * oh + oy) * ow + ox];
                    let idx = ((bi * c + ci) * h + oy * 2 + best.0) * w + ox * 2 + best.1;
                    dinput.data_mut()[idx] += g;
                }
            }
        }
    }
    dinput
}

// ---------------------------------------------------------------------------
// Finite-difference verification oracle
// ---------------------------------------------------------------------------

/// Compare the tape gradient of a scalar function against central finite
/// differences, coordinate by coordinate, at 64-bit precision.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, step: f64) -> f64
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId + Sync,
{
    assert!(step > 0.0, "finite_diff_check: step must be positive");
    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let root = f(&mut tape, x);
    assert!(tape.value(root).is_scalar(), "finite_diff_check: f must return a scalar");
    tape.backward(root);
    let analytic = tape.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let eval = |p: Tensor<f64>| -> f64 {
        let mut t = Tape::new();
        let xx = t.constant(p);
        let r = f(&mut t, xx);
        t.value(r).scalar_value()
    };

    use rayon::prelude::*;
    (0..point.numel())
        .into_par_iter()
        .map(|i| {
            let mut plus = point.clone();
            plus.data_mut()[i] += step;
            let mut minus = point.clone();
            minus.data_mut()[i] -= step;
            let central = (eval(plus) - eval(minus)) / (2.0 * step);
            let a = analytic.data()[i];
            (a - central).abs() / a.abs().max(1.0)
        })
        .reduce(|| 0.0, f64::max)
}
