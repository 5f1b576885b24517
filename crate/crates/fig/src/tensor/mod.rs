//! Dense f64 tensors on a reverse-mode tape.
//!
//! Every forward op appends one node to the [`Tape`] and evaluates eagerly.
//! [`Tape::backward`] walks the nodes in reverse creation order (creation
//! order is already topological) and accumulates adjoints into every
//! `requires_grad` node. Tensors are rank 0 (`[]`), rank 1 (`[n]`) or rank 2
//! (`[rows, cols]`), stored row-major.

pub mod check;

use crate::error::{FigError, Result};

pub use check::grad_check;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op is expanded to the left shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    RhsScalar,
    RhsRow,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    SoftmaxRows(TensorId),
    Unary(TensorId, UnaryKind),
    Binary(TensorId, TensorId, BinaryKind, Broadcast),
    MeanRows(TensorId),
    SumRows(TensorId),
    SumAll(TensorId),
    ConcatRows(TensorId, TensorId),
    GatherRows(TensorId, Vec<usize>),
    SliceRows(TensorId, usize),
    SliceCols(TensorId, usize, usize),
    SegmentSumSorted(TensorId, Vec<usize>),
    Reshape(TensorId),
    Detach(TensorId),
}

impl Op {
    fn input_ids(&self) -> Vec<TensorId> {
        match *self {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Binary(a, b, _, _) | Op::ConcatRows(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Unary(a, _)
            | Op::MeanRows(a)
            | Op::SumRows(a)
            | Op::SumAll(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _, _)
            | Op::SegmentSumSorted(a, _)
            | Op::Reshape(a)
            | Op::Detach(a) => vec![a],
        }
    }
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed ops plus their values and gradients.
///
/// Single-use: after one `backward` the tape refuses a second call. Build a
/// fresh tape per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Rank 0 and rank 1 tensors are treated as one row for elementwise work.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => unreachable!("tensors are rank <= 2"),
    }
}

fn shape_err(op: &'static str, detail: String) -> FigError {
    FigError::Shape { op, detail }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn rg(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).shape
    }

    /// Forward value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(numel(self.shape(id)), 1, "value() needs a scalar");
        self.node(id).data[0]
    }

    /// Gradient buffer of `id`, populated by `backward` for every
    /// requires-grad node. `None` before backward or for constants.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.rg(id)
    }

    // ─── leaves ───

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.new_tensor(data, shape, true)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.new_tensor(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![], false, Op::Leaf)
    }

    fn new_tensor(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(shape_err(
                "leaf",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        if shape.len() > 2 {
            return Err(shape_err("leaf", format!("rank {} > 2: {:?}", shape.len(), shape)));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    // ─── linear algebra ───

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("need rank-2 operands, got {:?} x {:?}", sa, sb)));
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions differ: {:?} x {:?}", sa, sb)));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("need rank-2 operand, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![n, m], rg, Op::Transpose(a)))
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", format!("need rank-2 operand, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        if n == 0 {
            return Err(shape_err("softmax_rows", format!("empty rows: {:?}", s)));
        }
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![m, n], rg, Op::SoftmaxRows(a)))
    }

    // ─── elementwise ───

    fn unary(&mut self, a: TensorId, kind: UnaryKind) -> TensorId {
        let f = match kind {
            UnaryKind::Sigmoid => sigmoid_scalar,
            UnaryKind::Relu => |x: f64| if x > 0.0 { x } else { 0.0 },
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Sqrt => f64::sqrt,
        };
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, rg, Op::Unary(a, kind))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnaryKind::Log)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.unary(a, UnaryKind::Sqrt)
    }

    /// Multiply every entry by a constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let k = self.scalar(c);
        self.mul(a, k).expect("scalar broadcast never fails")
    }

    /// Add a constant to every entry.
    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let k = self.scalar(c);
        self.add(a, k).expect("scalar broadcast never fails")
    }

    fn binary(&mut self, a: TensorId, b: TensorId, kind: BinaryKind) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let commutative = matches!(kind, BinaryKind::Add | BinaryKind::Mul);
        // Broadcasting covers exactly the shapes the model uses: equal shapes,
        // a scalar operand, or a row vector against a matrix.
        let (a, b, sa, sb) = if sa != sb && commutative && broadcast_kind(&sb, &sa).is_some() && broadcast_kind(&sa, &sb).is_none() {
            (b, a, sb, sa)
        } else {
            (a, b, sa, sb)
        };
        let bc = if sa == sb {
            Broadcast::None
        } else {
            match broadcast_kind(&sa, &sb) {
                Some(bc) => bc,
                None => {
                    return Err(shape_err(
                        binary_name(kind),
                        format!("cannot broadcast {:?} with {:?}", sb, sa),
                    ))
                }
            }
        };
        let (rows, cols) = as_2d(&sa);
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let x = da[i * cols + j];
                let y = match bc {
                    Broadcast::None => db[i * cols + j],
                    Broadcast::RhsScalar => db[0],
                    Broadcast::RhsRow => db[j],
                };
                out[i * cols + j] = apply_binary(kind, x, y);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, sa, rg, Op::Binary(a, b, kind, bc)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(a, b, BinaryKind::Div)
    }

    // ─── reductions ───

    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.reduce_dims(a, "mean_rows")?;
        let src = self.data(a);
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                s += src[i * n + j];
            }
            out[j] = s / m as f64;
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![n], rg, Op::MeanRows(a)))
    }

    pub fn sum_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.reduce_dims(a, "sum_rows")?;
        let src = self.data(a);
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                s += src[i * n + j];
            }
            out[j] = s;
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![n], rg, Op::SumRows(a)))
    }

    fn reduce_dims(&self, a: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(shape_err(op, format!("need rank-2 operand, got {:?}", s)));
        }
        if s[0] == 0 {
            return Err(shape_err(op, format!("empty input: {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    /// Sum of every entry, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        if numel(self.shape(a)) == 0 {
            return Err(shape_err("sum_all", format!("empty input: {:?}", self.shape(a))));
        }
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![s], vec![], rg, Op::SumAll(a)))
    }

    // ─── structure ───

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err(
                "concat_rows",
                format!("column counts must match: {:?} vs {:?}", sa, sb),
            ));
        }
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![sa[0] + sb[0], sa[1]], rg, Op::ConcatRows(a, b)))
    }

    /// Rows of `a` at `idx`, in order. Duplicates allowed; adjoint scatters.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("gather_rows", format!("need rank-2 operand, got {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err(
                "gather_rows",
                format!("row index {} out of range for {:?}", bad, s),
            ));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![idx.len(), n], rg, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start > end || end > s[0] {
            return Err(shape_err(
                "slice_rows",
                format!("rows {}..{} out of range for {:?}", start, end, s),
            ));
        }
        let n = s[1];
        let out = self.data(a)[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, vec![end - start, n], rg, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start > end || end > s[1] {
            return Err(shape_err(
                "slice_cols",
                format!("cols {}..{} out of range for {:?}", start, end, s),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![m, end - start], rg, Op::SliceCols(a, start, end)))
    }

    /// `out[r, :] = Σ a[e, :]` over entries with `segments[e] == r`.
    ///
    /// Contributions to each output entry are summed in ascending value
    /// order, so the result depends only on the multiset of contributions,
    /// not on the order the rows arrive in. Graph message passing relies on
    /// this for bit-exact permutation equivariance.
    pub fn segment_sum_sorted(&mut self, a: TensorId, segments: &[usize], out_rows: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("segment_sum_sorted", format!("need rank-2 operand, got {:?}", s)));
        }
        if segments.len() != s[0] {
            return Err(shape_err(
                "segment_sum_sorted",
                format!("{} segment ids for {} rows", segments.len(), s[0]),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&r| r >= out_rows) {
            return Err(shape_err(
                "segment_sum_sorted",
                format!("segment id {} out of range for {} output rows", bad, out_rows),
            ));
        }
        let n = s[1];
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); out_rows];
        for (e, &r) in segments.iter().enumerate() {
            members[r].push(e);
        }
        let src = self.data(a);
        let mut out = vec![0.0; out_rows * n];
        let mut vals: Vec<f64> = Vec::new();
        for (r, rows) in members.iter().enumerate() {
            for j in 0..n {
                vals.clear();
                vals.extend(rows.iter().map(|&e| src[e * n + j]));
                vals.sort_by(|x, y| x.total_cmp(y));
                out[r * n + j] = vals.iter().sum();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, vec![out_rows, n], rg, Op::SegmentSumSorted(a, segments.to_vec())))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != numel(self.shape(a)) || shape.len() > 2 {
            return Err(shape_err(
                "reshape",
                format!("cannot reshape {:?} to {:?}", self.shape(a), shape),
            ));
        }
        let out = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, shape, rg, Op::Reshape(a)))
    }

    /// Copy of `a` cut off from the gradient graph.
    pub fn detach(&mut self, a: TensorId) -> TensorId {
        let out = self.data(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, false, Op::Detach(a))
    }

    // ─── backward ───

    /// Reverse sweep from `loss`, accumulating gradients into every
    /// requires-grad node. Single use per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(FigError::Argument(
                "backward already ran on this tape; build a fresh tape per pass".into(),
            ));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.rg(loss) {
            return Err(FigError::Argument(
                "loss is detached: no gradient path to any parameter".into(),
            ));
        }
        self.backward_done = true;
        for (i, node) in self.nodes.iter_mut().enumerate() {
            // creation order is the topological order the sweep relies on
            debug_assert!(node.op.input_ids().iter().all(|id| id.0 < i));
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = match self.nodes[i].grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            self.propagate(i, &op, &g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, delta: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.as_mut().expect("grad buffers allocated before sweep");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn propagate(&mut self, out_idx: usize, op: &Op, g: &[f64]) {
        let out_id = TensorId(out_idx);
        match *op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    // dA = g · Bᵀ
                    let db = self.data(b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            for l in 0..k {
                                da[i * k + l] += gij * db[l * n + j];
                            }
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.rg(b) {
                    // dB = Aᵀ · g
                    let dat = self.data(a);
                    let mut dbg = vec![0.0; k * n];
                    for i in 0..m {
                        for l in 0..k {
                            let ail = dat[i * k + l];
                            for j in 0..n {
                                dbg[l * n + j] += ail * g[i * n + j];
                            }
                        }
                    }
                    self.add_grad(b, &dbg);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (self.shape(out_id)[0], self.shape(out_id)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (self.shape(out_id)[0], self.shape(out_id)[1]);
                let y = self.data(out_id).to_vec();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Unary(a, kind) => {
                let x = self.data(a);
                let y = self.data(out_id);
                let da: Vec<f64> = match kind {
                    UnaryKind::Sigmoid => y.iter().zip(g).map(|(&yi, &gi)| gi * yi * (1.0 - yi)).collect(),
                    UnaryKind::Relu => x.iter().zip(g).map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 }).collect(),
                    UnaryKind::Exp => y.iter().zip(g).map(|(&yi, &gi)| gi * yi).collect(),
                    UnaryKind::Log => x.iter().zip(g).map(|(&xi, &gi)| gi / xi).collect(),
                    UnaryKind::Sqrt => y.iter().zip(g).map(|(&yi, &gi)| gi * 0.5 / yi).collect(),
                };
                self.add_grad(a, &da);
            }
            Op::Binary(a, b, kind, bc) => {
                let (rows, cols) = as_2d(self.shape(out_id));
                let da_vals = self.data(a).to_vec();
                let db_vals = self.data(b).to_vec();
                let rhs_at = |j: usize, idx: usize| -> f64 {
                    match bc {
                        Broadcast::None => db_vals[idx],
                        Broadcast::RhsScalar => db_vals[0],
                        Broadcast::RhsRow => db_vals[j],
                    }
                };
                if self.rg(a) {
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let idx = i * cols + j;
                            da[idx] = match kind {
                                BinaryKind::Add | BinaryKind::Sub => g[idx],
                                BinaryKind::Mul => g[idx] * rhs_at(j, idx),
                                BinaryKind::Div => g[idx] / rhs_at(j, idx),
                            };
                        }
                    }
                    self.add_grad(a, &da);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; db_vals.len()];
                    for i in 0..rows {
                        for j in 0..cols {
                            let idx = i * cols + j;
                            let target = match bc {
                                Broadcast::None => idx,
                                Broadcast::RhsScalar => 0,
                                Broadcast::RhsRow => j,
                            };
                            let contrib = match kind {
                                BinaryKind::Add => g[idx],
                                BinaryKind::Sub => -g[idx],
                                BinaryKind::Mul => g[idx] * da_vals[idx],
                                BinaryKind::Div => {
                                    let y = rhs_at(j, idx);
                                    -g[idx] * da_vals[idx] / (y * y)
                                }
                            };
                            db[target] += contrib;
                        }
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                self.add_grad(a, &da);
            }
            Op::SumRows(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n..(i + 1) * n].copy_from_slice(g);
                }
                self.add_grad(a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.data(a).len()];
                self.add_grad(a, &da);
            }
            Op::ConcatRows(a, b) => {
                let na = self.data(a).len();
                let (ga, gb) = g.split_at(na);
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::GatherRows(a, ref idx) => {
                let n = self.shape(a)[1];
                let mut da = vec![0.0; self.data(a).len()];
                for (o, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += g[o * n + j];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::SliceRows(a, start) => {
                let n = self.shape(a)[1];
                let mut da = vec![0.0; self.data(a).len()];
                da[start * n..start * n + g.len()].copy_from_slice(g);
                self.add_grad(a, &da);
            }
            Op::SliceCols(a, start, end) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let w = end - start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..w {
                        da[i * n + start + j] = g[i * w + j];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::SegmentSumSorted(a, ref segments) => {
                let n = self.shape(out_id)[1];
                let mut da = vec![0.0; self.data(a).len()];
                for (e, &r) in segments.iter().enumerate() {
                    for j in 0..n {
                        da[e * n + j] = g[r * n + j];
                    }
                }
                self.add_grad(a, &da);
            }
            Op::Reshape(a) => {
                self.add_grad(a, g);
            }
            Op::Detach(_) => {}
        }
    }
}

fn broadcast_kind(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    let (lr, lc) = as_2d(lhs);
    let (rr, rc) = as_2d(rhs);
    if rr * rc == 1 {
        Some(Broadcast::RhsScalar)
    } else if rr == 1 && rc == lc && lr >= 1 {
        Some(Broadcast::RhsRow)
    } else {
        None
    }
}

fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major m×k by k×n product, k-inner loop.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += ail * brow[j];
            }
        }
    }
    c
}
