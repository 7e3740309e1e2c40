use super::{NumError, Shape, Tensor, MASK_NEG, MASK_THRESHOLD};

/// Handle to a node on a [`Tape`]. Cheap to copy; only valid for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Additive attention mask: 0.0 where a position is visible, a large
/// negative constant where it is not. Masked positions are excluded from
/// the softmax entirely (their outputs are exactly 0), which is what makes
/// prefix causality bitwise rather than approximate.
#[derive(Debug, Clone)]
pub struct Mask {
    pub shape: Shape,
    add: Vec<f64>,
}

impl Mask {
    /// Lower-triangular mask over `k` positions: position `i` sees `j <= i`.
    pub fn causal(k: usize) -> Mask {
        let mut add = vec![0.0; k * k];
        for i in 0..k {
            for j in (i + 1)..k {
                add[i * k + j] = MASK_NEG;
            }
        }
        Mask { shape: Shape::new(k, k), add }
    }

    pub fn from_visible(rows: usize, cols: usize, visible: impl Fn(usize, usize) -> bool) -> Mask {
        let mut add = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                if !visible(r, c) {
                    add[r * cols + c] = MASK_NEG;
                }
            }
        }
        Mask { shape: Shape::new(rows, cols), add }
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.add[row * self.shape.cols + col] <= MASK_THRESHOLD
    }

    /// Additive value at (row, col): exactly 0.0 or the -inf stand-in.
    pub fn additive(&self, row: usize, col: usize) -> f64 {
        self.add[row * self.shape.cols + col]
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Broadcast-add a `[1, m]` row onto every row of an `[n, m]` matrix.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Powf(Var, f64),
    Clamp { x: Var, lo: f64, hi: f64 },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedSoftmax { x: Var, mask: Option<Mask> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    SumAll(Var),
}

struct Node {
    op: Op,
    shape: Shape,
    values: Vec<f64>,
    requires_grad: bool,
}

/// Record of a forward computation. Ops push nodes; [`Tape::backward`]
/// replays them in reverse, accumulating adjoints. Nodes only ever refer to
/// earlier nodes, so reverse insertion order is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Shape, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(values.len(), shape.len());
        self.nodes.push(Node { op, shape, values, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).values
    }

    pub fn value_at(&self, v: Var, row: usize, col: usize) -> f64 {
        let n = self.node(v);
        n.values[row * n.shape.cols + col]
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v).len(), 1);
        self.node(v).values[0]
    }

    /// Gradient of the most recent `backward` target w.r.t. leaf `v`.
    /// `None` if `v` is not a leaf that requires grad or received none.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, shape: Shape, values: Vec<f64>, requires_grad: bool) -> Result<Var, NumError> {
        if values.len() != shape.len() {
            return Err(NumError::ValueCount { op: "leaf", shape, got: values.len() });
        }
        Ok(self.push(Op::Leaf, shape, values, requires_grad))
    }

    pub fn leaf_from(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape, t.values.clone(), t.requires_grad)
    }

    /// A leaf that never receives gradient (inputs, targets, masks-as-data).
    pub fn constant(&mut self, shape: Shape, values: Vec<f64>) -> Result<Var, NumError> {
        if values.len() != shape.len() {
            return Err(NumError::ValueCount { op: "constant", shape, got: values.len() });
        }
        Ok(self.push(Op::Leaf, shape, values, false))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, Shape::new(1, 1), vec![value], false)
    }

    // ---- structural ops --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(NumError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let out = matmul_nn(self.values(a), self.values(b), sa.rows, sa.cols, sb.cols);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Matmul(a, b), Shape::new(sa.rows, sb.cols), out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let vals = self.values(a);
        let mut out = vec![0.0; s.len()];
        for r in 0..s.rows {
            for c in 0..s.cols {
                out[c * s.rows + r] = vals[r * s.cols + c];
            }
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::Transpose(a), Shape::new(s.cols, s.rows), out, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::EmptyInput { op: "concat_rows" });
        }
        let cols = self.shape(parts[0]).cols;
        let mut rows = 0;
        let mut values = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s.cols != cols {
                return Err(NumError::ShapeMismatch { op: "concat_rows", lhs: Shape::new(rows, cols), rhs: s });
            }
            rows += s.rows;
            values.extend_from_slice(self.values(p));
            rg |= self.node(p).requires_grad;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Shape::new(rows, cols), values, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(NumError::EmptyInput { op: "concat_cols" });
        }
        let rows = self.shape(parts[0]).rows;
        let mut cols = 0;
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s.rows != rows {
                return Err(NumError::ShapeMismatch { op: "concat_cols", lhs: Shape::new(rows, cols), rhs: s });
            }
            cols += s.cols;
            rg |= self.node(p).requires_grad;
        }
        let mut values = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let s = self.shape(p);
            let vals = self.values(p);
            for r in 0..rows {
                values[r * cols + offset..r * cols + offset + s.cols]
                    .copy_from_slice(&vals[r * s.cols..(r + 1) * s.cols]);
            }
            offset += s.cols;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Shape::new(rows, cols), values, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let s = self.shape(x);
        if start + len > s.cols {
            return Err(NumError::IndexOutOfBounds { op: "slice_cols", index: start + len, bound: s.cols });
        }
        let vals = self.values(x);
        let mut out = Vec::with_capacity(s.rows * len);
        for r in 0..s.rows {
            out.extend_from_slice(&vals[r * s.cols + start..r * s.cols + start + len]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::SliceCols { x, start }, Shape::new(s.rows, len), out, rg))
    }

    /// Select rows by index; duplicates allowed. Backward scatters-adds.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumError> {
        let s = self.shape(x);
        let mut out = Vec::with_capacity(indices.len() * s.cols);
        for &i in indices {
            if i >= s.rows {
                return Err(NumError::IndexOutOfBounds { op: "gather_rows", index: i, bound: s.rows });
            }
            out.extend_from_slice(&self.values(x)[i * s.cols..(i + 1) * s.cols]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            Op::GatherRows { x, indices: indices.to_vec() },
            Shape::new(indices.len(), s.cols),
            out,
            rg,
        ))
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var, NumError> {
        self.gather_rows(x, &[index])
    }

    // ---- arithmetic ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumError::ShapeMismatch { op: name, lhs: sa, rhs: sb });
        }
        let out: Vec<f64> =
            self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(op, sa, out, rg))
    }

    /// `[n, m] + [1, m]`, the bias half of an affine map.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.rows != 1 || sb.cols != sa.cols {
            return Err(NumError::ShapeMismatch { op: "add_row", lhs: sa, rhs: sb });
        }
        let bvals = self.values(bias).to_vec();
        let mut out = self.values(a).to_vec();
        for r in 0..sa.rows {
            for c in 0..sa.cols {
                out[r * sa.cols + c] += bvals[c];
            }
        }
        let rg = self.node(a).requires_grad || self.node(bias).requires_grad;
        Ok(self.push(Op::AddRow(a, bias), sa, out, rg))
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.values(a).iter().map(|&x| x * c).collect();
        let (s, rg) = (self.shape(a), self.node(a).requires_grad);
        self.push(Op::Scale(a, c), s, out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.values(a).iter().map(|&x| x + c).collect();
        let (s, rg) = (self.shape(a), self.node(a).requires_grad);
        self.push(Op::AddScalar(a), s, out, rg)
    }

    // ---- elementwise nonlinearities ---------------------------------------

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_stable, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus_stable, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; caller guarantees positive inputs.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `x^p` for positive-domain x (used with fractional exponents).
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.values(a).iter().map(|&x| f(x)).collect();
        let (s, rg) = (self.shape(a), self.node(a).requires_grad);
        self.push(op, s, out, rg)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.values(a).iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumAll(a), Shape::new(1, 1), vec![total], rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.shape(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise max over rows: `[n, m] -> [1, m]`. Ties resolve to the
    /// first (lowest-index) row, which also receives the gradient.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.shape(x);
        if s.rows == 0 {
            return Err(NumError::InvalidShape { op: "max_pool_rows", shape: s });
        }
        let vals = self.values(x);
        let mut out = vec![f64::NEG_INFINITY; s.cols];
        let mut argmax = vec![0usize; s.cols];
        for r in 0..s.rows {
            for c in 0..s.cols {
                let v = vals[r * s.cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::MaxPoolRows { x, argmax }, Shape::new(1, s.cols), out, rg))
    }

    // ---- normalization and attention --------------------------------------

    /// Row-wise layer normalization with learned gain/bias (`[1, m]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let s = self.shape(x);
        let (sg, sb) = (self.shape(gain), self.shape(bias));
        if sg.rows != 1 || sg.cols != s.cols {
            return Err(NumError::ShapeMismatch { op: "layer_norm", lhs: s, rhs: sg });
        }
        if sb.rows != 1 || sb.cols != s.cols {
            return Err(NumError::ShapeMismatch { op: "layer_norm", lhs: s, rhs: sb });
        }
        let m = s.cols as f64;
        let mut xhat = vec![0.0; s.len()];
        let mut inv_std = vec![0.0; s.rows];
        let mut out = vec![0.0; s.len()];
        {
            let xv = self.values(x);
            let gv = self.values(gain);
            let bv = self.values(bias);
            for r in 0..s.rows {
                let row = &xv[r * s.cols..(r + 1) * s.cols];
                let mean = row.iter().sum::<f64>() / m;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..s.cols {
                    let xh = (row[c] - mean) * is;
                    xhat[r * s.cols + c] = xh;
                    out[r * s.cols + c] = gv[c] * xh + bv[c];
                }
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gain).requires_grad
            || self.node(bias).requires_grad;
        Ok(self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, s, out, rg))
    }

    /// Row-wise softmax with an optional additive mask. Masked positions are
    /// excluded from the max and the normalizing sum and their outputs are
    /// exactly 0, so a row's result never depends on what it cannot see.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var, NumError> {
        let s = self.shape(x);
        if let Some(m) = mask {
            if m.shape != s {
                return Err(NumError::ShapeMismatch { op: "masked_softmax", lhs: s, rhs: m.shape });
            }
        }
        let vals = self.values(x);
        let mut out = vec![0.0; s.len()];
        for r in 0..s.rows {
            let mut mx = f64::NEG_INFINITY;
            let mut any = false;
            for c in 0..s.cols {
                if mask.map_or(false, |m| m.is_masked(r, c)) {
                    continue;
                }
                any = true;
                mx = mx.max(vals[r * s.cols + c]);
            }
            if !any {
                return Err(NumError::FullyMaskedRow { row: r });
            }
            let mut sum = 0.0;
            for c in 0..s.cols {
                if mask.map_or(false, |m| m.is_masked(r, c)) {
                    continue;
                }
                let e = (vals[r * s.cols + c] - mx).exp();
                out[r * s.cols + c] = e;
                sum += e;
            }
            for c in 0..s.cols {
                if mask.map_or(false, |m| m.is_masked(r, c)) {
                    out[r * s.cols + c] = 0.0;
                } else {
                    out[r * s.cols + c] /= sum;
                }
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::MaskedSoftmax { x, mask: mask.cloned() }, s, out, rg))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q: [n, d]`, `k: [m, d]`, `v: [m, d]`. Heads split the width evenly;
    /// per-head outputs are concatenated back to `[n, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Mask>,
        heads: usize,
    ) -> Result<Var, NumError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.cols != sk.cols || sk.cols != sv.cols {
            return Err(NumError::ShapeMismatch { op: "attention", lhs: sq, rhs: sk });
        }
        if sk.rows != sv.rows {
            return Err(NumError::ShapeMismatch { op: "attention", lhs: sk, rhs: sv });
        }
        if heads == 0 || sq.cols % heads != 0 {
            return Err(NumError::HeadSplit { dim: sq.cols, heads });
        }
        let dh = sq.cols / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh);
            let scores = self.matmul(qh, kt)?;
            let scaled = self.scale(scores, inv_sqrt);
            let weights = self.masked_softmax(scaled, mask)?;
            outs.push(self.matmul(weights, vh)?);
        }
        self.concat_cols(&outs)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients land on leaf nodes
    /// and are read back with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        let loss_shape = self.shape(loss);
        if loss_shape.len() != 1 {
            return Err(NumError::NonScalarLoss(loss_shape));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        adj[loss.0] = Some(vec![1.0]);
        self.grads.clear();
        self.grads.resize_with(n, || None);

        for i in (0..=loss.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {
                    self.grads[i] = Some(d);
                    continue;
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    if self.nodes[a.0].requires_grad {
                        let da = matmul_nt(&d, self.values(b), sa.rows, sb.cols, sa.cols);
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = matmul_tn(self.values(a), &d, sa.rows, sa.cols, sb.cols);
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let s = self.shape(a);
                    let mut da = vec![0.0; s.len()];
                    for r in 0..s.rows {
                        for c in 0..s.cols {
                            da[r * s.cols + c] = d[c * s.rows + r];
                        }
                    }
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut adj[a.0], &d);
                    }
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut adj[b.0], &d);
                    }
                }
                Op::AddRow(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let s = self.shape(a);
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut adj[a.0], &d);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; s.cols];
                        for r in 0..s.rows {
                            for c in 0..s.cols {
                                db[c] += d[r * s.cols + c];
                            }
                        }
                        accumulate(&mut adj[bias.0], &db);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut adj[a.0], &d);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = d.iter().map(|&x| -x).collect();
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> =
                            d.iter().zip(self.values(b)).map(|(&g, &y)| g * y).collect();
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> =
                            d.iter().zip(self.values(a)).map(|(&g, &x)| g * x).collect();
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> =
                            d.iter().zip(self.values(b)).map(|(&g, &y)| g / y).collect();
                        accumulate(&mut adj[a.0], &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let out = &self.nodes[i].values;
                        let db: Vec<f64> = d
                            .iter()
                            .zip(out.iter().zip(self.values(b)))
                            .map(|(&g, (&o, &y))| -g * o / y)
                            .collect();
                        accumulate(&mut adj[b.0], &db);
                    }
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da: Vec<f64> = d.iter().map(|&g| g * c).collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::AddScalar(a) => {
                    accumulate(&mut adj[a.0], &d);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let out = &self.nodes[i].values;
                    let da: Vec<f64> =
                        d.iter().zip(out).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let out = &self.nodes[i].values;
                    let da: Vec<f64> =
                        d.iter().zip(out).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let da: Vec<f64> = d
                        .iter()
                        .zip(self.values(a))
                        .map(|(&g, &x)| g * sigmoid_stable(x))
                        .collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Exp(a) => {
                    let a = *a;
                    let out = &self.nodes[i].values;
                    let da: Vec<f64> = d.iter().zip(out).map(|(&g, &y)| g * y).collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Log(a) => {
                    let a = *a;
                    let da: Vec<f64> =
                        d.iter().zip(self.values(a)).map(|(&g, &x)| g / x).collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Abs(a) => {
                    let a = *a;
                    let da: Vec<f64> = d
                        .iter()
                        .zip(self.values(a))
                        .map(|(&g, &x)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da: Vec<f64> = d
                        .iter()
                        .zip(self.values(a))
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Powf(a, p) => {
                    let (a, p) = (*a, *p);
                    let da: Vec<f64> = d
                        .iter()
                        .zip(self.values(a))
                        .map(|(&g, &x)| g * p * x.powf(p - 1.0))
                        .collect();
                    accumulate(&mut adj[a.0], &da);
                }
                Op::Clamp { x, lo, hi } => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let da: Vec<f64> = d
                        .iter()
                        .zip(self.values(x))
                        .map(|(&g, &v)| if v > lo && v < hi { g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[x.0], &da);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let s = self.shape(x);
                    let m = s.cols as f64;
                    let gv = self.values(gain).to_vec();
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; s.len()];
                        for r in 0..s.rows {
                            let drow = &d[r * s.cols..(r + 1) * s.cols];
                            let xh = &xhat[r * s.cols..(r + 1) * s.cols];
                            let mut mean_g = 0.0;
                            let mut mean_gx = 0.0;
                            for c in 0..s.cols {
                                let g = drow[c] * gv[c];
                                mean_g += g;
                                mean_gx += g * xh[c];
                            }
                            mean_g /= m;
                            mean_gx /= m;
                            for c in 0..s.cols {
                                let g = drow[c] * gv[c];
                                dx[r * s.cols + c] = inv_std[r] * (g - mean_g - xh[c] * mean_gx);
                            }
                        }
                        accumulate(&mut adj[x.0], &dx);
                    }
                    if self.nodes[gain.0].requires_grad {
                        let mut dg = vec![0.0; s.cols];
                        for r in 0..s.rows {
                            for c in 0..s.cols {
                                dg[c] += d[r * s.cols + c] * xhat[r * s.cols + c];
                            }
                        }
                        accumulate(&mut adj[gain.0], &dg);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; s.cols];
                        for r in 0..s.rows {
                            for c in 0..s.cols {
                                db[c] += d[r * s.cols + c];
                            }
                        }
                        accumulate(&mut adj[bias.0], &db);
                    }
                }
                Op::MaskedSoftmax { x, mask } => {
                    let x = *x;
                    let s = self.shape(x);
                    let y = &self.nodes[i].values;
                    let mut dx = vec![0.0; s.len()];
                    for r in 0..s.rows {
                        let mut dot = 0.0;
                        for c in 0..s.cols {
                            if mask.as_ref().map_or(false, |m| m.is_masked(r, c)) {
                                continue;
                            }
                            dot += d[r * s.cols + c] * y[r * s.cols + c];
                        }
                        for c in 0..s.cols {
                            if mask.as_ref().map_or(false, |m| m.is_masked(r, c)) {
                                continue;
                            }
                            let idx = r * s.cols + c;
                            dx[idx] = y[idx] * (d[idx] - dot);
                        }
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let sp = self.shape(p);
                        let chunk = &d[offset..offset + sp.len()];
                        if self.nodes[p.0].requires_grad {
                            accumulate(&mut adj[p.0], chunk);
                        }
                        offset += sp.len();
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let total_cols = self.nodes[i].shape.cols;
                    let rows = self.nodes[i].shape.rows;
                    let mut offset = 0;
                    for p in parts {
                        let sp = self.shape(p);
                        if self.nodes[p.0].requires_grad {
                            let mut dp = vec![0.0; sp.len()];
                            for r in 0..rows {
                                dp[r * sp.cols..(r + 1) * sp.cols].copy_from_slice(
                                    &d[r * total_cols + offset..r * total_cols + offset + sp.cols],
                                );
                            }
                            accumulate(&mut adj[p.0], &dp);
                        }
                        offset += sp.cols;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let sx = self.shape(x);
                    let out_cols = self.nodes[i].shape.cols;
                    let mut dx = vec![0.0; sx.len()];
                    for r in 0..sx.rows {
                        dx[r * sx.cols + start..r * sx.cols + start + out_cols]
                            .copy_from_slice(&d[r * out_cols..(r + 1) * out_cols]);
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::GatherRows { x, indices } => {
                    let x = *x;
                    let indices = indices.clone();
                    let sx = self.shape(x);
                    let mut dx = vec![0.0; sx.len()];
                    for (out_r, &src_r) in indices.iter().enumerate() {
                        for c in 0..sx.cols {
                            dx[src_r * sx.cols + c] += d[out_r * sx.cols + c];
                        }
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::MaxPoolRows { x, argmax } => {
                    let x = *x;
                    let argmax = argmax.clone();
                    let sx = self.shape(x);
                    let mut dx = vec![0.0; sx.len()];
                    for (c, &r) in argmax.iter().enumerate() {
                        dx[r * sx.cols + c] += d[c];
                    }
                    accumulate(&mut adj[x.0], &dx);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let sa = self.shape(a);
                    let da = vec![d[0]; sa.len()];
                    accumulate(&mut adj[a.0], &da);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.len(), delta.len());
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// C = A·B with A `[n, k]`, B `[k, m]`, loop-ordered for row-major access.
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C = A·Bᵀ with A `[n, m]`, B `[k, m]` — row-dot-row, used for dC·Bᵀ.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// C = Aᵀ·B with A `[n, k]`, B `[n, m]` — used for Aᵀ·dC.
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (t, &av) in arow.iter().enumerate() {
            let orow = &mut out[t * m..(t + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}
