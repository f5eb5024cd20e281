use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis. `Rows` collapses the row dimension (result `1×cols`),
/// `Cols` collapses the column dimension (result `rows×1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
    All,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var, Axis),
    Mean(Var, Axis),
    L2NormRows(Var),
    Concat(Vec<Var>, Axis),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Broadcast(Var),
    StopGradient(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Concat(parts, _) => parts.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sum(a, _)
            | Op::Mean(a, _)
            | Op::L2NormRows(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Broadcast(a)
            | Op::StopGradient(a) => vec![*a],
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::L2NormRows(..) => "l2norm_rows",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Broadcast(..) => "broadcast",
            Op::StopGradient(..) => "stop_gradient",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
}

/// Append-only record of a computation. Parents always precede children,
/// so reverse insertion order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Input treated as a fixed value. Gradients still reach it but nothing reads them.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.value(a).check_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Elementwise hinge `max(x, 0)`.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Var {
        let v = reduce_sum(self.value(a), axis);
        self.push(v, Op::Sum(a, axis))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let n = axis_len(t, axis) as f64;
        let v = reduce_sum(t, axis).map(|x| x / n);
        self.push(v, Op::Mean(a, axis))
    }

    /// Row-wise Euclidean norm, `rows×1`.
    pub fn l2norm_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let norms: Vec<f64> = t.row_iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let v = Tensor::new(t.rows(), 1, norms).expect("norm shape");
        self.push(v, Op::L2NormRows(a))
    }

    /// Concatenates along `Axis::Rows` (stack vertically) or `Axis::Cols`.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let [r0, c0] = self.shape(*first);
        let v = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != c0 {
                        return Err(Error::invalid(format!(
                            "concat: shape mismatch {:?} vs {:?}",
                            [r0, c0],
                            t.shape()
                        )));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != r0 {
                        return Err(Error::invalid(format!(
                            "concat: shape mismatch {:?} vs {:?}",
                            [r0, c0],
                            t.shape()
                        )));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(r0, cols, data)?
            }
            Axis::All => return Err(Error::invalid("concat: axis must be Rows or Cols")),
        };
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::invalid(format!(
                "slice_rows: range {start}..{end} out of bounds for shape {:?}",
                t.shape()
            )));
        }
        let v = Tensor::new(end - start, t.cols(), t.data()[start * t.cols()..end * t.cols()].to_vec())?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::invalid(format!(
                "slice_cols: range {start}..{end} out of bounds for shape {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in t.row_iter() {
            data.extend_from_slice(&r[start..end]);
        }
        let v = Tensor::new(t.rows(), end - start, data)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Expands size-1 dimensions of `a` to `[rows, cols]`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        let [ar, ac] = t.shape();
        if (ar != rows && ar != 1) || (ac != cols && ac != 1) {
            return Err(Error::invalid(format!("broadcast: shape mismatch {:?} vs {:?}", [ar, ac], [rows, cols])));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let sr = if ar == 1 { 0 } else { r };
            for c in 0..cols {
                let sc = if ac == 1 { 0 } else { c };
                data.push(t.get(sr, sc));
            }
        }
        let v = Tensor::new(rows, cols, data)?;
        Ok(self.push(v, Op::Broadcast(a)))
    }

    /// Broadcasts `a` to the shape of `like`.
    pub fn broadcast_like(&mut self, a: Var, like: Var) -> Result<Var> {
        let [r, c] = self.shape(like);
        if self.shape(a) == [r, c] {
            return Ok(a);
        }
        self.broadcast(a, r, c)
    }

    /// Identity in the forward pass; blocks all gradient flow to `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::StopGradient(a))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| {
            let [r, c] = self.shape(v);
            Tensor::zeros(r, c)
        })
    }

    /// Clears all gradient slots so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`. A second call without
    /// [`Tape::zero_grad`] is an error rather than silently accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::InvalidState("backward already ran on this tape; call zero_grad first".into()));
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::invalid(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            let contributions = self.vjp(idx, &op, &g)?;
            self.nodes[idx].grad = Some(g);
            for (parent, pg) in contributions {
                let slot = &mut self.nodes[parent.0].grad;
                match slot {
                    Some(existing) => existing.add_assign(&pg),
                    None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, op: &Op, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = &self.nodes[idx].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let res = match *op {
            Op::Leaf | Op::Constant | Op::StopGradient(_) => vec![],
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![(a, g.zip_map(val(b), |g, y| g * y)?), (b, g.zip_map(val(a), |g, x| g * x)?)],
            Op::Div(a, b) => {
                let ga = g.zip_map(val(b), |g, y| g / y)?;
                let gb = g.zip_map(out, |g, o| g * o)?.zip_map(val(b), |t, y| -t / y)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, c) => vec![(a, g.map(|x| c * x))],
            Op::AddScalar(a) => vec![(a, g.clone())],
            Op::MatMul(a, b) => vec![(a, g.matmul(&val(b).transpose())?), (b, val(a).transpose().matmul(g)?)],
            Op::Transpose(a) => vec![(a, g.transpose())],
            Op::Exp(a) => vec![(a, g.zip_map(out, |g, o| g * o)?)],
            Op::Log(a) => vec![(a, g.zip_map(val(a), |g, x| g / x)?)],
            Op::Sqrt(a) => vec![(a, g.zip_map(out, |g, o| g / (2.0 * o))?)],
            Op::Relu(a) => vec![(a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })?)],
            Op::Sum(a, axis) => vec![(a, expand(g, val(a).shape(), axis, 1.0))],
            Op::Mean(a, axis) => {
                let n = axis_len(val(a), axis) as f64;
                vec![(a, expand(g, val(a).shape(), axis, 1.0 / n))]
            }
            Op::L2NormRows(a) => {
                let x = val(a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = out.get(r, 0);
                    // zero subgradient at the origin
                    if n == 0.0 {
                        continue;
                    }
                    let gr = g.get(r, 0);
                    for c in 0..x.cols() {
                        ga.set(r, c, gr * x.get(r, c) / n);
                    }
                }
                vec![(a, ga)]
            }
            Op::Concat(ref parts, axis) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let [pr, pc] = val(p).shape();
                    let piece = match axis {
                        Axis::Rows => Tensor::new(pr, pc, g.data()[offset * pc..(offset + pr) * pc].to_vec())?,
                        _ => {
                            let mut data = Vec::with_capacity(pr * pc);
                            for r in g.row_iter() {
                                data.extend_from_slice(&r[offset..offset + pc]);
                            }
                            Tensor::new(pr, pc, data)?
                        }
                    };
                    offset += if axis == Axis::Rows { pr } else { pc };
                    res.push((p, piece));
                }
                res
            }
            Op::SliceRows(a, start) => {
                let x = val(a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                let w = x.cols();
                ga.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
                vec![(a, ga)]
            }
            Op::SliceCols(a, start) => {
                let x = val(a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                vec![(a, ga)]
            }
            Op::Broadcast(a) => {
                let [ar, ac] = val(a).shape();
                let mut ga = Tensor::zeros(ar, ac);
                for r in 0..g.rows() {
                    let sr = if ar == 1 { 0 } else { r };
                    for c in 0..g.cols() {
                        let sc = if ac == 1 { 0 } else { c };
                        let cur = ga.get(sr, sc);
                        ga.set(sr, sc, cur + g.get(r, c));
                    }
                }
                vec![(a, ga)]
            }
        };
        Ok(res)
    }
}

fn axis_len(t: &Tensor, axis: Axis) -> usize {
    match axis {
        Axis::Rows => t.rows(),
        Axis::Cols => t.cols(),
        Axis::All => t.len(),
    }
}

fn reduce_sum(t: &Tensor, axis: Axis) -> Tensor {
    match axis {
        Axis::All => Tensor::scalar(t.sum()),
        Axis::Rows => {
            let mut out = vec![0.0; t.cols()];
            for r in t.row_iter() {
                for (o, x) in out.iter_mut().zip(r) {
                    *o += x;
                }
            }
            Tensor::row_vector(out)
        }
        Axis::Cols => {
            let sums = t.row_iter().map(|r| r.iter().sum()).collect();
            Tensor::new(t.rows(), 1, sums).expect("reduce shape")
        }
    }
}

/// Spreads a reduced gradient back over the reduced axis, scaled by `c`.
fn expand(g: &Tensor, shape: [usize; 2], axis: Axis, c: f64) -> Tensor {
    let [rows, cols] = shape;
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        for col in 0..cols {
            let v = match axis {
                Axis::All => g.get(0, 0),
                Axis::Rows => g.get(0, col),
                Axis::Cols => g.get(r, 0),
            };
            out.set(r, col, c * v);
        }
    }
    out
}
