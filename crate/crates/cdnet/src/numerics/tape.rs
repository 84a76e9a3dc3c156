//! Reverse-mode gradient tape over whole tensors.
//!
//! A [`Tape`] records every primitive operation of a forward pass as a node in
//! an append-only list; parent indices always precede children, so a single
//! reverse sweep computes exact gradients of a scalar root with respect to
//! every node. A leaf used k times in the forward pass accumulates the sum of
//! its k partial contributions, which is what cascade parameter sharing
//! relies on.
//!
//! A tape instance is single-threaded; run independent tapes for parallel
//! work.

use super::tensor::{ensure_finite, Shape, Tensor};
use super::Real;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// `M x (+ b)`.
    Linear { m: NodeId, x: NodeId, b: Option<NodeId> },
    Relu { x: NodeId },
    /// Elementwise `max(x,0) + slope * min(x,0)` with a scalar slope.
    PRelu { x: NodeId, slope: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Scalar node times tensor node.
    ScaleBy { s: NodeId, v: NodeId },
    /// Constant times tensor node.
    ScaleConst { x: NodeId, c: Real },
    Concat { a: NodeId, b: NodeId },
    /// `-log softmax(logits)[label]`, computed with max subtraction.
    SoftmaxCrossEntropy { logits: NodeId, label: usize },
    /// `sum_i (a_i - b_i)^2`.
    SquaredL2 { a: NodeId, b: NodeId },
    /// Arithmetic mean of same-shaped tensors.
    MeanTensors { items: Vec<NodeId> },
    /// Scalars stacked into a vector.
    StackScalars { items: Vec<NodeId> },
    /// `sum_i c_i * s_i` over scalar nodes with constant coefficients.
    AffineScalars { terms: Vec<(Real, NodeId)> },
    /// Scalar square root; subgradient 0 at 0.
    Sqrt { x: NodeId },
    /// Length-1 vector reinterpreted as a scalar.
    UnitToScalar { x: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<Real>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value (parameter or constant data).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent `backward` root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Result<&[Real]> {
        match &self.grads {
            Some(g) => Ok(&g[id.0]),
            None => Err(Error::Internal("grad() before backward()".into())),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        // New ops invalidate previously computed gradients.
        self.grads = None;
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, data: Vec<Real>, shape: Shape, op: Op, name: &str) -> Result<NodeId> {
        let value = Tensor::from_parts(data, shape, name)?;
        Ok(self.push(value, op))
    }

    fn vector_len(&self, id: NodeId, op: &'static str) -> Result<usize> {
        match self.value(id).shape() {
            Shape::Vector(d) => Ok(d),
            other => Err(Error::ShapeMismatch { op, details: format!("expected vector, got {other}") }),
        }
    }

    fn scalar_value(&self, id: NodeId, op: &'static str) -> Result<Real> {
        match self.value(id).shape() {
            Shape::Scalar => Ok(self.value(id).data()[0]),
            other => Err(Error::ShapeMismatch { op, details: format!("expected scalar, got {other}") }),
        }
    }

    /// `M x (+ b)`: matrix-vector product with optional bias.
    pub fn linear(&mut self, m: NodeId, x: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (rows, cols) = match self.value(m).shape() {
            Shape::Matrix { rows, cols } => (rows, cols),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    details: format!("expected matrix, got {other}"),
                })
            }
        };
        let xd = self.vector_len(x, "linear")?;
        if xd != cols {
            return Err(Error::ShapeMismatch {
                op: "linear",
                details: format!("matrix[{rows}x{cols}] applied to vector[{xd}]"),
            });
        }
        if let Some(b) = b {
            let bd = self.vector_len(b, "linear")?;
            if bd != rows {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    details: format!("bias vector[{bd}] added to vector[{rows}]"),
                });
            }
        }
        let mv = self.value(m).data();
        let xv = self.value(x).data();
        let mut out = match b {
            Some(b) => self.value(b).data().to_vec(),
            None => vec![0.0; rows],
        };
        for r in 0..rows {
            let row = &mv[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for c in 0..cols {
                acc += row[c] * xv[c];
            }
            out[r] += acc;
        }
        self.record(out, Shape::Vector(rows), Op::Linear { m, x, b }, "linear")
    }

    /// Elementwise `max(x, 0)`; subgradient at 0 is 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let out: Vec<Real> = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        self.record(out, shape, Op::Relu { x }, "relu")
    }

    /// Elementwise `max(x,0) + slope * min(x,0)` with a shared scalar slope.
    /// The gradient at exactly 0 uses the positive branch (slope 1).
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let a = self.scalar_value(slope, "prelu")?;
        let shape = self.value(x).shape();
        let out: Vec<Real> =
            self.value(x).data().iter().map(|&v| if v > 0.0 { v } else { a * v }).collect();
        self.record(out, shape, Op::PRelu { x, slope }, "prelu")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    fn elementwise_pair(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(Real, Real) -> Real,
        op: Op,
    ) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: name, details: format!("{sa} vs {sb}") });
        }
        let out: Vec<Real> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.record(out, sa, op, name)
    }

    /// Scalar node times tensor node.
    pub fn scale_by(&mut self, s: NodeId, v: NodeId) -> Result<NodeId> {
        let sv = self.scalar_value(s, "scale_by")?;
        let shape = self.value(v).shape();
        let out: Vec<Real> = self.value(v).data().iter().map(|&x| sv * x).collect();
        self.record(out, shape, Op::ScaleBy { s, v }, "scale_by")
    }

    /// Constant times tensor node.
    pub fn scale_const(&mut self, x: NodeId, c: Real) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let out: Vec<Real> = self.value(x).data().iter().map(|&v| c * v).collect();
        self.record(out, shape, Op::ScaleConst { x, c }, "scale_const")
    }

    /// Concatenation `[a, b]` of two vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = self.vector_len(a, "concat")?;
        let db = self.vector_len(b, "concat")?;
        let mut out = Vec::with_capacity(da + db);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        self.record(out, Shape::Vector(da + db), Op::Concat { a, b }, "concat")
    }

    /// `-log softmax(logits)[label]`, stable for logit magnitudes up to 1e6.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let c = self.vector_len(logits, "softmax_cross_entropy")?;
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let z = self.value(logits).data();
        let m = z.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let sum_exp: Real = z.iter().map(|&v| (v - m).exp()).sum();
        let loss = m + sum_exp.ln() - z[label];
        self.record(
            vec![loss],
            Shape::Scalar,
            Op::SoftmaxCrossEntropy { logits, label },
            "softmax_cross_entropy",
        )
    }

    /// `sum_i (a_i - b_i)^2`.
    pub fn squared_l2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::ShapeMismatch { op: "squared_l2", details: format!("{sa} vs {sb}") });
        }
        let out: Real = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        self.record(vec![out], Shape::Scalar, Op::SquaredL2 { a, b }, "squared_l2")
    }

    /// Arithmetic mean of same-shaped tensors (class centers).
    pub fn mean_tensors(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let first = *items.first().ok_or_else(|| Error::ShapeMismatch {
            op: "mean_tensors",
            details: "empty item list".into(),
        })?;
        let shape = self.value(first).shape();
        for &it in items {
            if self.value(it).shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "mean_tensors",
                    details: format!("{} vs {shape}", self.value(it).shape()),
                });
            }
        }
        let k = items.len() as Real;
        let mut out = vec![0.0; shape.len()];
        for &it in items {
            for (o, &v) in out.iter_mut().zip(self.value(it).data()) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= k;
        }
        self.record(out, shape, Op::MeanTensors { items: items.to_vec() }, "mean_tensors")
    }

    /// Stack scalar nodes into a vector.
    pub fn stack_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::with_capacity(items.len());
        for &it in items {
            out.push(self.scalar_value(it, "stack_scalars")?);
        }
        let d = out.len();
        self.record(out, Shape::Vector(d), Op::StackScalars { items: items.to_vec() }, "stack_scalars")
    }

    /// `sum_i c_i * s_i` over scalar nodes with constant coefficients.
    pub fn affine_scalars(&mut self, terms: &[(Real, NodeId)]) -> Result<NodeId> {
        let mut acc = 0.0;
        for &(c, s) in terms {
            acc += c * self.scalar_value(s, "affine_scalars")?;
        }
        self.record(vec![acc], Shape::Scalar, Op::AffineScalars { terms: terms.to_vec() }, "affine_scalars")
    }

    /// Scalar square root; subgradient at 0 defined as 0.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.scalar_value(x, "sqrt")?;
        if v < 0.0 {
            return Err(Error::NonFinite { context: "sqrt of negative scalar".into() });
        }
        self.record(vec![v.sqrt()], Shape::Scalar, Op::Sqrt { x }, "sqrt")
    }

    /// Reinterpret a length-1 vector node as a scalar node.
    pub fn unit_to_scalar(&mut self, x: NodeId) -> Result<NodeId> {
        match self.value(x).shape() {
            Shape::Vector(1) => {}
            other => {
                return Err(Error::ShapeMismatch {
                    op: "unit_to_scalar",
                    details: format!("expected vector[1], got {other}"),
                })
            }
        }
        let v = self.value(x).data()[0];
        self.record(vec![v], Shape::Scalar, Op::UnitToScalar { x }, "unit_to_scalar")
    }

    /// Backpropagate from a scalar root, accumulating gradients for every
    /// node. Multiple calls are allowed; each resets previous gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).shape() != Shape::Scalar {
            return Err(Error::ShapeMismatch {
                op: "backward",
                details: format!("root must be scalar, got {}", self.value(root).shape()),
            });
        }
        let mut grads: Vec<Vec<Real>> =
            self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[root.0][0] = 1.0;

        // Children always come after parents, so one reverse sweep suffices;
        // by node `i`'s turn its own gradient is final.
        for i in (0..self.nodes.len()).rev() {
            let go = std::mem::take(&mut grads[i]);
            if go.iter().any(|&g| g != 0.0) {
                self.backward_step(i, &go, &mut grads);
            }
            grads[i] = go;
        }
        ensure_finite(
            &grads.iter().flat_map(|g| g.iter().copied()).collect::<Vec<_>>(),
            "backward gradients",
        )?;
        self.grads = Some(grads);
        Ok(())
    }

    fn backward_step(&self, i: usize, go: &[Real], grads: &mut [Vec<Real>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { m, x, b } => {
                let (rows, cols) = match self.value(*m).shape() {
                    Shape::Matrix { rows, cols } => (rows, cols),
                    _ => unreachable!(),
                };
                let mv = self.nodes[m.0].value.data();
                let xv = self.nodes[x.0].value.data();
                {
                    let gm = &mut grads[m.0];
                    for r in 0..rows {
                        let g = go[r];
                        if g != 0.0 {
                            for c in 0..cols {
                                gm[r * cols + c] += g * xv[c];
                            }
                        }
                    }
                }
                {
                    let gx = &mut grads[x.0];
                    for r in 0..rows {
                        let g = go[r];
                        if g != 0.0 {
                            let row = &mv[r * cols..(r + 1) * cols];
                            for c in 0..cols {
                                gx[c] += g * row[c];
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let gb = &mut grads[b.0];
                    for r in 0..rows {
                        gb[r] += go[r];
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                let gx = &mut grads[x.0];
                for (j, &g) in go.iter().enumerate() {
                    if xv[j] > 0.0 {
                        gx[j] += g;
                    }
                }
            }
            Op::PRelu { x, slope } => {
                let a = self.nodes[slope.0].value.data()[0];
                let xv = self.nodes[x.0].value.data();
                {
                    let gx = &mut grads[x.0];
                    for (j, &g) in go.iter().enumerate() {
                        // x == 0 takes the positive branch by definition.
                        gx[j] += if xv[j] >= 0.0 { g } else { a * g };
                    }
                }
                let mut ga = 0.0;
                for (j, &g) in go.iter().enumerate() {
                    if xv[j] < 0.0 {
                        ga += g * xv[j];
                    }
                }
                grads[slope.0][0] += ga;
            }
            Op::Add { a, b } => {
                for (j, &g) in go.iter().enumerate() {
                    grads[a.0][j] += g;
                }
                for (j, &g) in go.iter().enumerate() {
                    grads[b.0][j] += g;
                }
            }
            Op::Sub { a, b } => {
                for (j, &g) in go.iter().enumerate() {
                    grads[a.0][j] += g;
                }
                for (j, &g) in go.iter().enumerate() {
                    grads[b.0][j] -= g;
                }
            }
            Op::ScaleBy { s, v } => {
                let sv = self.nodes[s.0].value.data()[0];
                let vv = self.nodes[v.0].value.data();
                let mut gs = 0.0;
                for (j, &g) in go.iter().enumerate() {
                    gs += g * vv[j];
                }
                grads[s.0][0] += gs;
                let gv = &mut grads[v.0];
                for (j, &g) in go.iter().enumerate() {
                    gv[j] += sv * g;
                }
            }
            Op::ScaleConst { x, c } => {
                let gx = &mut grads[x.0];
                for (j, &g) in go.iter().enumerate() {
                    gx[j] += c * g;
                }
            }
            Op::Concat { a, b } => {
                let da = self.nodes[a.0].value.len();
                for (j, &g) in go[..da].iter().enumerate() {
                    grads[a.0][j] += g;
                }
                for (j, &g) in go[da..].iter().enumerate() {
                    grads[b.0][j] += g;
                }
            }
            Op::SoftmaxCrossEntropy { logits, label } => {
                let z = self.nodes[logits.0].value.data();
                let m = z.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let sum_exp: Real = z.iter().map(|&v| (v - m).exp()).sum();
                let g = go[0];
                let gz = &mut grads[logits.0];
                for (j, &v) in z.iter().enumerate() {
                    let p = (v - m).exp() / sum_exp;
                    let indicator = if j == *label { 1.0 } else { 0.0 };
                    gz[j] += g * (p - indicator);
                }
            }
            Op::SquaredL2 { a, b } => {
                let g = go[0];
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                {
                    let ga = &mut grads[a.0];
                    for j in 0..av.len() {
                        ga[j] += 2.0 * (av[j] - bv[j]) * g;
                    }
                }
                let gb = &mut grads[b.0];
                for j in 0..av.len() {
                    gb[j] -= 2.0 * (av[j] - bv[j]) * g;
                }
            }
            Op::MeanTensors { items } => {
                let k = items.len() as Real;
                for &it in items {
                    let gi = &mut grads[it.0];
                    for (j, &g) in go.iter().enumerate() {
                        gi[j] += g / k;
                    }
                }
            }
            Op::StackScalars { items } => {
                for (j, &it) in items.iter().enumerate() {
                    grads[it.0][0] += go[j];
                }
            }
            Op::AffineScalars { terms } => {
                let g = go[0];
                for &(c, s) in terms {
                    grads[s.0][0] += c * g;
                }
            }
            Op::Sqrt { x } => {
                let out = self.nodes[i].value.data()[0];
                if out > 0.0 {
                    grads[x.0][0] += go[0] / (2.0 * out);
                }
            }
            Op::UnitToScalar { x } => {
                grads[x.0][0] += go[0];
            }
        }
    }
}
