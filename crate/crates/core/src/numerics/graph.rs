//! Static computation graphs over 2-D tensors: forward evaluation and exact
//! reverse-mode gradients.
//!
//! A graph is built once per model configuration and evaluated many times
//! with different leaf bindings. Node evaluation order is the construction
//! order (a topological order by construction), so two evaluations with the
//! same bindings are bit-identical.

use std::collections::BTreeMap;

use super::tensor::{pairwise_sum, real, Real, Tensor};
use super::NumericsError;

pub type NodeId = usize;

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
}

enum Op {
    /// Placeholder bound to a tensor at evaluation time.
    Leaf { name: String },
    /// Values baked into the graph, converted to the active precision per pass.
    Constant { values: Vec<f64> },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    /// Elementwise binary op; either operand may broadcast along a dimension
    /// of extent 1.
    Bin { kind: BinKind, a: NodeId, b: NodeId },
    LeakyRelu { a: NodeId, slope: f64 },
    Sigmoid { a: NodeId },
    Sqrt { a: NodeId },
    SoftmaxRows { a: NodeId },
    MeanRows { a: NodeId },
    SumAll { a: NodeId },
    Reshape { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { a: NodeId, start: usize, end: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant { .. } => "const",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Bin { kind, .. } => kind.name(),
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Sqrt { .. } => "sqrt",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::MeanRows { .. } => "mean_rows",
            Op::SumAll { .. } => "sum_all",
            Op::Reshape { .. } => "reshape",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
}

impl Node {
    fn describe(&self, id: NodeId) -> String {
        match &self.op {
            Op::Leaf { name } => format!("leaf '{name}' (node {id})"),
            op => format!("{} (node {id})", op.name()),
        }
    }
}

/// Leaf-name → tensor map supplied to every evaluation or gradient pass.
#[derive(Clone, Default)]
pub struct Bindings<R: Real> {
    map: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> Bindings<R> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: Tensor<R>) -> &mut Self {
        self.map.insert(name.into(), tensor);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.map.iter()
    }
}

/// Per-leaf gradients of a scalar graph output. Leaves that do not reach the
/// output hold exactly-zero tensors.
#[derive(Clone)]
pub struct GradientMap<R: Real> {
    grads: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> GradientMap<R> {
    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.grads.iter()
    }

    pub fn from_map(grads: BTreeMap<String, Tensor<R>>) -> Self {
        Self { grads }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|t| t.values().iter().all(|v| v.is_finite()))
    }
}

/// Incrementally builds a graph; every method checks shapes so mismatches
/// surface at construction with the offending node named.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: Vec::new() }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, rows, cols });
        self.nodes.len() - 1
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn mismatch(&self, op: &str, detail: String) -> NumericsError {
        NumericsError::ShapeMismatch {
            node: format!("{op} (node {})", self.nodes.len()),
            detail,
        }
    }

    pub fn leaf(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId, NumericsError> {
        let name = name.into();
        if self.leaves.iter().any(|(n, _)| *n == name) {
            return Err(NumericsError::DuplicateLeaf(name));
        }
        if rows == 0 || cols == 0 {
            return Err(self.mismatch("leaf", format!("zero extent {rows}x{cols}")));
        }
        let id = self.push(Op::Leaf { name: name.clone() }, rows, cols);
        self.leaves.push((name, id));
        Ok(id)
    }

    pub fn constant(&mut self, tensor: &Tensor<f64>) -> Result<NodeId, NumericsError> {
        if !tensor.is_matrix() {
            return Err(self.mismatch("const", "constants must be 2-D".into()));
        }
        let (r, c) = (tensor.rows(), tensor.cols());
        Ok(self.push(Op::Constant { values: tensor.values().to_vec() }, r, c))
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<NodeId, NumericsError> {
        self.constant(&Tensor::scalar(value).map_err(|_| {
            NumericsError::NonFiniteValue("scalar constant".into())
        })?)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ac != br {
            return Err(self.mismatch("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        Ok(self.push(Op::MatMul { a, b }, ar, bc))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (r, c) = self.dims(a);
        Ok(self.push(Op::Transpose { a }, c, r))
    }

    fn bin(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let rows = broadcast_extent(ar, br)
            .ok_or_else(|| self.mismatch(kind.name(), format!("rows {ar} vs {br}")))?;
        let cols = broadcast_extent(ac, bc)
            .ok_or_else(|| self.mismatch(kind.name(), format!("cols {ac} vs {bc}")))?;
        Ok(self.push(Op::Bin { kind, a, b }, rows, cols))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.bin(BinKind::Div, a, b)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, NumericsError> {
        let (r, c) = self.dims(a);
        Ok(self.push(Op::LeakyRelu { a, slope }, r, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (r, c) = self.dims(a);
        Ok(self.push(Op::Sigmoid { a }, r, c))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (r, c) = self.dims(a);
        Ok(self.push(Op::Sqrt { a }, r, c))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (r, c) = self.dims(a);
        Ok(self.push(Op::SoftmaxRows { a }, r, c))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let (r, _) = self.dims(a);
        Ok(self.push(Op::MeanRows { a }, r, 1))
    }

    /// Population variance along each row, composed from mean/sub/mul so it
    /// inherits their gradients.
    pub fn var_rows(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let mean = self.mean_rows(a)?;
        let centered = self.sub(a, mean)?;
        let squared = self.mul(centered, centered)?;
        self.mean_rows(squared)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        Ok(self.push(Op::SumAll { a }, 1, 1))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, NumericsError> {
        let (ar, ac) = self.dims(a);
        if ar * ac != rows * cols {
            return Err(self.mismatch("reshape", format!("{ar}x{ac} -> {rows}x{cols}")));
        }
        Ok(self.push(Op::Reshape { a }, rows, cols))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if ar != br {
            return Err(self.mismatch("concat_cols", format!("rows {ar} vs {br}")));
        }
        Ok(self.push(Op::ConcatCols { a, b }, ar, ac + bc))
    }

    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, NumericsError> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(self.mismatch("slice_cols", format!("[{start}, {end}) of {c} cols")));
        }
        Ok(self.push(Op::SliceCols { a, start, end }, r, end - start))
    }

    pub fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.dims(id)
    }

    pub fn build(self, output: NodeId) -> ComputationGraph {
        ComputationGraph { nodes: self.nodes, leaves: self.leaves, output }
    }
}

fn broadcast_extent(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// An acyclic operation graph with named leaves and a designated output.
pub struct ComputationGraph {
    nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
    output: NodeId,
}

impl ComputationGraph {
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.iter().map(|(n, _)| n.as_str())
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let node = &self.nodes[self.output];
        (node.rows, node.cols)
    }

    /// Forward evaluation. Pure: identical bindings yield bit-identical
    /// outputs. Fails if a leaf is unbound, a bound tensor has the wrong
    /// shape, or any intermediate turns non-finite.
    pub fn evaluate<R: Real>(&self, bindings: &Bindings<R>) -> Result<Tensor<R>, NumericsError> {
        let values = self.forward_pass(bindings)?;
        let node = &self.nodes[self.output];
        Tensor::new(vec![node.rows, node.cols], values[self.output].clone())
    }

    fn forward_pass<R: Real>(&self, bindings: &Bindings<R>) -> Result<Vec<Vec<R>>, NumericsError> {
        let mut out: Vec<Vec<R>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let values = match &node.op {
                Op::Leaf { name } => {
                    let t = bindings
                        .get(name)
                        .ok_or_else(|| NumericsError::UnboundLeaf(name.clone()))?;
                    if t.shape() != [node.rows, node.cols] {
                        return Err(NumericsError::ShapeMismatch {
                            node: node.describe(id),
                            detail: format!(
                                "declared {}x{}, bound {:?}",
                                node.rows,
                                node.cols,
                                t.shape()
                            ),
                        });
                    }
                    t.values().to_vec()
                }
                Op::Constant { values } => values.iter().map(|&v| real(v)).collect(),
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = self.nodes[*b].cols;
                    matmul(&out[*a], &out[*b], m, k, n)
                }
                Op::Transpose { a } => {
                    transpose(&out[*a], self.nodes[*a].rows, self.nodes[*a].cols)
                }
                Op::Bin { kind, a, b } => broadcast_bin(
                    *kind,
                    &out[*a],
                    dims(&self.nodes[*a]),
                    &out[*b],
                    dims(&self.nodes[*b]),
                ),
                Op::LeakyRelu { a, slope } => {
                    let s = real::<R>(*slope);
                    out[*a]
                        .iter()
                        .map(|&x| if x >= R::zero() { x } else { s * x })
                        .collect()
                }
                Op::Sigmoid { a } => out[*a]
                    .iter()
                    .map(|&x| R::one() / (R::one() + (-x).exp()))
                    .collect(),
                Op::Sqrt { a } => out[*a].iter().map(|&x| x.sqrt()).collect(),
                Op::SoftmaxRows { a } => {
                    softmax_rows(&out[*a], self.nodes[*a].rows, self.nodes[*a].cols)
                }
                Op::MeanRows { a } => {
                    let (r, c) = dims(&self.nodes[*a]);
                    let denom = real::<R>(c as f64);
                    (0..r)
                        .map(|i| pairwise_sum(&out[*a][i * c..(i + 1) * c]) / denom)
                        .collect()
                }
                Op::SumAll { a } => vec![pairwise_sum(&out[*a])],
                Op::Reshape { a } => out[*a].clone(),
                Op::ConcatCols { a, b } => {
                    let (r, ca) = dims(&self.nodes[*a]);
                    let cb = self.nodes[*b].cols;
                    let mut v = Vec::with_capacity(r * (ca + cb));
                    for i in 0..r {
                        v.extend_from_slice(&out[*a][i * ca..(i + 1) * ca]);
                        v.extend_from_slice(&out[*b][i * cb..(i + 1) * cb]);
                    }
                    v
                }
                Op::SliceCols { a, start, end } => {
                    let (r, c) = dims(&self.nodes[*a]);
                    let mut v = Vec::with_capacity(r * (end - start));
                    for i in 0..r {
                        v.extend_from_slice(&out[*a][i * c + start..i * c + end]);
                    }
                    v
                }
            };
            if values.iter().any(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteValue(node.describe(id)));
            }
            out.push(values);
        }
        Ok(out)
    }

    /// Reverse-mode gradients of a scalar output with respect to every leaf.
    pub fn gradient<R: Real>(&self, bindings: &Bindings<R>) -> Result<GradientMap<R>, NumericsError> {
        self.gradient_with_value(bindings).map(|(_, g)| g)
    }

    /// Gradient pass that also returns the scalar output value.
    pub fn gradient_with_value<R: Real>(
        &self,
        bindings: &Bindings<R>,
    ) -> Result<(R, GradientMap<R>), NumericsError> {
        let out_node = &self.nodes[self.output];
        if (out_node.rows, out_node.cols) != (1, 1) {
            return Err(NumericsError::NonScalarOutput {
                shape: format!("{}x{}", out_node.rows, out_node.cols),
            });
        }
        let values = self.forward_pass(bindings)?;
        let output_value = values[self.output][0];

        let mut adjoint: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        adjoint[self.output] = Some(vec![R::one()]);

        for id in (0..self.nodes.len()).rev() {
            let Some(grad) = adjoint[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { .. } | Op::Constant { .. } => {
                    adjoint[id] = Some(grad);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = dims(&self.nodes[*a]);
                    let n = self.nodes[*b].cols;
                    let bt = transpose(&values[*b], k, n);
                    let da = matmul(&grad, &bt, m, n, k);
                    let at = transpose(&values[*a], m, k);
                    let db = matmul(&at, &grad, k, m, n);
                    accumulate(&mut adjoint, *a, da);
                    accumulate(&mut adjoint, *b, db);
                }
                Op::Transpose { a } => {
                    let (r, c) = dims(&self.nodes[*a]);
                    // grad has shape (c, r); transpose it back.
                    accumulate(&mut adjoint, *a, transpose(&grad, c, r));
                }
                Op::Bin { kind, a, b } => {
                    let da_shape = dims(&self.nodes[*a]);
                    let db_shape = dims(&self.nodes[*b]);
                    let out_shape = (node.rows, node.cols);
                    let (da, db) = bin_backward(
                        *kind,
                        &grad,
                        out_shape,
                        &values[*a],
                        da_shape,
                        &values[*b],
                        db_shape,
                    );
                    accumulate(&mut adjoint, *a, da);
                    accumulate(&mut adjoint, *b, db);
                }
                Op::LeakyRelu { a, slope } => {
                    // Kink derivative is the positive-side value 1.
                    let s = real::<R>(*slope);
                    let da = values[*a]
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| if x >= R::zero() { g } else { s * g })
                        .collect();
                    accumulate(&mut adjoint, *a, da);
                }
                Op::Sigmoid { a } => {
                    let da = values[id]
                        .iter()
                        .zip(&grad)
                        .map(|(&y, &g)| g * y * (R::one() - y))
                        .collect();
                    accumulate(&mut adjoint, *a, da);
                }
                Op::Sqrt { a } => {
                    let two = real::<R>(2.0);
                    let da = values[id]
                        .iter()
                        .zip(&grad)
                        .map(|(&y, &g)| g / (two * y))
                        .collect();
                    accumulate(&mut adjoint, *a, da);
                }
                Op::SoftmaxRows { a } => {
                    let (r, c) = dims(&self.nodes[*a]);
                    let mut da = vec![R::zero(); r * c];
                    for i in 0..r {
                        let row = &values[id][i * c..(i + 1) * c];
                        let grow = &grad[i * c..(i + 1) * c];
                        let mut dot = R::zero();
                        for j in 0..c {
                            dot = dot + grow[j] * row[j];
                        }
                        for j in 0..c {
                            da[i * c + j] = row[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut adjoint, *a, da);
                }
                Op::MeanRows { a } => {
                    let (r, c) = dims(&self.nodes[*a]);
                    let denom = real::<R>(c as f64);
                    let mut da = vec![R::zero(); r * c];
                    for i in 0..r {
                        let g = grad[i] / denom;
                        for j in 0..c {
                            da[i * c + j] = g;
                        }
                    }
                    accumulate(&mut adjoint, *a, da);
                }
                Op::SumAll { a } => {
                    let (r, c) = dims(&self.nodes[*a]);
                    accumulate(&mut adjoint, *a, vec![grad[0]; r * c]);
                }
                Op::Reshape { a } => accumulate(&mut adjoint, *a, grad),
                Op::ConcatCols { a, b } => {
                    let (r, ca) = dims(&self.nodes[*a]);
                    let cb = self.nodes[*b].cols;
                    let mut da = Vec::with_capacity(r * ca);
                    let mut db = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        da.extend_from_slice(&grad[i * (ca + cb)..i * (ca + cb) + ca]);
                        db.extend_from_slice(&grad[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                    }
                    accumulate(&mut adjoint, *a, da);
                    accumulate(&mut adjoint, *b, db);
                }
                Op::SliceCols { a, start, end } => {
                    let (r, c) = dims(&self.nodes[*a]);
                    let w = end - start;
                    let mut da = vec![R::zero(); r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + end].copy_from_slice(&grad[i * w..(i + 1) * w]);
                    }
                    accumulate(&mut adjoint, *a, da);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (name, id) in &self.leaves {
            let node = &self.nodes[*id];
            let tensor = match adjoint[*id].take() {
                Some(values) => Tensor::new(vec![node.rows, node.cols], values).map_err(|_| {
                    NumericsError::NonFiniteValue(format!("gradient of leaf '{name}'"))
                })?,
                None => Tensor::zeros(vec![node.rows, node.cols]),
            };
            grads.insert(name.clone(), tensor);
        }
        Ok((output_value, GradientMap { grads }))
    }
}

fn dims(node: &Node) -> (usize, usize) {
    (node.rows, node.cols)
}

fn accumulate<R: Real>(adjoint: &mut [Option<Vec<R>>], id: NodeId, delta: Vec<R>) {
    match &mut adjoint[id] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot => *slot = Some(delta),
    }
}

fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for j in 0..n {
                out_row[j] = out_row[j] + a_il * b_row[j];
            }
        }
    }
    out
}

fn transpose<R: Real>(a: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_rows<R: Real>(a: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); rows * cols];
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        // Max-subtraction keeps the exponentials bounded.
        let max = row.iter().fold(row[0], |m, &x| m.max(x));
        let exps: Vec<R> = row.iter().map(|&x| (x - max).exp()).collect();
        let total = pairwise_sum(&exps);
        for j in 0..cols {
            out[i * cols + j] = exps[j] / total;
        }
    }
    out
}

fn broadcast_bin<R: Real>(
    kind: BinKind,
    a: &[R],
    (ar, ac): (usize, usize),
    b: &[R],
    (br, bc): (usize, usize),
) -> Vec<R> {
    let rows = ar.max(br);
    let cols = ac.max(bc);
    let mut out = vec![R::zero(); rows * cols];
    for i in 0..rows {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..cols {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            let x = a[ia * ac + ja];
            let y = b[ib * bc + jb];
            out[i * cols + j] = match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
        }
    }
    out
}

/// Sum `grad` (of the broadcast output shape) back down to an operand shape.
fn reduce_to_shape<R: Real>(
    grad: &[R],
    (gr, gc): (usize, usize),
    (tr, tc): (usize, usize),
) -> Vec<R> {
    let mut out = vec![R::zero(); tr * tc];
    for i in 0..gr {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..gc {
            let tj = if tc == 1 { 0 } else { j };
            out[ti * tc + tj] = out[ti * tc + tj] + grad[i * gc + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn bin_backward<R: Real>(
    kind: BinKind,
    grad: &[R],
    out_shape: (usize, usize),
    a: &[R],
    a_shape: (usize, usize),
    b: &[R],
    b_shape: (usize, usize),
) -> (Vec<R>, Vec<R>) {
    let (rows, cols) = out_shape;
    let (ar, ac) = a_shape;
    let (br, bc) = b_shape;
    let mut da_full = vec![R::zero(); rows * cols];
    let mut db_full = vec![R::zero(); rows * cols];
    for i in 0..rows {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..cols {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            let g = grad[i * cols + j];
            let x = a[ia * ac + ja];
            let y = b[ib * bc + jb];
            let idx = i * cols + j;
            match kind {
                BinKind::Add => {
                    da_full[idx] = g;
                    db_full[idx] = g;
                }
                BinKind::Sub => {
                    da_full[idx] = g;
                    db_full[idx] = -g;
                }
                BinKind::Mul => {
                    da_full[idx] = g * y;
                    db_full[idx] = g * x;
                }
                BinKind::Div => {
                    da_full[idx] = g / y;
                    db_full[idx] = -g * x / (y * y);
                }
            }
        }
    }
    (
        reduce_to_shape(&da_full, out_shape, a_shape),
        reduce_to_shape(&db_full, out_shape, b_shape),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = GraphBuilder::new();
        let eye = g.constant(&t(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let m = g.leaf("m", 2, 2).unwrap();
        let out = g.matmul(eye, m).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        let input = t(&[vec![3.0, -1.5], vec![0.25, 7.0]]);
        b.bind("m", input.clone());
        assert_eq!(graph.evaluate(&b).unwrap(), input);
    }

    #[test]
    fn softmax_equal_logits() {
        let mut g = GraphBuilder::new();
        let x = g.leaf("x", 1, 2).unwrap();
        let out = g.softmax_rows(x).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("x", t(&[vec![4.2, 4.2]]));
        let y = graph.evaluate(&b).unwrap();
        assert_eq!(y.values(), &[0.5, 0.5]);
    }

    #[test]
    fn leaky_relu_values() {
        let mut g = GraphBuilder::new();
        let x = g.leaf("x", 1, 2).unwrap();
        let out = g.leaky_relu(x, 0.01).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("x", t(&[vec![-1.0, 2.0]]));
        let y = graph.evaluate(&b).unwrap();
        assert_eq!(y.values(), &[-0.01, 2.0]);
    }

    #[test]
    fn evaluation_is_bit_identical() {
        let mut g = GraphBuilder::new();
        let x = g.leaf("x", 2, 3).unwrap();
        let w = g.leaf("w", 3, 2).unwrap();
        let prod = g.matmul(x, w).unwrap();
        let act = g.softmax_rows(prod).unwrap();
        let out = g.sum_all(act).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("x", t(&[vec![0.3, -1.2, 2.2], vec![1.0, 0.5, -0.7]]));
        b.bind("w", t(&[vec![0.1, 0.9], vec![-0.4, 0.2], vec![0.8, -0.3]]));
        let y1 = graph.evaluate(&b).unwrap();
        let y2 = graph.evaluate(&b).unwrap();
        let bits1: Vec<u64> = y1.values().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = y2.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = GraphBuilder::new();
        let p = g.leaf("p", 2, 3).unwrap();
        let out = g.sum_all(p).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("p", t(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 5.0]]));
        let grads = graph.gradient(&b).unwrap();
        assert_eq!(grads.get("p").unwrap().values(), &[1.0; 6]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero_gradient() {
        let mut g = GraphBuilder::new();
        let p = g.leaf("p", 2, 2).unwrap();
        let q = g.leaf("q", 3, 1).unwrap();
        let _ = q;
        let out = g.sum_all(p).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("p", t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        b.bind("q", t(&[vec![9.0], vec![8.0], vec![7.0]]));
        let grads = graph.gradient(&b).unwrap();
        assert_eq!(grads.get("q").unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_scaled_loss_zeroes_gradient() {
        let mut g = GraphBuilder::new();
        let p = g.leaf("p", 2, 2).unwrap();
        let act = g.sigmoid(p).unwrap();
        let total = g.sum_all(act).unwrap();
        let zero = g.scalar_const(0.0).unwrap();
        let out = g.mul(total, zero).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("p", t(&[vec![0.3, -0.7], vec![1.1, 0.0]]));
        let grads = graph.gradient(&b).unwrap();
        assert_eq!(grads.get("p").unwrap().values(), &[0.0; 4]);
    }

    #[test]
    fn least_squares_gradient_matches_closed_form() {
        // loss = 0.5 * ||W x - y||^2, gradient wrt x is W^T (W x - y).
        let w = t(&[vec![1.0, 2.0], vec![-0.5, 0.75], vec![0.25, -1.5]]);
        let x_val = t(&[vec![0.8], vec![-1.1]]);
        let y_val = t(&[vec![0.4], vec![0.0], vec![-0.6]]);

        let mut g = GraphBuilder::new();
        let wc = g.constant(&w).unwrap();
        let x = g.leaf("x", 2, 1).unwrap();
        let yc = g.constant(&y_val).unwrap();
        let wx = g.matmul(wc, x).unwrap();
        let resid = g.sub(wx, yc).unwrap();
        let sq = g.mul(resid, resid).unwrap();
        let total = g.sum_all(sq).unwrap();
        let half = g.scalar_const(0.5).unwrap();
        let out = g.mul(total, half).unwrap();
        let graph = g.build(out);

        let mut b = Bindings::new();
        b.bind("x", x_val.clone());
        let grads = graph.gradient(&b).unwrap();
        let got = grads.get("x").unwrap();

        // Hand-rolled oracle.
        let mut resid = [0.0f64; 3];
        for i in 0..3 {
            resid[i] = w.get2(i, 0) * x_val.get2(0, 0) + w.get2(i, 1) * x_val.get2(1, 0)
                - y_val.get2(i, 0);
        }
        for j in 0..2 {
            let expect: f64 = (0..3).map(|i| w.get2(i, j) * resid[i]).sum();
            assert!((got.get2(j, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_gradient_rejected() {
        let mut g = GraphBuilder::new();
        let p = g.leaf("p", 2, 2).unwrap();
        let out = g.sigmoid(p).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("p", t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        assert!(matches!(
            graph.gradient(&b),
            Err(NumericsError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = GraphBuilder::new();
        let a = g.leaf("a", 2, 3).unwrap();
        let b = g.leaf("b", 2, 3).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn unbound_leaf_reported() {
        let mut g = GraphBuilder::new();
        let p = g.leaf("p", 1, 1).unwrap();
        let out = g.sum_all(p).unwrap();
        let graph = g.build(out);
        let b: Bindings<f64> = Bindings::new();
        assert!(matches!(graph.evaluate(&b), Err(NumericsError::UnboundLeaf(_))));
    }

    #[test]
    fn division_by_zero_is_caught_as_non_finite() {
        let mut g = GraphBuilder::new();
        let a = g.leaf("a", 1, 1).unwrap();
        let zero = g.scalar_const(0.0).unwrap();
        let out = g.div(a, zero).unwrap();
        let graph = g.build(out);
        let mut b = Bindings::new();
        b.bind("a", Tensor::scalar(1.0).unwrap());
        assert!(matches!(
            graph.evaluate(&b),
            Err(NumericsError::NonFiniteValue(_))
        ));
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = GraphBuilder::new();
        let a = g.leaf("a", 2, 2).unwrap();
        let b_leaf = g.leaf("b", 2, 3).unwrap();
        let cat = g.concat_cols(a, b_leaf).unwrap();
        let back = g.slice_cols(cat, 2, 5).unwrap();
        let graph = g.build(back);
        let mut b = Bindings::new();
        b.bind("a", t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let bt = t(&[vec![5.0, 6.0, 7.0], vec![8.0, 9.0, 10.0]]);
        b.bind("b", bt.clone());
        assert_eq!(graph.evaluate(&b).unwrap(), bt);
    }
}
