use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::linalg;
use super::Array;
use crate::error::{Error, Result};

type NodeId = usize;

/// Identifier of an input leaf, in order of creation on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafId),
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sum(NodeId),
    /// Reduces over rows: `r×c → 1×c`.
    SumRows(NodeId),
    /// Reduces over columns: `r×c → r×1`.
    SumCols(NodeId),
    Cholesky(NodeId),
    TriSolve {
        l: NodeId,
        b: NodeId,
        transpose: bool,
    },
    Slice {
        src: NodeId,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Diag(NodeId),
    DiagEmbed(NodeId),
    SqDist(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array,
}

/// Recording tape for reverse-mode differentiation.
///
/// Operations are evaluated eagerly as they are recorded. The recorded
/// program can be replayed on new leaf values ([`Tape::eval`]) and
/// differentiated ([`Tape::gradient`]). Failures inside an operation do not
/// panic: the first one is kept and reported by [`Tape::status`] and by every
/// evaluation entry point.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaves: RefCell<Vec<NodeId>>,
    checked: bool,
    error: RefCell<Option<Error>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients keyed by leaf.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: HashMap<LeafId, Array>,
}

impl GradientMap {
    pub fn get(&self, leaf: LeafId) -> Option<&Array> {
        self.grads.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LeafId, &Array)> {
        self.grads.iter()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A checked tape: any non-finite intermediate is reported as an error.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaves: RefCell::new(Vec::new()),
            checked: true,
            error: RefCell::new(None),
        }
    }

    pub fn unchecked() -> Self {
        Self {
            checked: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// First error recorded while building, if any.
    pub fn status(&self) -> Result<()> {
        match &*self.error.borrow() {
            Some(e) => Err(e.clone()),
            None => Ok(()),
        }
    }

    pub fn leaf(&self, value: Array) -> Var<'_> {
        let leaf = LeafId(self.leaves.borrow().len());
        let var = self.push_value(Op::Leaf(leaf), value);
        self.leaves.borrow_mut().push(var.id);
        var
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push_value(Op::Const, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array::scalar(value))
    }

    pub fn leaf_ids(&self) -> Vec<LeafId> {
        (0..self.leaves.borrow().len()).map(LeafId).collect()
    }

    pub fn concat_cols(&self, parts: &[Var<'_>]) -> Var<'_> {
        self.record(Op::ConcatCols(parts.iter().map(|v| v.id).collect()))
    }

    pub fn concat_rows(&self, parts: &[Var<'_>]) -> Var<'_> {
        self.record(Op::ConcatRows(parts.iter().map(|v| v.id).collect()))
    }

    fn push_value(&self, op: Op, value: Array) -> Var<'_> {
        if self.checked && !value.is_finite() {
            self.fail(Error::NonFinite(format!("{:?} input", op_name(&op))));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn fail(&self, err: Error) {
        let mut slot = self.error.borrow_mut();
        if slot.is_none() {
            *slot = Some(err);
        }
    }

    fn record(&self, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            forward(&op, |i| &nodes[i].value)
        };
        let value = match value {
            Ok(v) => {
                if self.checked && !v.is_finite() {
                    self.fail(Error::NonFinite(op_name(&op).into()));
                }
                v
            }
            Err(e) => {
                self.fail(e);
                Array::scalar(f64::NAN)
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Recomputes every node with `overrides` substituted for the matching
    /// leaves. Leaves not in the map keep their recorded values.
    pub fn replay(&self, overrides: &HashMap<LeafId, Array>) -> Result<Vec<Array>> {
        self.status()?;
        replay_nodes(&self.nodes.borrow(), overrides, self.checked)
    }

    /// Value of `output` after replaying on `leaves`.
    pub fn eval(&self, output: Var<'_>, leaves: &HashMap<LeafId, Array>) -> Result<Array> {
        let mut values = self.replay(leaves)?;
        Ok(values.swap_remove(output.id))
    }

    /// Reverse-mode gradient of a scalar `output` at the recorded values.
    pub fn gradient(&self, output: Var<'_>, wrt: &[LeafId]) -> Result<GradientMap> {
        self.status()?;
        let nodes = self.nodes.borrow();
        let values: Vec<&Array> = nodes.iter().map(|n| &n.value).collect();
        backward(&nodes, &values, &self.leaves.borrow(), output.id, wrt)
    }

    /// Gradient of `output` after replaying on `leaves`.
    pub fn gradient_at(
        &self,
        output: Var<'_>,
        leaves: &HashMap<LeafId, Array>,
        wrt: &[LeafId],
    ) -> Result<GradientMap> {
        let replayed = self.replay(leaves)?;
        let nodes = self.nodes.borrow();
        let values: Vec<&Array> = replayed.iter().collect();
        backward(&nodes, &values, &self.leaves.borrow(), output.id, wrt)
    }

    pub(crate) fn leaf_value(&self, leaf: LeafId) -> Array {
        let id = self.leaves.borrow()[leaf.0];
        self.nodes.borrow()[id].value.clone()
    }

    /// Freezes the recording into an immutable, thread-shareable program.
    pub fn into_program(self) -> Result<Program> {
        self.status()?;
        Ok(Program {
            nodes: self.nodes.into_inner(),
            leaves: self.leaves.into_inner(),
            checked: self.checked,
        })
    }
}

/// Immutable recorded program; `Send + Sync`.
#[derive(Clone, Debug)]
pub struct Program {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
    checked: bool,
}

impl Program {
    pub fn eval(&self, output: usize, leaves: &HashMap<LeafId, Array>) -> Result<Array> {
        let mut values = replay_nodes(&self.nodes, leaves, self.checked)?;
        if output >= values.len() {
            return Err(Error::InvalidArgument(format!("no node {output}")));
        }
        Ok(values.swap_remove(output))
    }

    pub fn gradient(
        &self,
        output: usize,
        leaves: &HashMap<LeafId, Array>,
        wrt: &[LeafId],
    ) -> Result<GradientMap> {
        let replayed = replay_nodes(&self.nodes, leaves, self.checked)?;
        let values: Vec<&Array> = replayed.iter().collect();
        backward(&self.nodes, &values, &self.leaves, output, wrt)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn replay_nodes(
    nodes: &[Node],
    overrides: &HashMap<LeafId, Array>,
    checked: bool,
) -> Result<Vec<Array>> {
    let mut values: Vec<Array> = Vec::with_capacity(nodes.len());
    for node in nodes {
        let value = match &node.op {
            Op::Leaf(leaf) => match overrides.get(leaf) {
                Some(v) => {
                    if v.shape() != node.value.shape() {
                        return Err(Error::Shape(format!(
                            "leaf {} declared {:?}, given {:?}",
                            leaf.0,
                            node.value.shape(),
                            v.shape()
                        )));
                    }
                    v.clone()
                }
                None => node.value.clone(),
            },
            Op::Const => node.value.clone(),
            op => forward(op, |i| &values[i])?,
        };
        if checked && !value.is_finite() {
            return Err(Error::NonFinite(op_name(&node.op).into()));
        }
        values.push(value);
    }
    Ok(values)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf(_) => "leaf",
        Op::Const => "const",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(_) => "neg",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Sqrt(_) => "sqrt",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Sum(_) => "sum",
        Op::SumRows(_) => "sum_rows",
        Op::SumCols(_) => "sum_cols",
        Op::Cholesky(_) => "cholesky",
        Op::TriSolve { .. } => "triangular_solve",
        Op::Slice { .. } => "slice",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::Diag(_) => "diag",
        Op::DiagEmbed(_) => "diag_embed",
        Op::SqDist(..) => "sqdist",
    }
}

fn binary(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    if a.same_dims(b) {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(a.shape().to_vec(), data)
    } else if b.len() == 1 {
        let y = b.data()[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.len() == 1 {
        let x = a.data()[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(Error::Shape(format!(
            "elementwise op on {:?} and {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

fn forward<'a>(op: &Op, get: impl Fn(NodeId) -> &'a Array) -> Result<Array> {
    Ok(match *op {
        Op::Leaf(_) | Op::Const => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => binary(get(a), get(b), |x, y| x + y)?,
        Op::Sub(a, b) => binary(get(a), get(b), |x, y| x - y)?,
        Op::Mul(a, b) => binary(get(a), get(b), |x, y| x * y)?,
        Op::Div(a, b) => binary(get(a), get(b), |x, y| x / y)?,
        Op::Neg(a) => get(a).map(|x| -x),
        Op::Exp(a) => get(a).map(f64::exp),
        Op::Log(a) => get(a).map(f64::ln),
        Op::Sqrt(a) => get(a).map(f64::sqrt),
        Op::MatMul(a, b) => linalg::matmul(get(a), get(b))?,
        Op::Transpose(a) => linalg::transpose(get(a)),
        Op::Sum(a) => Array::scalar(get(a).data().iter().sum()),
        Op::SumRows(a) => {
            let x = get(a);
            let (r, c) = (x.rows(), x.cols());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            Array::matrix(1, c, out)
        }
        Op::SumCols(a) => {
            let x = get(a);
            let out = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
            Array::matrix(x.rows(), 1, out)
        }
        Op::Cholesky(a) => linalg::cholesky(get(a))?.0,
        Op::TriSolve { l, b, transpose } => linalg::solve_lower(get(l), get(b), transpose)?,
        Op::Slice { src, rows, cols } => {
            let x = get(src);
            if rows.1 > x.rows() || cols.1 > x.cols() || rows.0 > rows.1 || cols.0 > cols.1 {
                return Err(Error::Shape(format!(
                    "slice rows {:?} cols {:?} of {}×{}",
                    rows,
                    cols,
                    x.rows(),
                    x.cols()
                )));
            }
            let mut out = Vec::with_capacity((rows.1 - rows.0) * (cols.1 - cols.0));
            for i in rows.0..rows.1 {
                out.extend_from_slice(&x.row(i)[cols.0..cols.1]);
            }
            Array::matrix(rows.1 - rows.0, cols.1 - cols.0, out)
        }
        Op::ConcatCols(ref parts) => {
            let r = parts.first().map_or(0, |&p| get(p).rows());
            if parts.iter().any(|&p| get(p).rows() != r) {
                return Err(Error::Shape("concat_cols with differing row counts".into()));
            }
            let c: usize = parts.iter().map(|&p| get(p).cols()).sum();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for &p in parts {
                    out.extend_from_slice(get(p).row(i));
                }
            }
            Array::matrix(r, c, out)
        }
        Op::ConcatRows(ref parts) => {
            let c = parts.first().map_or(0, |&p| get(p).cols());
            if parts.iter().any(|&p| get(p).cols() != c) {
                return Err(Error::Shape("concat_rows with differing column counts".into()));
            }
            let r: usize = parts.iter().map(|&p| get(p).rows()).sum();
            let mut out = Vec::with_capacity(r * c);
            for &p in parts {
                out.extend_from_slice(get(p).data());
            }
            Array::matrix(r, c, out)
        }
        Op::Diag(a) => {
            let x = get(a);
            if x.rows() != x.cols() {
                return Err(Error::Shape(format!("diag of {}×{}", x.rows(), x.cols())));
            }
            Array::matrix(x.rows(), 1, (0..x.rows()).map(|i| x.at(i, i)).collect())
        }
        Op::DiagEmbed(a) => {
            let x = get(a);
            let n = x.len();
            let mut out = Array::zeros(&[n, n]);
            for (i, &v) in x.data().iter().enumerate() {
                out.set(i, i, v);
            }
            out
        }
        Op::SqDist(a, b) => {
            let (x, y) = (get(a), get(b));
            if x.cols() != y.cols() {
                return Err(Error::Shape(format!(
                    "sqdist with {} and {} columns",
                    x.cols(),
                    y.cols()
                )));
            }
            let (n, m) = (x.rows(), y.rows());
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                let xi = x.row(i);
                for j in 0..m {
                    out[i * m + j] = xi
                        .iter()
                        .zip(y.row(j))
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum();
                }
            }
            Array::matrix(n, m, out)
        }
    })
}

fn accumulate(slot: &mut Option<Array>, grad: Array) {
    match slot {
        Some(acc) => {
            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += g;
            }
        }
        None => *slot = Some(grad),
    }
}

/// Gradient contribution for an operand that may have been scalar-broadcast.
fn reduce_to(grad: Array, operand: &Array) -> Array {
    if operand.len() == grad.len() {
        grad.reshape(operand.shape().to_vec()).expect("same length")
    } else {
        let mut out = Array::scalar(grad.data().iter().sum());
        out = out.reshape(operand.shape().to_vec()).expect("scalar operand");
        out
    }
}

fn lower_mask(mut a: Array) -> Array {
    let n = a.cols();
    for i in 0..a.rows() {
        for j in i + 1..n {
            a.set(i, j, 0.0);
        }
    }
    a
}

fn backward(
    nodes: &[Node],
    values: &[&Array],
    leaves: &[NodeId],
    output: NodeId,
    wrt: &[LeafId],
) -> Result<GradientMap> {
    let out = values[output];
    if out.len() != 1 {
        return Err(Error::NonScalarOutput(out.shape().to_vec()));
    }
    let mut adj: Vec<Option<Array>> = vec![None; output + 1];
    adj[output] = Some(Array::filled(out.shape(), 1.0));

    for id in (0..=output).rev() {
        let Some(g) = adj[id].take() else { continue };
        let v = values[id];
        match nodes[id].op {
            Op::Leaf(_) | Op::Const => {
                adj[id] = Some(g);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[a], reduce_to(g.clone(), values[a]));
                accumulate(&mut adj[b], reduce_to(g, values[b]));
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a], reduce_to(g.clone(), values[a]));
                accumulate(&mut adj[b], reduce_to(g.map(|x| -x), values[b]));
            }
            Op::Mul(a, b) => {
                let ga = binary(&g, values[b], |x, y| x * y)?;
                let gb = binary(&g, values[a], |x, y| x * y)?;
                accumulate(&mut adj[a], reduce_to(ga, values[a]));
                accumulate(&mut adj[b], reduce_to(gb, values[b]));
            }
            Op::Div(a, b) => {
                let ga = binary(&g, values[b], |x, y| x / y)?;
                // d(a/b)/db = -(a/b)/b
                let ratio = binary(v, values[b], |q, y| -q / y)?;
                let gb = binary(&g, &ratio, |x, y| x * y)?;
                accumulate(&mut adj[a], reduce_to(ga, values[a]));
                accumulate(&mut adj[b], reduce_to(gb, values[b]));
            }
            Op::Neg(a) => accumulate(&mut adj[a], g.map(|x| -x)),
            Op::Exp(a) => accumulate(&mut adj[a], binary(&g, v, |x, y| x * y)?),
            Op::Log(a) => accumulate(&mut adj[a], binary(&g, values[a], |x, y| x / y)?),
            Op::Sqrt(a) => accumulate(&mut adj[a], binary(&g, v, |x, y| 0.5 * x / y)?),
            Op::MatMul(a, b) => {
                let ga = linalg::matmul(&g, &linalg::transpose(values[b]))?;
                let gb = linalg::matmul(&linalg::transpose(values[a]), &g)?;
                accumulate(&mut adj[a], reduce_to(ga, values[a]));
                accumulate(&mut adj[b], reduce_to(gb, values[b]));
            }
            Op::Transpose(a) => {
                accumulate(&mut adj[a], reduce_to(linalg::transpose(&g), values[a]));
            }
            Op::Sum(a) => accumulate(&mut adj[a], Array::filled(values[a].shape(), g.item())),
            Op::SumRows(a) => {
                let x = values[a];
                let (r, c) = (x.rows(), x.cols());
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend_from_slice(g.data());
                }
                accumulate(&mut adj[a], Array::new(x.shape().to_vec(), out)?);
            }
            Op::SumCols(a) => {
                let x = values[a];
                let (r, c) = (x.rows(), x.cols());
                let mut out = Vec::with_capacity(r * c);
                for i in 0..r {
                    out.extend(std::iter::repeat_n(g.data()[i], c));
                }
                accumulate(&mut adj[a], Array::new(x.shape().to_vec(), out)?);
            }
            Op::Cholesky(a) => {
                // S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, Ā = (S + Sᵀ)/2
                let l = v;
                let gbar = lower_mask(g);
                let mut phi = lower_mask(linalg::matmul(&linalg::transpose(l), &gbar)?);
                for i in 0..phi.rows() {
                    let d = phi.at(i, i);
                    phi.set(i, i, 0.5 * d);
                }
                let x = linalg::solve_lower(l, &phi, true)?;
                let s = linalg::transpose(&linalg::solve_lower(l, &linalg::transpose(&x), true)?);
                let st = linalg::transpose(&s);
                let sym = binary(&s, &st, |p, q| 0.5 * (p + q))?;
                accumulate(&mut adj[a], reduce_to(sym, values[a]));
            }
            Op::TriSolve { l, b, transpose } => {
                let lv = values[l];
                let gb = linalg::solve_lower(lv, &g, !transpose)?;
                let gl = if transpose {
                    linalg::matmul(v, &linalg::transpose(&gb))?
                } else {
                    linalg::matmul(&gb, &linalg::transpose(v))?
                };
                let gl = lower_mask(gl.map(|x| -x));
                accumulate(&mut adj[l], reduce_to(gl, lv));
                accumulate(&mut adj[b], reduce_to(gb, values[b]));
            }
            Op::Slice { src, rows, cols } => {
                let x = values[src];
                let mut out = Array::zeros(&[x.rows(), x.cols()]);
                let w = cols.1 - cols.0;
                for i in rows.0..rows.1 {
                    for j in cols.0..cols.1 {
                        out.set(i, j, g.data()[(i - rows.0) * w + (j - cols.0)]);
                    }
                }
                accumulate(&mut adj[src], reduce_to(out, x));
            }
            Op::ConcatCols(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = values[p];
                    let (r, c) = (x.rows(), x.cols());
                    let mut out = Vec::with_capacity(r * c);
                    for i in 0..r {
                        out.extend_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(&mut adj[p], Array::new(x.shape().to_vec(), out)?);
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let x = values[p];
                    let n = x.len();
                    let out = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    accumulate(&mut adj[p], Array::new(x.shape().to_vec(), out)?);
                }
            }
            Op::Diag(a) => {
                let x = values[a];
                let mut out = Array::zeros(x.shape());
                for i in 0..x.rows() {
                    out.set(i, i, g.data()[i]);
                }
                accumulate(&mut adj[a], out);
            }
            Op::DiagEmbed(a) => {
                let x = values[a];
                let out = (0..x.len()).map(|i| g.at(i, i)).collect();
                accumulate(&mut adj[a], Array::new(x.shape().to_vec(), out)?);
            }
            Op::SqDist(a, b) => {
                let (x, y) = (values[a], values[b]);
                let (n, m, d) = (x.rows(), y.rows(), x.cols());
                let gy = linalg::matmul(&g, y)?;
                let gtx = linalg::matmul(&linalg::transpose(&g), x)?;
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    let rs: f64 = g.row(i).iter().sum();
                    for k in 0..d {
                        ga[i * d + k] = 2.0 * (rs * x.at(i, k) - gy.at(i, k));
                    }
                }
                for j in 0..m {
                    let cs: f64 = (0..n).map(|i| g.at(i, j)).sum();
                    for k in 0..d {
                        gb[j * d + k] = 2.0 * (cs * y.at(j, k) - gtx.at(j, k));
                    }
                }
                accumulate(&mut adj[a], Array::new(x.shape().to_vec(), ga)?);
                accumulate(&mut adj[b], Array::new(y.shape().to_vec(), gb)?);
            }
        }
    }

    let mut grads = HashMap::with_capacity(wrt.len());
    for &leaf in wrt {
        let Some(&node) = leaves.get(leaf.0) else {
            return Err(Error::InvalidArgument(format!("unknown leaf {}", leaf.0)));
        };
        let g = if node <= output {
            adj[node].take()
        } else {
            None
        };
        let g = g.unwrap_or_else(|| Array::zeros(values[node].shape()));
        grads.insert(leaf, g);
    }
    Ok(GradientMap { grads })
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Array {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn leaf_id(&self) -> Option<LeafId> {
        match self.tape.nodes.borrow()[self.id].op {
            Op::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn node_index(&self) -> usize {
        self.id
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.record(op)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self * self
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.unary(Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id))
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id))
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id))
    }

    pub fn cholesky(self) -> Var<'t> {
        self.unary(Op::Cholesky(self.id))
    }

    /// `L⁻¹ b` where `self` is lower triangular.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        self.unary(Op::TriSolve {
            l: self.id,
            b: b.id,
            transpose: false,
        })
    }

    /// `L⁻ᵀ b` where `self` is lower triangular.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        self.unary(Op::TriSolve {
            l: self.id,
            b: b.id,
            transpose: true,
        })
    }

    /// `A⁻¹ b` for symmetric positive-definite `self`.
    pub fn cholesky_solve(self, b: Var<'t>) -> Var<'t> {
        let l = self.cholesky();
        l.solve_lower_t(l.solve_lower(b))
    }

    /// `log det A` through the Cholesky factor.
    pub fn logdet(self) -> Var<'t> {
        self.cholesky().diag().ln().sum() * 2.0
    }

    pub fn slice(self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Var<'t> {
        self.unary(Op::Slice {
            src: self.id,
            rows: (rows.start, rows.end),
            cols: (cols.start, cols.end),
        })
    }

    pub fn col(self, j: usize) -> Var<'t> {
        let r = self.rows();
        self.slice(0..r, j..j + 1)
    }

    pub fn cols_range(self, cols: std::ops::Range<usize>) -> Var<'t> {
        let r = self.rows();
        self.slice(0..r, cols)
    }

    pub fn row(self, i: usize) -> Var<'t> {
        let c = self.cols();
        self.slice(i..i + 1, 0..c)
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(self) -> Var<'t> {
        self.unary(Op::Diag(self.id))
    }

    /// Square matrix with the entries of `self` on its diagonal.
    pub fn diag_embed(self) -> Var<'t> {
        self.unary(Op::DiagEmbed(self.id))
    }

    /// Pairwise squared Euclidean distances between the rows of two matrices.
    pub fn sqdist(self, other: Var<'t>) -> Var<'t> {
        self.unary(Op::SqDist(self.id, other.id))
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.tape.record(Op::$variant(self.id, rhs.id))
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                let c = self.tape.scalar(rhs);
                self.tape.record(Op::$variant(self.id, c.id))
            }
        }
        impl<'t> $trait<Var<'t>> for f64 {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                let c = rhs.tape.scalar(self);
                rhs.tape.record(Op::$variant(c.id, rhs.id))
            }
        }
    };
}

binop!(Add, add, Add);
binop!(Sub, sub, Sub);
binop!(Mul, mul, Mul);
binop!(Div, div, Div);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.record(Op::Neg(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_tape_replays_input() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1.0, 2.0]));
        let y = x + 0.0;
        assert_eq!(y.value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![3.0, 4.0]));
        let f = (x * x).sum();
        assert_eq!(f.item(), 25.0);
        let g = tape.gradient(f, &[x.leaf_id().unwrap()]).unwrap();
        assert_eq!(g.get(LeafId(0)).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn logdet_gradient_is_inverse_transpose() {
        let tape = Tape::new();
        let a = tape.leaf(Array::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]));
        let f = a.logdet();
        assert_relative_eq!(f.item(), 4f64.ln(), epsilon = 1e-14);
        let g = tape.gradient(f, &[LeafId(0)]).unwrap();
        let g = g.get(LeafId(0)).unwrap();
        assert_relative_eq!(g.at(0, 0), 0.5, epsilon = 1e-14);
        assert_relative_eq!(g.at(1, 1), 0.5, epsilon = 1e-14);
        assert_relative_eq!(g.at(0, 1), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn logdet_of_diagonal_via_cholesky() {
        let tape = Tape::new();
        let a = tape.leaf(Array::matrix(2, 2, vec![4.0, 0.0, 0.0, 9.0]));
        assert_relative_eq!(a.logdet().item(), 36f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(a.logdet().item(), 3.5835, epsilon = 1e-4);
    }

    #[test]
    fn replay_is_deterministic_and_uses_overrides() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1.0, 2.0]));
        let f = (x.exp() * x).sum();
        let same = tape.eval(f, &HashMap::new()).unwrap();
        assert_eq!(same.item().to_bits(), f.item().to_bits());
        let mut leaves = HashMap::new();
        leaves.insert(LeafId(0), Array::from_vec(vec![0.0, 0.0]));
        assert_eq!(tape.eval(f, &leaves).unwrap().item(), 0.0);
    }

    #[test]
    fn replay_rejects_wrong_leaf_shape() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1.0, 2.0]));
        let f = x.sum();
        let mut leaves = HashMap::new();
        leaves.insert(LeafId(0), Array::from_vec(vec![0.0; 3]));
        assert!(matches!(tape.eval(f, &leaves), Err(Error::Shape(_))));
    }

    #[test]
    fn non_scalar_gradient_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![1.0, 2.0]));
        let y = x * 2.0;
        assert!(matches!(
            tape.gradient(y, &[LeafId(0)]),
            Err(Error::NonScalarOutput(_))
        ));
    }

    #[test]
    fn checked_tape_reports_nan() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![-1.0]));
        let _ = x.ln();
        assert!(matches!(tape.status(), Err(Error::NonFinite(_))));

        let loose = Tape::unchecked();
        let x = loose.leaf(Array::from_vec(vec![-1.0]));
        let _ = x.ln();
        assert!(loose.status().is_ok());
    }

    #[test]
    fn shape_mismatch_is_recorded() {
        let tape = Tape::new();
        let a = tape.leaf(Array::zeros(&[2, 3]));
        let b = tape.leaf(Array::zeros(&[3, 2]));
        let _ = a + b;
        assert!(matches!(tape.status(), Err(Error::Shape(_))));
    }

    #[test]
    fn program_is_shareable_and_matches_tape() {
        fn assert_sync<T: Send + Sync>(_: &T) {}
        let tape = Tape::new();
        let x = tape.leaf(Array::from_vec(vec![0.5, 1.5]));
        let f = (x * x).sum().ln();
        let out = f.node_index();
        let expect = f.item();
        let program = tape.into_program().unwrap();
        assert_sync(&program);
        assert_eq!(program.eval(out, &HashMap::new()).unwrap().item(), expect);
        let g = program.gradient(out, &HashMap::new(), &[LeafId(0)]).unwrap();
        assert_relative_eq!(g.get(LeafId(0)).unwrap().data()[0], 2.0 * 0.5 / 2.5);
    }
}
