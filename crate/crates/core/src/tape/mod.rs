//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation eagerly: the value of a node is computed
//! when it is recorded, so the forward pass of a taped expression is the same
//! arithmetic as an untaped one. [`Tape::grad`] walks the tape backwards and
//! expresses every local derivative with the same primitive set, which makes
//! the gradients themselves differentiable when `create_graph` is set. The
//! model needs that for force-matching losses (gradients of forces with
//! respect to parameters).
//!
//! All reductions run in a fixed order (ascending source index), so gradients
//! are bit-reproducible.

mod mat;
mod trilinear;
mod unary;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

pub use mat::{matmul, Mat, Real};
pub use trilinear::TrilinearForm;
pub use unary::UnaryFn;

use crate::poly::Polynomial;
use crate::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Unary(Var, UnaryFn),
    GatherRows(Var, Arc<[usize]>),
    ScatterRows(Var, Arc<[usize]>),
    GatherCols(Var, Arc<[usize]>),
    ScatterCols(Var, Arc<[usize]>),
    SumAll(Var),
    Fill(Var),
    Trilinear { form: Arc<TrilinearForm>, slot: usize, inputs: [Option<Var>; 4] },
    RowPoly(Var, Arc<[Polynomial]>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    value: Mat<T>,
    requires_grad: bool,
}

/// An append-only computation graph.
#[derive(Debug)]
pub struct Tape<T: Real = f64> {
    id: u32,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), grad_enabled: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(Op::Leaf, value, rg)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar node");
        m.data[0]
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()]
    }

    fn contains(&self, v: Var) -> bool {
        v.tape == self.id && v.index() < self.nodes.len()
    }

    fn push(&mut self, op: Op, value: Mat<T>, requires_grad: bool) -> Var {
        let idx = u32::try_from(self.nodes.len()).expect("tape too long");
        self.nodes.push(Node { op, value, requires_grad: requires_grad && self.grad_enabled });
        Var { tape: self.id, idx }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p + q).collect();
        let value = Mat::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p - q).collect();
        let value = Mat::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Sub(a, b), value, rg)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p * q).collect();
        let value = Mat::from_vec(x.rows, x.cols, data);
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        let value = self.value(a).map(|v| v * ct);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = matmul(self.value(a), self.value(b), ta, tb);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul { a, b, ta, tb }, value, rg)
    }

    pub fn unary(&mut self, a: Var, f: UnaryFn) -> Var {
        let x = self.value(a);
        let value = Mat::from_vec(x.rows, x.cols, f.apply(&x.data));
        let rg = self.rg(&[a]);
        self.push(Op::Unary(a, f), value, rg)
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx = idx.into();
        let x = self.value(a);
        assert!(idx.iter().all(|&i| i < x.rows), "gather_rows index out of range");
        let value = x.select_rows(&idx);
        let rg = self.rg(&[a]);
        self.push(Op::GatherRows(a, idx), value, rg)
    }

    /// `out[idx[r]] += a[r]`, `out` has `n` rows; accumulation in ascending `r`.
    pub fn scatter_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>, n: usize) -> Var {
        let idx = idx.into();
        let x = self.value(a);
        assert_eq!(idx.len(), x.rows, "scatter_rows index length");
        let mut out = Mat::zeros(n, x.cols);
        for (r, &dst) in idx.iter().enumerate() {
            assert!(dst < n, "scatter_rows index out of range");
            for (o, &v) in out.row_mut(dst).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::ScatterRows(a, idx), out, rg)
    }

    /// `out[:, c] = a[:, idx[c]]`.
    pub fn gather_cols(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Var {
        let idx = idx.into();
        let x = self.value(a);
        assert!(idx.iter().all(|&i| i < x.cols), "gather_cols index out of range");
        let value = x.select_cols(&idx);
        let rg = self.rg(&[a]);
        self.push(Op::GatherCols(a, idx), value, rg)
    }

    /// `out[:, idx[c]] += a[:, c]`, `out` has `n` columns.
    pub fn scatter_cols(&mut self, a: Var, idx: impl Into<Arc<[usize]>>, n: usize) -> Var {
        let idx = idx.into();
        let x = self.value(a);
        assert_eq!(idx.len(), x.cols, "scatter_cols index length");
        assert!(idx.iter().all(|&i| i < n), "scatter_cols index out of range");
        let mut out = Mat::zeros(x.rows, n);
        for r in 0..x.rows {
            let src = x.row(r);
            let dst = out.row_mut(r);
            for (c, &i) in idx.iter().enumerate() {
                dst[i] += src[c];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::ScatterCols(a, idx), out, rg)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Op::SumAll(a), Mat::scalar(s), rg)
    }

    /// Broadcasts a `1×1` node to `rows × cols`.
    pub fn fill(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.scalar(a);
        let rg = self.rg(&[a]);
        self.push(Op::Fill(a), Mat::filled(rows, cols, v), rg)
    }

    /// Evaluates `form` at `slot`; the other three slots are taken from `inputs`.
    pub fn trilinear(&mut self, form: &Arc<TrilinearForm>, slot: usize, inputs: [Option<Var>; 4]) -> Var {
        let vals: [Option<&Mat<T>>; 4] = std::array::from_fn(|j| inputs[j].map(|v| self.value(v)));
        let value = form.eval(slot, vals);
        let used: Vec<Var> = inputs.iter().flatten().copied().collect();
        let rg = self.rg(&used);
        self.push(Op::Trilinear { form: Arc::clone(form), slot, inputs }, value, rg)
    }

    /// Row-wise polynomial map: `out[r, j] = polys[j](a[r, :])`.
    pub fn row_poly(&mut self, a: Var, polys: &Arc<[Polynomial]>) -> Var {
        let x = self.value(a);
        assert!(polys.iter().all(|p| p.n_vars() == x.cols), "row_poly arity");
        let mut out = Mat::zeros(x.rows, polys.len());
        for r in 0..x.rows {
            let row = x.row(r);
            for (j, p) in polys.iter().enumerate() {
                out.data[r * polys.len() + j] = p.eval_t(row);
            }
        }
        let rg = self.rg(&[a]);
        self.push(Op::RowPoly(a, Arc::clone(polys)), out, rg)
    }

    /// Gradients of the scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph`, the returned nodes are themselves differentiable.
    /// Variables the root does not depend on get an all-zero gradient.
    pub fn grad(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !self.contains(root) {
            return Err(Error::Invalid("root is not a node of this tape".into()));
        }
        if let Some(bad) = wrt.iter().find(|v| !self.contains(**v)) {
            return Err(Error::Invalid(format!("node {} is not in the graph", bad.idx)));
        }
        if self.shape(root) != (1, 1) {
            return Err(Error::Shape(format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let saved = self.grad_enabled;
        self.grad_enabled = create_graph && saved;
        let n = root.index() + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        if self.node(root).requires_grad {
            grads[root.index()] = Some(self.constant(Mat::scalar(T::one())));
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.backward_op(&op, g) {
                let slot = &mut grads[input.index()];
                *slot = Some(match *slot {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib),
                });
            }
        }
        let out = wrt
            .iter()
            .map(|&v| match grads.get(v.index()).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape(v);
                    self.constant(Mat::zeros(r, c))
                }
            })
            .collect();
        self.grad_enabled = saved;
        Ok(out)
    }

    /// Vector-Jacobian products of `op` for the upstream gradient `g`.
    fn backward_op(&mut self, op: &Op, g: Var) -> Vec<(Var, Var)> {
        let mut out = Vec::new();
        let needs = |t: &Self, v: Var| t.node(v).requires_grad;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(self, *a) {
                    out.push((*a, g));
                }
                if needs(self, *b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if needs(self, *a) {
                    out.push((*a, g));
                }
                if needs(self, *b) {
                    let ng = self.scale(g, -1.0);
                    out.push((*b, ng));
                }
            }
            Op::Mul(a, b) => {
                if needs(self, *a) {
                    let ga = self.mul(g, *b);
                    out.push((*a, ga));
                }
                if needs(self, *b) {
                    let gb = self.mul(g, *a);
                    out.push((*b, gb));
                }
            }
            Op::Scale(a, c) => {
                if needs(self, *a) {
                    let ga = self.scale(g, *c);
                    out.push((*a, ga));
                }
            }
            &Op::MatMul { a, b, ta, tb } => {
                if needs(self, a) {
                    let ga = if ta { self.matmul_t(b, g, tb, true) } else { self.matmul_t(g, b, false, !tb) };
                    out.push((a, ga));
                }
                if needs(self, b) {
                    let gb = if tb { self.matmul_t(g, a, true, ta) } else { self.matmul_t(a, g, !ta, false) };
                    out.push((b, gb));
                }
            }
            Op::Unary(a, f) => {
                if needs(self, *a) {
                    let d = self.unary(*a, f.derivative());
                    let ga = self.mul(g, d);
                    out.push((*a, ga));
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(self, *a) {
                    let rows = self.value(*a).rows;
                    let ga = self.scatter_rows(g, Arc::clone(idx), rows);
                    out.push((*a, ga));
                }
            }
            Op::ScatterRows(a, idx) => {
                if needs(self, *a) {
                    let ga = self.gather_rows(g, Arc::clone(idx));
                    out.push((*a, ga));
                }
            }
            Op::GatherCols(a, idx) => {
                if needs(self, *a) {
                    let cols = self.value(*a).cols;
                    let ga = self.scatter_cols(g, Arc::clone(idx), cols);
                    out.push((*a, ga));
                }
            }
            Op::ScatterCols(a, idx) => {
                if needs(self, *a) {
                    let ga = self.gather_cols(g, Arc::clone(idx));
                    out.push((*a, ga));
                }
            }
            Op::SumAll(a) => {
                if needs(self, *a) {
                    let (r, c) = self.shape(*a);
                    let ga = self.fill(g, r, c);
                    out.push((*a, ga));
                }
            }
            Op::Fill(a) => {
                if needs(self, *a) {
                    let ga = self.sum(g);
                    out.push((*a, ga));
                }
            }
            Op::Trilinear { form, slot, inputs } => {
                for j in 0..4 {
                    let Some(v) = inputs[j] else { continue };
                    if !needs(self, v) {
                        continue;
                    }
                    let mut ins = *inputs;
                    ins[*slot] = Some(g);
                    ins[j] = None;
                    let gj = self.trilinear(form, j, ins);
                    out.push((v, gj));
                }
            }
            Op::RowPoly(a, polys) => {
                if needs(self, *a) {
                    let n_in = self.value(*a).cols;
                    let n_out = polys.len();
                    let mut acc: Option<Var> = None;
                    for c in 0..n_in {
                        let dpolys: Arc<[Polynomial]> = polys.iter().map(|p| p.derivative(c)).collect();
                        let jac = self.row_poly(*a, &dpolys);
                        let prod = self.mul(g, jac);
                        let col = self.scatter_cols(prod, vec![0; n_out], 1);
                        let placed = self.scatter_cols(col, vec![c], n_in);
                        acc = Some(match acc {
                            None => placed,
                            Some(prev) => self.add(prev, placed),
                        });
                    }
                    if let Some(ga) = acc {
                        out.push((*a, ga));
                    }
                }
            }
        }
        out
    }
}
