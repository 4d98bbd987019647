//! Reverse-mode differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates adjoints; parameter adjoints
//! are added into a caller-owned [`Gradients`] buffer, so calling backward
//! twice sums the two contributions.

use crate::error::{Error, Result};

use super::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor2) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }
}

/// Gradient buffers shaped like a [`Params`] collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor2>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Gradients {
            grads: params
                .tensors
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.grads[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Gather(ParamId, Vec<usize>),
    ConcatRows(Vec<Var>),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    ClampMin0(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    Row(Var, usize),
    Cols(Var, usize),
    SumAll(Var),
    LogSigmoid(Var),
    BoxDistance {
        qc: Var,
        qo: Var,
        ec: Var,
        eo: Var,
        alpha: f64,
    },
}

struct Node {
    value: Tensor2,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
}

/// Adjoints of every tape node after a backward pass.
pub struct NodeGrads {
    grads: Vec<Option<Tensor2>>,
}

impl NodeGrads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Selected rows of a parameter table, in the given order.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let table = self.params.get(id);
        let mut out = Tensor2::zeros(rows.len(), table.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= table.rows() {
                return Err(Error::shape(
                    "gather",
                    format!("row {r} of a {}-row table", table.rows()),
                ));
            }
            out.row_mut(i).copy_from_slice(table.row(r));
        }
        Ok(self.push(out, Op::Gather(id, rows.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x + b` with the 1xm row `b` added to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `y = xW + b`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// `max(x, 0)` used to materialise nonnegative box offsets.
    pub fn clamp_min0(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::ClampMin0(x))
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor2::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        self.push(out, Op::SumRows(x))
    }

    /// Column-wise maximum; ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() == 0 {
            return Err(Error::shape("max_rows", "no rows"));
        }
        let mut out = Tensor2::from_vec(1, xv.cols(), xv.row(0).to_vec())?;
        let mut arg = vec![0usize; xv.cols()];
        for r in 1..xv.rows() {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > out.get(0, c) {
                    out.set(0, c, v);
                    arg[c] = r;
                }
            }
        }
        Ok(self.push(out, Op::MaxRows(x, arg)))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if i >= xv.rows() {
            return Err(Error::shape("row", format!("row {i} of {}", xv.rows())));
        }
        let out = Tensor2::row_vector(xv.row(i).to_vec());
        Ok(self.push(out, Op::Row(x, i)))
    }

    /// Columns `start..end`.
    pub fn cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::shape(
                "cols",
                format!("{start}..{end} of {} columns", xv.cols()),
            ));
        }
        let mut data = Vec::with_capacity(xv.rows() * (end - start));
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor2::from_vec(xv.rows(), end - start, data)?;
        Ok(self.push(out, Op::Cols(x, start)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor2::scalar(s), Op::SumAll(x))
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(x))
    }

    /// Box-to-box distance between one query box `(qc, qo)` (1xd each) and
    /// `k` entity boxes `(ec, eo)` (kxd each), giving a kx1 column:
    /// `Σ max(0, δ-s) + alpha·Σ min(δ, s)` with `δ = |qc-ec|`, `s = qo+eo`.
    pub fn box_distance(&mut self, qc: Var, qo: Var, ec: Var, eo: Var, alpha: f64) -> Result<Var> {
        let (qcv, qov, ecv, eov) = (
            self.value(qc),
            self.value(qo),
            self.value(ec),
            self.value(eo),
        );
        let d = qcv.cols();
        if qcv.rows() != 1 || qov.shape() != (1, d) || ecv.cols() != d || eov.shape() != ecv.shape()
        {
            return Err(Error::shape(
                "box_distance",
                format!(
                    "query {:?}/{:?}, entities {:?}/{:?}",
                    qcv.shape(),
                    qov.shape(),
                    ecv.shape(),
                    eov.shape()
                ),
            ));
        }
        let k = ecv.rows();
        let mut out = Tensor2::zeros(k, 1);
        for i in 0..k {
            let (mut outside, mut inside) = (0.0, 0.0);
            for j in 0..d {
                let delta = (qcv.get(0, j) - ecv.get(i, j)).abs();
                let s = qov.get(0, j) + eov.get(i, j);
                outside += (delta - s).max(0.0);
                inside += delta.min(s);
            }
            out.set(i, 0, outside + alpha * inside);
        }
        Ok(self.push(
            out,
            Op::BoxDistance {
                qc,
                qo,
                ec,
                eo,
                alpha,
            },
        ))
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, output: Var, grads: &mut Gradients) -> Result<NodeGrads> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("output must be 1x1, got {:?}", self.value(output).shape()),
            ));
        }
        self.backward_with(output, Tensor2::scalar(1.0), grads)
    }

    /// Backpropagates an explicit upstream adjoint `seed` from `output`.
    pub fn backward_with(
        &self,
        output: Var,
        seed: Tensor2,
        grads: &mut Gradients,
    ) -> Result<NodeGrads> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward", "seed shape differs from output"));
        }
        if grads.len() != self.params.len() {
            return Err(Error::shape(
                "backward",
                "gradient buffer / params mismatch",
            ));
        }
        let mut adj: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(seed);

        fn acc(adj: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Gather(id, rows) => {
                    let buf = grads.get_mut(*id);
                    for (i, &r) in rows.iter().enumerate() {
                        for (b, x) in buf.row_mut(r).iter_mut().zip(g.row(i)) {
                            *b += x;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let cols = g.cols();
                        let part = Tensor2::from_vec(
                            rows,
                            cols,
                            g.data()[offset * cols..(offset + rows) * cols].to_vec(),
                        )?;
                        acc(&mut adj, p, part);
                        offset += rows;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddBias(x, b) => {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut adj, *b, gb);
                    acc(&mut adj, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone());
                    acc(&mut adj, *b, g);
                }
                Op::Scale(x, c) => acc(&mut adj, *x, g.map(|v| v * c)),
                Op::Shift(x) => acc(&mut adj, *x, g),
                Op::Relu(x) | Op::ClampMin0(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::SumRows(x) => {
                    let rows = self.value(*x).rows();
                    let mut gx = Tensor2::zeros(rows, g.cols());
                    for r in 0..rows {
                        gx.row_mut(r).copy_from_slice(g.data());
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::MaxRows(x, arg) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor2::zeros(rows, cols);
                    for (c, &r) in arg.iter().enumerate() {
                        gx.set(r, c, g.get(0, c));
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Row(x, i) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor2::zeros(rows, cols);
                    gx.row_mut(*i).copy_from_slice(g.data());
                    acc(&mut adj, *x, gx);
                }
                Op::Cols(x, start) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::SumAll(x) => {
                    let s = g.item();
                    let gx = self.value(*x).map(|_| s);
                    acc(&mut adj, *x, gx);
                }
                Op::LogSigmoid(x) => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *gv *= sigmoid(-v);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::BoxDistance {
                    qc,
                    qo,
                    ec,
                    eo,
                    alpha,
                } => {
                    let (qcv, qov, ecv, eov) = (
                        self.value(*qc),
                        self.value(*qo),
                        self.value(*ec),
                        self.value(*eo),
                    );
                    let (k, d) = ecv.shape();
                    let mut gqc = Tensor2::zeros(1, d);
                    let mut gqo = Tensor2::zeros(1, d);
                    let mut gec = Tensor2::zeros(k, d);
                    let mut geo = Tensor2::zeros(k, d);
                    for i in 0..k {
                        let up = g.get(i, 0);
                        for j in 0..d {
                            let diff = qcv.get(0, j) - ecv.get(i, j);
                            let delta = diff.abs();
                            let s = qov.get(0, j) + eov.get(i, j);
                            // outside term active when δ > s, inside term takes δ otherwise
                            let (d_delta, d_s) = if delta > s {
                                (1.0, alpha - 1.0)
                            } else {
                                (*alpha, 0.0)
                            };
                            let sign = if diff > 0.0 {
                                1.0
                            } else if diff < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            let gc = up * d_delta * sign;
                            gqc.data_mut()[j] += gc;
                            gec.set(i, j, -gc);
                            gqo.data_mut()[j] += up * d_s;
                            geo.set(i, j, up * d_s);
                        }
                    }
                    acc(&mut adj, *qc, gqc);
                    acc(&mut adj, *qo, gqo);
                    acc(&mut adj, *ec, gec);
                    acc(&mut adj, *eo, geo);
                }
            }
        }
        Ok(NodeGrads { grads: adj })
    }
}
