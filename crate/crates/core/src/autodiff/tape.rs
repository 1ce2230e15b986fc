use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, Scalar, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Reshape(Var),
    RowNorm(Var),
    ExpandLast { x: Var, n: usize },
    Recip(Var),
    ClampMin { x: Var, floor: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::Reshape(_) => "reshape",
            Op::RowNorm(_) => "row_norm",
            Op::ExpandLast { .. } => "expand_last",
            Op::Recip(_) => "recip",
            Op::ClampMin { .. } => "clamp_min",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Relu(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Reshape(x)
            | Op::RowNorm(x)
            | Op::ExpandLast { x, .. }
            | Op::Recip(x)
            | Op::ClampMin { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitives in execution order so their adjoints can be replayed.
///
/// Every primitive validates shapes up front and rejects non-finite results,
/// so a value on the tape is always finite.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.raw_push(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.raw_push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.raw_push(store.get(id).value.clone(), Op::Param(id), true)
    }

    fn raw_push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerics(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.raw_push(value, op, needs_grad))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, what: &str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(shape_err!(
                "{what}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            ));
        }
        Ok(())
    }

    /// `x W + b` for `x: [R, I]`, `W: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err!("linear: x {:?} with W {:?}", xs, ws));
        }
        let (r, i, o) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err!("linear: bias {:?}, expected [{o}]", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); r * o];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            r,
            i,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            beta,
            &mut out,
        );
        self.push(Tensor::new(vec![r, o], out)?, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(T::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Relu(x))
    }

    /// Softmax along `axis`, shifted by the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(src[at(a)]);
                }
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - mx).exp();
                    out[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / sum;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::Softmax { x, axis })
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank == 0 {
            return Err(shape_err!("softmax_last on a scalar"));
        }
        self.softmax(x, rank - 1)
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(src[at(a)]);
                }
                let mut sum = T::zero();
                for a in 0..len {
                    sum += (src[at(a)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for a in 0..len {
                    out[at(a)] = src[at(a)] - lse;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(t, Op::LogSoftmax { x, axis })
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a + c).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * c).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::MulScalar(x, c))
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.recip()).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::Recip(x))
    }

    /// Elementwise `max(x, floor)`; no gradient flows where the floor wins.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let floor = T::from_f64(floor);
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a < floor { floor } else { a }).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push(t, Op::ClampMin { x, floor })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis })
    }

    /// Maximum over `axis`; ties route the gradient to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "max_axis")?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        if len == 0 {
            return Err(shape_err!("max_axis over an empty axis"));
        }
        let src = v.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut mx = src[o * len * inner + i];
                for a in 1..len {
                    let val = src[(o * len + a) * inner + i];
                    if val > mx {
                        mx = val;
                        best = a;
                    }
                }
                out[o * inner + i] = mx;
                argmax[o * inner + i] = best;
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::MaxAxis { x, axis, argmax })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let agree = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !agree {
                return Err(shape_err!("concat: {:?} vs {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let chunk = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let op = Op::Concat {
            xs: xs.to_vec(),
            axis,
        };
        self.push(Tensor::new(shape, out)?, op)
    }

    /// Selects leading-axis rows of `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        if v.rank() == 0 {
            return Err(shape_err!("gather_rows on a scalar"));
        }
        let rows = v.rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let w = v.row_len();
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in &index {
            out.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        self.push(Tensor::new(shape, out)?, Op::GatherRows { x, index })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Euclidean norm of each row of a `[R, C]` tensor, giving `[R]`.
    ///
    /// The gradient at a zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(shape_err!("row_norm expects rank 2, got {:?}", v.shape()));
        }
        let out = (0..v.rows())
            .map(|r| v.row(r).iter().map(|&a| a * a).sum::<T>().sqrt())
            .collect();
        self.push(Tensor::new(vec![v.rows()], out)?, Op::RowNorm(x))
    }

    /// Repeats a trailing unit axis `n` times: `[.., 1] -> [.., n]`.
    pub fn expand_last(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().last() != Some(&1) {
            return Err(shape_err!("expand_last needs a trailing 1, got {:?}", v.shape()));
        }
        let out = v
            .data()
            .iter()
            .flat_map(|&a| std::iter::repeat_n(a, n))
            .collect();
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::ExpandLast { x, n })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(contract_err!("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            adj,
        })
    }

    fn slot<'a>(&self, adj: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(adj[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, node: &Node<T>, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if let Some(dx) = self.slot(adj, *x) {
                    T::gemm(r, o, i, g, false, wv.data(), true, T::one(), dx);
                }
                if let Some(dw) = self.slot(adj, *w) {
                    T::gemm(i, r, o, xv.data(), true, g, false, T::one(), dw);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(adj, *b) {
                        for row in g.chunks(o) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        if y > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(dx) = self.slot(adj, *x) {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let mut s = T::zero();
                            for a in 0..len {
                                s += g[at(a)] * y[at(a)];
                            }
                            for a in 0..len {
                                dx[at(a)] += y[at(a)] * (g[at(a)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                if let Some(dx) = self.slot(adj, *x) {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let mut s = T::zero();
                            for a in 0..len {
                                s += g[at(a)];
                            }
                            for a in 0..len {
                                dx[at(a)] += g[at(a)] - y[at(a)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(adj, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(adj, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(adj, *a) {
                    for ((d, &gv), &q) in da.iter_mut().zip(g).zip(vb) {
                        *d += gv * q;
                    }
                }
                if let Some(db) = self.slot(adj, *b) {
                    for ((d, &gv), &p) in db.iter_mut().zip(g).zip(va) {
                        *d += gv * p;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    add_into(dx, g);
                }
            }
            Op::MulScalar(x, c) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *c;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    let share = g[0] / T::from_f64(dx.len() as f64);
                    for d in dx.iter_mut() {
                        *d += share;
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if let Some(dx) = self.slot(adj, *x) {
                    let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                dx[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                if let Some(dx) = self.slot(adj, *x) {
                    let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                    for o in 0..outer {
                        for i in 0..inner {
                            let a = argmax[o * inner + i];
                            dx[(o * len + a) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if let Some(dx) = self.slot(adj, x) {
                        let chunk = len * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..chunk];
                            add_into(&mut dx[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, index } => {
                if let Some(dx) = self.slot(adj, *x) {
                    let w = out.row_len();
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut dx[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::RowNorm(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(adj, *x) {
                    let c = xv.row_len();
                    for (r, (&gv, &n)) in g.iter().zip(out.data()).enumerate() {
                        if n > T::zero() {
                            for k in 0..c {
                                dx[r * c + k] += gv * xv.data()[r * c + k] / n;
                            }
                        }
                    }
                }
            }
            Op::ExpandLast { x, n } => {
                if let Some(dx) = self.slot(adj, *x) {
                    for (d, chunk) in dx.iter_mut().zip(g.chunks(*n)) {
                        *d += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Recip(x) => {
                if let Some(dx) = self.slot(adj, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out.data()) {
                        *d -= gv * y * y;
                    }
                }
            }
            Op::ClampMin { x, floor } => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(adj, *x) {
                    for ((d, &gv), &a) in dx.iter_mut().zip(g).zip(xv.data()) {
                        if a >= *floor {
                            *d += gv;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// d(loss)/d(v); zeros when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.adj[v.0] {
            Some(a) => Tensor::new(shape, a.clone()).expect("adjoint shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Adds parameter adjoints into the store's `grad` buffers.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) {
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(a)) = (&node.op, &self.adj[idx]) {
                add_into(store.get_mut(*id).grad.data_mut(), a);
            }
        }
    }
}
