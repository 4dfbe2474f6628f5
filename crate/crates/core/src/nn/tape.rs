//! Reverse-mode automatic differentiation over an explicit operation tape.
//!
//! Every op works on two-dimensional tensors. The tape records each result
//! together with the op that produced it; `backward` walks the record in
//! reverse and accumulates adjoints. Parameters enter the tape once per pass
//! through [`Tape::param`], which caches the leaf so gradients from every use
//! of a weight land in the same slot.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_a_bt_acc, matmul_at_b_acc, matmul_into, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Exp,
    Sin,
    Cos,
    Softplus,
    Square,
    Sqrt,
    Recip,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Exp => y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Spatial layout of a batched NHWC feature map whose rows are
/// `(n, y, x)` positions and whose columns are channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Im2ColSpec {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Im2ColSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(Error::InvalidArgument(
                "conv stride and kernel must be positive".into(),
            ));
        }
        if self.kernel > self.height + 2 * self.padding || self.kernel > self.width + 2 * self.padding
        {
            return Err(Error::InvalidArgument(format!(
                "kernel {} does not fit padded input {}x{} (padding {})",
                self.kernel, self.height, self.width, self.padding
            )));
        }
        Ok(())
    }

    /// For each output row and patch column, the flat input index (or `None`
    /// for padding).
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, Option<usize>)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let patch = self.kernel * self.kernel * self.channels;
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (n * oh + oy) * ow + ox;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.height
                                && (ix as usize) < self.width;
                            for c in 0..self.channels {
                                let col = (ky * self.kernel + kx) * self.channels + c;
                                let src = inside.then(|| {
                                    ((n * self.height + iy as usize) * self.width + ix as usize)
                                        * self.channels
                                        + c
                                });
                                f(row * patch + col, col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(Var, Unary),
    Sum(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows(Var, Rc<[usize]>),
    SegmentSoftmax(Var, Rc<[usize]>),
    PairwiseSqDist(Var, Var),
    GatherElems(Var, Rc<[usize]>),
    Reshape(Var),
    Im2Col(Var, Im2ColSpec),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
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
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// Constant input (no gradient is propagated past it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: f64) -> Var {
        self.input(Tensor::filled(&[rows, cols], value))
    }

    /// Leaf for a stored parameter; repeated calls within one pass return
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] * [{k2}x{n}]: inner dimensions differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape2(a), self.shape2(b));
        if sa != sb {
            return Err(Error::shape(name, format!("{sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Tensor::matrix(sa.0, sa.1, data)?, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[m,n] + b[1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let bl = self.value(b).len();
        if bl != n {
            return Err(Error::shape("add_row", format!("[{m}x{n}] + row of {bl}")));
        }
        let bd = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, y) in row.iter_mut().zip(&bd) {
                *x += y;
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddRow(a, b)))
    }

    /// `a[m,n] * c[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.shape2(a);
        let (cm, cn) = self.shape2(c);
        if cm != m || cn != 1 {
            return Err(Error::shape(
                "mul_col",
                format!("[{m}x{n}] * [{cm}x{cn}]"),
            ));
        }
        let cd = self.value(c).data();
        let data = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .zip(cd)
            .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
            .collect();
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MulCol(a, c)))
    }

    /// `a * s` where `s` is a `[1,1]` variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", "multiplier must be [1x1]"));
        }
        let sv = self.scalar_value(s);
        let (m, n) = self.shape2(a);
        let data = self.value(a).data().iter().map(|x| x * sv).collect();
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddConst(a))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let value = self.value(a).map(|x| f.apply(x));
        self.push(value, Op::Unary(a, f))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// Sum of all entries, `[1,1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums, `[m,1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (_, n) = self.shape2(a);
        let data: Vec<f64> = if n == 0 {
            vec![0.0; self.value(a).rows()]
        } else {
            self.value(a).data().chunks(n).map(|r| r.iter().sum()).collect()
        };
        self.push(Tensor::column(data), Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.shape2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape2(p).1).collect();
        for &p in parts {
            if self.shape2(p).0 != m {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.shape2(parts[0]).1;
        let mut m = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.shape2(p);
            if pn != n {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            m += pm;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor::matrix(m, len, data)?, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor::matrix(idx.len(), n, data)?, Op::GatherRows(a, idx)))
    }

    /// `out[idx[r]] += a[r]` into a fresh `[out_rows, n]` tensor.
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<[usize]>, out_rows: usize) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if idx.len() != m {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} indices for {m} rows", idx.len()),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_rows) {
            return Err(Error::shape("scatter_rows", format!("row {bad} of {out_rows}")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; out_rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &s) in data[i * n..(i + 1) * n].iter_mut().zip(&src[r * n..(r + 1) * n]) {
                *o += s;
            }
        }
        Ok(self.push(Tensor::matrix(out_rows, n, data)?, Op::ScatterRows(a, idx)))
    }

    /// Softmax of a column `[m,1]` taken separately within each segment;
    /// `segments[r]` names the group of row `r`.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.shape2(a);
        if n != 1 || segments.len() != m {
            return Err(Error::shape(
                "segment_softmax",
                format!("[{m}x{n}] with {} segment ids", segments.len()),
            ));
        }
        let x = self.value(a).data();
        let n_seg = segments.iter().max().map_or(0, |&s| s + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (&v, &s) in x.iter().zip(segments.iter()) {
            max[s] = max[s].max(v);
        }
        let mut out: Vec<f64> = x
            .iter()
            .zip(segments.iter())
            .map(|(&v, &s)| (v - max[s]).exp())
            .collect();
        let mut denom = vec![0.0; n_seg];
        for (&e, &s) in out.iter().zip(segments.iter()) {
            denom[s] += e;
        }
        for (o, &s) in out.iter_mut().zip(segments.iter()) {
            *o /= denom[s];
        }
        Ok(self.push(Tensor::column(out), Op::SegmentSoftmax(a, segments)))
    }

    /// Squared Euclidean distances between the rows of `a[m,d]` and `b[n,d]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.shape2(a);
        let (n, d2) = self.shape2(b);
        if d != d2 {
            return Err(Error::shape("pairwise_sq_dist", format!("dims {d} vs {d2}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let ai = &ad[i * d..(i + 1) * d];
            for j in 0..n {
                let bj = &bd[j * d..(j + 1) * d];
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::PairwiseSqDist(a, b)))
    }

    /// Pick flat entries, `[idx.len(), 1]`.
    pub fn gather_elems(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let len = self.value(a).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::shape("gather_elems", format!("entry {bad} of {len}")));
        }
        let src = self.value(a).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::column(data), Op::GatherElems(a, idx)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshaped(vec![rows, cols])?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Unfold `[batch*h*w, c]` feature rows into convolution patches
    /// `[batch*oh*ow, k*k*c]`.
    pub fn im2col(&mut self, a: Var, spec: Im2ColSpec) -> Result<Var> {
        spec.validate()?;
        let (m, c) = self.shape2(a);
        if m != spec.batch * spec.height * spec.width || c != spec.channels {
            return Err(Error::shape(
                "im2col",
                format!(
                    "input [{m}x{c}] does not match {}x{}x{}x{}",
                    spec.batch, spec.height, spec.width, spec.channels
                ),
            ));
        }
        let rows = spec.batch * spec.out_height() * spec.out_width();
        let patch = spec.kernel * spec.kernel * spec.channels;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * patch];
        spec.for_each_tap(|dst, _, s| {
            if let Some(s) = s {
                out[dst] = src[s];
            }
        });
        Ok(self.push(Tensor::matrix(rows, patch, out)?, Op::Im2Col(a, spec)))
    }

    /// Adjoints of every node given seed gradients on chosen outputs.
    pub fn backward_from(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::shape("backward", "seed gradient shape"));
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adjoints of a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        self.backward_from(&[(loss, Tensor::scalar(1.0))])
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape2(*a);
                let n = self.shape2(*b).1;
                let mut ga = vec![0.0; m * k];
                matmul_a_bt_acc(gd, self.value(*b).data(), &mut ga, m, k, n);
                let mut gb = vec![0.0; k * n];
                matmul_at_b_acc(self.value(*a).data(), gd, &mut gb, m, k, n);
                accumulate_raw(grads, *a, ga, self.value(*a));
                accumulate_raw(grads, *b, gb, self.value(*b));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = gd.iter().zip(bv).map(|(x, y)| x * y).collect();
                let gb = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                accumulate_raw(grads, *a, ga, self.value(*a));
                accumulate_raw(grads, *b, gb, self.value(*b));
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                let n = g.cols();
                let mut gb = vec![0.0; n];
                if n > 0 {
                    for row in gd.chunks(n) {
                        for (o, x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
                accumulate_raw(grads, *b, gb, self.value(*b));
            }
            Op::MulCol(a, c) => {
                let n = g.cols().max(1);
                let (av, cv) = (self.value(*a).data(), self.value(*c).data());
                let ga = gd
                    .chunks(n)
                    .zip(cv)
                    .flat_map(|(row, &s)| row.iter().map(move |x| x * s))
                    .collect();
                let gc = gd
                    .chunks(n)
                    .zip(av.chunks(n))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                accumulate_raw(grads, *a, ga, self.value(*a));
                accumulate_raw(grads, *c, gc, self.value(*c));
            }
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                let av = self.value(*a).data();
                accumulate(grads, *a, g.map(|x| x * sv));
                let gs: f64 = gd.iter().zip(av).map(|(x, y)| x * y).sum();
                accumulate_raw(grads, *s, vec![gs], self.value(*s));
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|x| x * f)),
            Op::AddConst(a) => accumulate(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let xv = self.value(*a).data();
                let yv = node.value.data();
                let ga = gd
                    .iter()
                    .zip(xv.iter().zip(yv))
                    .map(|(gg, (&x, &y))| gg * f.derivative(x, y))
                    .collect();
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
            Op::Sum(a) => {
                let s = gd[0];
                accumulate(grads, *a, self.value(*a).map(|_| s));
            }
            Op::SumCols(a) => {
                let (m, n) = self.shape2(*a);
                let mut ga = Vec::with_capacity(m * n);
                for &s in gd {
                    ga.extend(std::iter::repeat_n(s, n));
                }
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let n = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape2(p).1;
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&gd[r * n + offset..r * n + offset + w]);
                    }
                    accumulate_raw(grads, p, gp, self.value(p));
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate_raw(grads, p, gd[offset..offset + len].to_vec(), self.value(p));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape2(*a);
                let w = g.cols();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.shape2(*a);
                let mut ga = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *o += x;
                    }
                }
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
            Op::ScatterRows(a, idx) => {
                let n = g.cols();
                let mut ga = Vec::with_capacity(idx.len() * n);
                for &i in idx.iter() {
                    ga.extend_from_slice(&gd[i * n..(i + 1) * n]);
                }
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = node.value.data();
                let n_seg = segments.iter().max().map_or(0, |&s| s + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&yy, &gg), &s) in y.iter().zip(gd).zip(segments.iter()) {
                    dot[s] += yy * gg;
                }
                let ga = y
                    .iter()
                    .zip(gd)
                    .zip(segments.iter())
                    .map(|((&yy, &gg), &s)| yy * (gg - dot[s]))
                    .collect();
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
            Op::PairwiseSqDist(a, b) => {
                let (m, d) = self.shape2(*a);
                let n = self.shape2(*b).0;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; m * d];
                let mut gb = vec![0.0; n * d];
                for i in 0..m {
                    for j in 0..n {
                        let w = 2.0 * gd[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = ad[i * d + t] - bd[j * d + t];
                            ga[i * d + t] += w * diff;
                            gb[j * d + t] -= w * diff;
                        }
                    }
                }
                accumulate_raw(grads, *a, ga, self.value(*a));
                accumulate_raw(grads, *b, gb, self.value(*b));
            }
            Op::GatherElems(a, idx) => {
                let mut ga = vec![0.0; self.value(*a).len()];
                for (&i, &x) in idx.iter().zip(gd) {
                    ga[i] += x;
                }
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
            Op::Reshape(a) => {
                accumulate_raw(grads, *a, gd.to_vec(), self.value(*a));
            }
            Op::Im2Col(a, spec) => {
                let mut ga = vec![0.0; self.value(*a).len()];
                spec.for_each_tap(|dst, _, s| {
                    if let Some(s) = s {
                        ga[s] += gd[dst];
                    }
                });
                accumulate_raw(grads, *a, ga, self.value(*a));
            }
        }
    }

    /// Parameter leaves created during this pass.
    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_raw(grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>, like: &Tensor) {
    let t = Tensor::new(like.shape().to_vec(), g).expect("gradient shape follows value shape");
    accumulate(grads, v, t);
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Add the gradient of every parameter leaf on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (id, var) in tape.param_leaves() {
            if let Some(g) = self.get(var) {
                store.param_mut(id).grad.add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut p = x.to_vec();
        (0..x.len())
            .map(|i| {
                p[i] = x[i] + h;
                let up = f(&p);
                p[i] = x[i] - h;
                let down = f(&p);
                p[i] = x[i];
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn check_op(x0: &[f64], rows: usize, build: impl Fn(&mut Tape, Var) -> Var) {
        let cols = x0.len() / rows;
        let eval = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.input(Tensor::matrix(rows, cols, x.to_vec()).unwrap());
            let out = build(&mut t, v);
            t.scalar_value(out)
        };
        let mut t = Tape::new();
        let v = t.input(Tensor::matrix(rows, cols, x0.to_vec()).unwrap());
        let out = build(&mut t, v);
        let g = t.backward(out).unwrap();
        let analytic = g.get(v).unwrap().data().to_vec();
        let numeric = finite_diff(eval, x0, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let x = [0.3, -0.7, 1.2, 0.05];
        for f in [
            Unary::Sigmoid,
            Unary::Tanh,
            Unary::LeakyRelu(0.2),
            Unary::Exp,
            Unary::Sin,
            Unary::Cos,
            Unary::Softplus,
            Unary::Square,
        ] {
            check_op(&x, 2, |t, v| {
                let y = t.unary(v, f);
                let w = t.input(Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
                let p = t.mul(y, w).unwrap();
                t.sum(p)
            });
        }
        check_op(&[0.4, 1.5, 2.0, 0.9], 2, |t, v| {
            let a = t.sqrt(v);
            let b = t.recip(v);
            let c = t.add(a, b).unwrap();
            t.sum(c)
        });
    }

    #[test]
    fn segment_softmax_gradient() {
        let seg: Rc<[usize]> = vec![0, 0, 1, 1, 1].into();
        check_op(&[0.1, -0.4, 2.0, 0.3, -1.0], 5, move |t, v| {
            let s = t.segment_softmax(v, seg.clone()).unwrap();
            let w = t.input(Tensor::column(vec![1.0, 3.0, -1.0, 0.5, 2.0]));
            let p = t.mul(s, w).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn gather_scatter_concat_gradient() {
        check_op(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 3, |t, v| {
            let g = t.gather_rows(v, vec![2, 0, 2].into()).unwrap();
            let s = t.scatter_rows(g, vec![1, 1, 0].into(), 2).unwrap();
            let c = t.concat_cols(&[s, s]).unwrap();
            let r = t.concat_rows(&[c, c]).unwrap();
            let sl = t.slice_cols(r, 1, 2).unwrap();
            let sq = t.square(sl);
            let sc = t.sum_cols(sq);
            let w = t.input(Tensor::column(vec![1.0, 2.0, 3.0, 4.0]));
            let p = t.mul(sc, w).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn pairwise_and_elems_gradient() {
        check_op(&[0.1, 0.9, -0.3, 0.4, 1.1, -0.2], 3, |t, v| {
            let d = t.pairwise_sq_dist(v, v).unwrap();
            let e = t.gather_elems(d, vec![1, 5, 6].into()).unwrap();
            let q = t.square(e);
            t.sum(q)
        });
    }

    #[test]
    fn matmul_broadcast_gradient() {
        check_op(&[0.5, -1.0, 2.0, 0.25, 0.75, -0.5], 2, |t, v| {
            let w = t.input(Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 0.2, 0.7, -1.1]).unwrap());
            let y = t.matmul(v, w).unwrap();
            let b = t.input(Tensor::row(vec![0.1, -0.2]));
            let y = t.add_row(y, b).unwrap();
            let c = t.slice_cols(v, 0, 1).unwrap();
            let y = t.mul_col(y, c).unwrap();
            let s = t.slice_cols(v, 2, 1).unwrap();
            let s = t.gather_rows(s, vec![0].into()).unwrap();
            let y = t.mul_scalar(y, s).unwrap();
            let y = t.tanh(y);
            t.sum(y)
        });
    }

    #[test]
    fn im2col_gradient() {
        let spec = Im2ColSpec {
            batch: 1,
            height: 3,
            width: 3,
            channels: 2,
            kernel: 2,
            stride: 1,
            padding: 1,
        };
        let x: Vec<f64> = (0..18).map(|i| (i as f64 * 0.37).sin()).collect();
        check_op(&x, 9, move |t, v| {
            let c = t.im2col(v, spec).unwrap();
            let q = t.square(c);
            let w = t.input(Tensor::filled(&[16, 8], 1.0).map(|x| x * 0.5));
            let p = t.mul(q, w).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut t = Tape::new();
        let a = t.input(Tensor::zeros(&[2, 3]));
        let b = t.input(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("inner dimensions"));
    }
}
