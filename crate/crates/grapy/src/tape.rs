//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and enough context to run its backward rule. Nodes are only ever appended,
//! so a node's inputs always precede it and a single reverse sweep visits
//! operations in a valid order.
//!
//! ```
//! use grapy::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let half = tape.scale(sq, 0.5).unwrap();
//! let loss = tape.sum_all(half).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0, 3.0]);
//! ```

use crate::labels::{LabelError, LabelMap};
use crate::tensor::{strides, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Log(Var),
    Relu(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum {
        input: Var,
        axes: Vec<usize>,
    },
    Mean {
        input: Var,
        axes: Vec<usize>,
    },
    MaskedMean {
        input: Var,
        labels: Vec<usize>,
        counts: Vec<usize>,
    },
    MaskedMax {
        input: Var,
        /// Winning pixel per `(class, channel)`, `None` for empty classes.
        winners: Vec<Option<usize>>,
    },
    GatherRows {
        table: Var,
        labels: Vec<usize>,
    },
    Pick {
        input: Var,
        labels: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SoftmaxLast(..) => "softmax",
            Op::LogSoftmaxLast(..) => "log_softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::Concat { .. } => "concat",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MaskedMean { .. } => "masked_mean",
            Op::MaskedMax { .. } => "masked_max",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Single-owner recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(op_name, ta.shape(), tb.shape())?;
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Tensor::new(out_shape, data);
        }
        let oa = broadcast_offsets(ta.shape(), &out_shape);
        let ob = broadcast_offsets(tb.shape(), &out_shape);
        let data = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Tensor::new(out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("div", a, b, |x, y| x / y)?;
        self.push(out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", ta.shape()),
            });
        }
        let out = transpose_raw(ta);
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.reshape(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: ta.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Softmax over the trailing axis, stabilised by subtracting the row max.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let n = *ta.shape().last().ok_or(TensorError::Invalid {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::SoftmaxLast(a), &[a])
    }

    /// Log of the trailing-axis softmax, computed as `x - max - ln Σ e^(x - max)`.
    pub fn log_softmax_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        let n = *ta.shape().last().ok_or(TensorError::Invalid {
            op: "log_softmax",
            msg: "scalar input".into(),
        })?;
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmaxLast(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(TensorError::Invalid {
                op: "softmax_rows",
                msg: format!("expected a matrix, got shape {:?}", self.shape(a)),
            });
        }
        self.softmax_last(a)
    }

    /// Cross-correlation of an `H×W×Cin` input with a `kh×kw×Cin×Cout`
    /// kernel under zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let geom = ConvGeometry::new(ti.shape(), tk.shape(), stride, pad)?;
        let out = geom.forward(ti.data(), tk.data());
        let out = Tensor::new(vec![geom.oh, geom.ow, geom.cout], out)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            &[input, kernel],
        )
    }

    // ---- structural --------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Sums over `axes`, removing them from the shape.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, offsets) = reduce_plan("sum", self.shape(a), axes)?;
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in offsets.iter().zip(self.value(a).data()) {
            out[o] += v;
        }
        let out = Tensor::new(out_shape, out)?;
        self.push(
            out,
            Op::Sum {
                input: a,
                axes: axes.to_vec(),
            },
            &[a],
        )
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (out_shape, offsets) = reduce_plan("mean", self.shape(a), axes)?;
        let count = (self.value(a).len() / out_shape.iter().product::<usize>()) as f64;
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in offsets.iter().zip(self.value(a).data()) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v /= count);
        let out = Tensor::new(out_shape, out)?;
        self.push(
            out,
            Op::Mean {
                input: a,
                axes: axes.to_vec(),
            },
            &[a],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.mean(a, &axes)
    }

    // ---- label-guided ops --------------------------------------------

    /// Per-class channel means of an `H×W×C` map over the pixels each class
    /// claims in `labels`. Classes without pixels yield zero rows.
    pub fn masked_mean(&mut self, input: Var, labels: &LabelMap) -> Result<Var> {
        let (h, w, c) = self.hwc("masked_mean", input)?;
        ensure_label_size("masked_mean", labels, h, w)?;
        let k = labels.classes();
        let counts = labels.histogram();
        let mut out = vec![0.0; k * c];
        let data = self.value(input).data();
        for (p, &lbl) in labels.values().iter().enumerate() {
            let row = &mut out[lbl * c..(lbl + 1) * c];
            for (o, &v) in row.iter_mut().zip(&data[p * c..(p + 1) * c]) {
                *o += v;
            }
        }
        for (cls, &n) in counts.iter().enumerate() {
            if n > 0 {
                out[cls * c..(cls + 1) * c]
                    .iter_mut()
                    .for_each(|v| *v /= n as f64);
            }
        }
        let out = Tensor::new(vec![k, c], out)?;
        self.push(
            out,
            Op::MaskedMean {
                input,
                labels: labels.values().to_vec(),
                counts,
            },
            &[input],
        )
    }

    /// Per-class channelwise maxima of an `H×W×C` map over the pixels each
    /// class claims in `labels`. Classes without pixels yield zero rows.
    /// Gradient flows to the first pixel attaining each maximum.
    pub fn masked_max(&mut self, input: Var, labels: &LabelMap) -> Result<Var> {
        let (h, w, c) = self.hwc("masked_max", input)?;
        ensure_label_size("masked_max", labels, h, w)?;
        let k = labels.classes();
        let data = self.value(input).data();
        let mut winners: Vec<Option<usize>> = vec![None; k * c];
        for (p, &lbl) in labels.values().iter().enumerate() {
            for ch in 0..c {
                let slot = &mut winners[lbl * c + ch];
                match *slot {
                    Some(q) if data[q * c + ch] >= data[p * c + ch] => {}
                    _ => *slot = Some(p),
                }
            }
        }
        let out = winners
            .iter()
            .enumerate()
            .map(|(i, win)| win.map_or(0.0, |p| data[p * c + i % c]))
            .collect();
        let out = Tensor::new(vec![k, c], out)?;
        self.push(out, Op::MaskedMax { input, winners }, &[input])
    }

    /// Spreads table rows onto pixels: `out[i,j,:] = table[labels[i,j], :]`.
    pub fn gather_rows(&mut self, table: Var, labels: &LabelMap) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || shape[0] != labels.classes() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![labels.classes()],
            });
        }
        let c = shape[1];
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(labels.pixels() * c);
        for &lbl in labels.values() {
            out.extend_from_slice(&t[lbl * c..(lbl + 1) * c]);
        }
        let out = Tensor::new(vec![labels.height(), labels.width(), c], out)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                labels: labels.values().to_vec(),
            },
            &[table],
        )
    }

    /// Selects `input[i,j,labels[i,j]]` from an `H×W×K` tensor.
    pub fn pick(&mut self, input: Var, labels: &LabelMap) -> Result<Var> {
        let (h, w, k) = self.hwc("pick", input)?;
        ensure_label_size("pick", labels, h, w)?;
        if labels.classes() > k {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: format!("labels have {} classes, input {k}", labels.classes()),
            });
        }
        let data = self.value(input).data();
        let out = labels
            .values()
            .iter()
            .enumerate()
            .map(|(p, &l)| data[p * k + l])
            .collect();
        let out = Tensor::new(vec![h, w], out)?;
        self.push(
            out,
            Op::Pick {
                input,
                labels: labels.values().to_vec(),
            },
            &[input],
        )
    }

    fn hwc(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(TensorError::Invalid {
                op,
                msg: format!("expected H×W×C, got shape {s:?}"),
            }),
        }
    }

    // ---- backward ----------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// into the gradient of every reachable leaf that requires it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, gi) in self.local_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for output gradient `g`.
    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(&g.map(|v| -v), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = zip_broadcast(g, tb, |gv, bv| gv * bv);
                let gb = zip_broadcast(g, ta, |gv, av| gv * av);
                vec![
                    (*a, reduce_to(&ga, ta.shape())),
                    (*b, reduce_to(&gb, tb.shape())),
                ]
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = zip_broadcast(g, tb, |gv, bv| gv / bv);
                // d(a/b)/db = -(a/b)/b = -out/b
                let ob = zip_broadcast(out, tb, |o, bv| o / bv);
                let gb = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ob.data())
                        .map(|(gv, q)| -gv * q)
                        .collect(),
                )
                .expect("div grad shape");
                vec![
                    (*a, reduce_to(&ga, ta.shape())),
                    (*b, reduce_to(&gb, tb.shape())),
                ]
            }
            Op::Scale(a, factor) => vec![(*a, g.map(|v| v * factor))],
            Op::Log(a) => {
                let ta = val(*a);
                let data = g.data().iter().zip(ta.data()).map(|(gv, x)| gv / x).collect();
                vec![(*a, Tensor::new(ta.shape().to_vec(), data).unwrap())]
            }
            Op::Relu(a) => {
                let ta = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(ta.shape().to_vec(), data).unwrap())]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let bt = transpose_raw(tb);
                let at = transpose_raw(ta);
                let ga = matmul_raw(g.data(), bt.data(), m, n, k);
                let gb = matmul_raw(at.data(), g.data(), k, m, n);
                vec![
                    (*a, Tensor::new(vec![m, k], ga).unwrap()),
                    (*b, Tensor::new(vec![k, n], gb).unwrap()),
                ]
            }
            Op::Transpose(a) => vec![(*a, transpose_raw(g))],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
            Op::SoftmaxLast(a) => {
                let n = *out.shape().last().unwrap();
                let mut data = vec![0.0; out.len()];
                for ((dst, y), gr) in data
                    .chunks_exact_mut(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(g.data().chunks_exact(n))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dst[i] = y[i] * (gr[i] - dot);
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), data).unwrap())]
            }
            Op::LogSoftmaxLast(a) => {
                let n = *out.shape().last().unwrap();
                let mut data = vec![0.0; out.len()];
                for ((dst, ls), gr) in data
                    .chunks_exact_mut(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(g.data().chunks_exact(n))
                {
                    let total: f64 = gr.iter().sum();
                    for i in 0..n {
                        dst[i] = gr[i] - ls[i].exp() * total;
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), data).unwrap())]
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let (ti, tk) = (val(*input), val(*kernel));
                let geom = ConvGeometry::new(ti.shape(), tk.shape(), *stride, *pad).unwrap();
                let (gi, gk) = geom.backward(ti.data(), tk.data(), g.data());
                vec![
                    (*input, Tensor::new(ti.shape().to_vec(), gi).unwrap()),
                    (*kernel, Tensor::new(tk.shape().to_vec(), gk).unwrap()),
                ]
            }
            Op::Concat { inputs, axis } => {
                let base = val(inputs[0]).shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).len()))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (part, v) in parts.iter_mut().zip(inputs) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        part.extend_from_slice(&g.data()[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(v, d)| (*v, Tensor::new(val(*v).shape().to_vec(), d).unwrap()))
                    .collect()
            }
            Op::Sum { input, axes } | Op::Mean { input, axes } => {
                let ti = val(*input);
                let (_, offsets) = reduce_plan("sum", ti.shape(), axes).unwrap();
                let scale = match node.op {
                    Op::Mean { .. } => (g.len() as f64) / (ti.len() as f64),
                    _ => 1.0,
                };
                let data = offsets.iter().map(|&o| g.data()[o] * scale).collect();
                vec![(*input, Tensor::new(ti.shape().to_vec(), data).unwrap())]
            }
            Op::MaskedMean {
                input,
                labels,
                counts,
            } => {
                let ti = val(*input);
                let c = ti.shape()[2];
                let mut data = vec![0.0; ti.len()];
                for (p, &lbl) in labels.iter().enumerate() {
                    let n = counts[lbl] as f64;
                    for ch in 0..c {
                        data[p * c + ch] = g.data()[lbl * c + ch] / n;
                    }
                }
                vec![(*input, Tensor::new(ti.shape().to_vec(), data).unwrap())]
            }
            Op::MaskedMax { input, winners } => {
                let ti = val(*input);
                let c = ti.shape()[2];
                let mut data = vec![0.0; ti.len()];
                for (i, win) in winners.iter().enumerate() {
                    if let Some(p) = win {
                        data[p * c + i % c] += g.data()[i];
                    }
                }
                vec![(*input, Tensor::new(ti.shape().to_vec(), data).unwrap())]
            }
            Op::GatherRows { table, labels } => {
                let tt = val(*table);
                let c = tt.shape()[1];
                let mut data = vec![0.0; tt.len()];
                for (p, &lbl) in labels.iter().enumerate() {
                    for ch in 0..c {
                        data[lbl * c + ch] += g.data()[p * c + ch];
                    }
                }
                vec![(*table, Tensor::new(tt.shape().to_vec(), data).unwrap())]
            }
            Op::Pick { input, labels } => {
                let ti = val(*input);
                let k = ti.shape()[2];
                let mut data = vec![0.0; ti.len()];
                for (p, &lbl) in labels.iter().enumerate() {
                    data[p * k + lbl] = g.data()[p];
                }
                vec![(*input, Tensor::new(ti.shape().to_vec(), data).unwrap())]
            }
        }
    }
}

fn ensure_label_size(op: &'static str, labels: &LabelMap, h: usize, w: usize) -> Result<()> {
    labels.ensure_size(h, w).map_err(|e: LabelError| TensorError::Invalid {
        op,
        msg: e.to_string(),
    })
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = t.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], data).unwrap()
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// For each element of `out_shape`, the offset of the element of a tensor of
/// `shape` that broadcasts onto it.
fn broadcast_offsets(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let eff: Vec<usize> = shape
        .iter()
        .zip(&in_strides)
        .map(|(&e, &s)| if e == 1 { 0 } else { s })
        .collect();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut offsets = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    offsets
}

/// Sums a gradient of broadcast shape back down to `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let offsets = broadcast_offsets(shape, g.shape());
    let mut data = vec![0.0; shape.iter().product()];
    for (&o, &v) in offsets.iter().zip(g.data()) {
        data[o] += v;
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Elementwise `f(g, b)` where `b` broadcasts onto `g`'s shape.
fn zip_broadcast(g: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = if g.shape() == b.shape() {
        g.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        broadcast_offsets(b.shape(), g.shape())
            .iter()
            .zip(g.data())
            .map(|(&o, &x)| f(x, b.data()[o]))
            .collect()
    };
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

/// Output shape of a reduction and, per input element, its output offset.
fn reduce_plan(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(&axis) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &e)| e)
        .collect();
    // Stride over the kept axes in output space; zero for reduced axes.
    let out_strides = strides(&out_shape);
    let mut kept = out_strides.iter();
    let eff: Vec<usize> = (0..shape.len())
        .map(|i| if axes.contains(&i) { 0 } else { *kept.next().unwrap() })
        .collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut offsets = Vec::with_capacity(total);
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok((out_shape, offsets))
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[h, w, cin], &[kh, kw, kc, cout]) = (input, kernel) else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        };
        if kc != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} must be odd-sized and stride positive"),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            });
        }
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    /// Input pixel under kernel tap `(ky, kx)` for output `(oy, ox)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some(iy * self.w + ix)
    }

    fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![0.0; self.oh * self.ow * cout];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let o = (oy * self.ow + ox) * cout;
                let dst = &mut out[o..o + cout];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let Some(src) = self.source(oy, ox, ky, kx) else {
                            continue;
                        };
                        let px = &input[src * cin..(src + 1) * cin];
                        let kbase = (ky * self.kw + kx) * cin * cout;
                        for (ci, &a) in px.iter().enumerate() {
                            let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (d, &kv) in dst.iter_mut().zip(krow) {
                                *d += a * kv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, input: &[f64], kernel: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (cin, cout) = (self.cin, self.cout);
        let mut gin = vec![0.0; input.len()];
        let mut gk = vec![0.0; kernel.len()];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let o = (oy * self.ow + ox) * cout;
                let g = &grad[o..o + cout];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let Some(src) = self.source(oy, ox, ky, kx) else {
                            continue;
                        };
                        let kbase = (ky * self.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let a = input[src * cin + ci];
                            let mut acc = 0.0;
                            let gkrow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for ((gkv, &kv), &gv) in gkrow.iter_mut().zip(krow).zip(g) {
                                acc += gv * kv;
                                *gkv += a * gv;
                            }
                            gin[src * cin + ci] += acc;
                        }
                    }
                }
            }
        }
        (gin, gk)
    }
}
