//! Recording graph ("tape") and the operator set.
//!
//! Ops compute eagerly on tensor values. A graph in recording mode also
//! appends one node per op; `backward` walks the tape once in reverse and
//! leaves a gradient next to every reached node. Inference mode runs the
//! exact same kernels and records nothing, so forward values match the
//! recording path bit for bit.
//!
//! Gradients are dispatched over an op enum rather than stored closures so
//! every rule below is auditable in one place.

use super::{check_finite, numel, NodeRef, Param, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub const LN_EPS: f64 = 1e-5;

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Recording,
    Inference,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { lhs: usize, rhs: usize },
    Add { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { arg: usize, factor: f64 },
    AddScalar { arg: usize },
    Log { arg: usize },
    Gelu { arg: usize },
    Reshape { arg: usize },
    SwapAxes { arg: usize, a: usize, b: usize },
    Softmax { arg: usize },
    LayerNorm { arg: usize, gain: usize, bias: usize },
    MeanAxis { arg: usize, axis: usize },
    MeanAll { arg: usize },
    Dropout { arg: usize, mask: Arc<Vec<f64>> },
    GatherRows { arg: usize, rows: Arc<Vec<usize>> },
    ConcatRows { args: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    mode: Mode,
    nodes: Vec<Node>,
    param_nodes: HashMap<u64, usize>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn recording() -> Self {
        Self::with_mode(Mode::Recording)
    }

    pub fn inference() -> Self {
        Self::with_mode(Mode::Inference)
    }

    fn with_mode(mode: Mode) -> Self {
        Self {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            mode,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.mode == Mode::Recording
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Clears gradients so another backward pass may run on the same tape.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Binds a parameter. Within one graph the same parameter always maps to
    /// the same leaf, so gradients from every use site accumulate.
    pub fn param(&mut self, p: &Param) -> Tensor {
        if self.mode == Mode::Inference {
            return p.value().constant();
        }
        if let Some(&node) = self.param_nodes.get(&p.id()) {
            return Tensor::from_parts(
                p.value().shape().to_vec(),
                self.nodes[node].value.clone(),
                Some(NodeRef { graph: self.id, node }),
            );
        }
        let t = p.value();
        let node = self.push(t.shape().to_vec(), t.buffer(), Op::Leaf);
        self.param_nodes.insert(p.id(), node);
        Tensor::from_parts(
            t.shape().to_vec(),
            self.nodes[node].value.clone(),
            Some(NodeRef { graph: self.id, node }),
        )
    }

    /// Re-enters a value with its history cut; downstream ops treat it as a
    /// constant.
    pub fn detach(&self, t: &Tensor) -> Tensor {
        t.constant()
    }

    fn push(&mut self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op) -> usize {
        self.nodes.push(Node { shape, value, op });
        self.nodes.len() - 1
    }

    /// Node id of `t` on this tape, interning it as a constant leaf if it
    /// came from elsewhere. Only meaningful in recording mode.
    fn intern(&mut self, t: &Tensor) -> usize {
        if let Some(nr) = t.origin() {
            if nr.graph == self.id {
                return nr.node;
            }
        }
        self.push(t.shape().to_vec(), t.buffer(), Op::Leaf)
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        build: impl FnOnce(&mut Self) -> Op,
    ) -> Result<Tensor> {
        check_finite(op_name, &data)?;
        let value = Arc::new(data);
        if self.mode == Mode::Inference {
            return Ok(Tensor::from_parts(shape, value, None));
        }
        let op = build(self);
        let node = self.push(shape.clone(), value.clone(), op);
        Ok(Tensor::from_parts(
            shape,
            value,
            Some(NodeRef { graph: self.id, node }),
        ))
    }

    // ---- ops -----------------------------------------------------------

    /// `a @ b`. `a` is `[..batch, m, k]`; `b` is either shared `[k, n]` or
    /// batched `[..batch, k, n]` with identical leading dims.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (shape, data) = matmul_forward(a, b)?;
        self.emit("matmul", shape, data, |g| Op::Matmul {
            lhs: g.intern(a),
            rhs: g.intern(b),
        })
    }

    /// Elementwise sum. `b` must have the same shape as `a` or a shape that
    /// is a suffix of `a`'s (broadcast over the leading axes).
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_suffix("add", a, b)?;
        let bd = b.data();
        let data = a
            .data()
            .chunks_exact(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x + y))
            .collect();
        self.emit("add", a.shape().to_vec(), data, |g| Op::Add {
            lhs: g.intern(a),
            rhs: g.intern(b),
        })
    }

    /// Elementwise product with the same broadcast rule as [`Graph::add`].
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        check_suffix("mul", a, b)?;
        let bd = b.data();
        let data = a
            .data()
            .chunks_exact(bd.len())
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(x, y)| x * y))
            .collect();
        self.emit("mul", a.shape().to_vec(), data, |g| Op::Mul {
            lhs: g.intern(a),
            rhs: g.intern(b),
        })
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x * factor).collect();
        self.emit("scale", a.shape().to_vec(), data, |g| Op::Scale {
            arg: g.intern(a),
            factor,
        })
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x + c).collect();
        self.emit("add_scalar", a.shape().to_vec(), data, |g| Op::AddScalar {
            arg: g.intern(a),
        })
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|x| x.ln()).collect();
        self.emit("log", a.shape().to_vec(), data, |g| Op::Log { arg: g.intern(a) })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        let data = a.data().iter().map(|&x| gelu_value(x)).collect();
        self.emit("gelu", a.shape().to_vec(), data, |g| Op::Gelu { arg: g.intern(a) })
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != a.len() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: format!("{} elements to fill {:?}", a.len(), shape),
                shape: shape.to_vec(),
            });
        }
        let data = a.data().to_vec();
        self.emit("reshape", shape.to_vec(), data, |g| Op::Reshape { arg: g.intern(a) })
    }

    pub fn swap_axes(&mut self, a: &Tensor, ax: usize, bx: usize) -> Result<Tensor> {
        if ax >= a.rank() || bx >= a.rank() {
            return Err(Error::InvalidArg {
                op: "swap_axes",
                msg: format!("axes ({ax},{bx}) out of range for rank {}", a.rank()),
            });
        }
        let (shape, data) = swap_axes_forward(a.shape(), a.data(), ax, bx);
        self.emit("swap_axes", shape, data, |g| Op::SwapAxes {
            arg: g.intern(a),
            a: ax,
            b: bx,
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.rank() == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                expected: "rank >= 1".into(),
                shape: a.shape().to_vec(),
            });
        }
        let width = *a.shape().last().unwrap();
        if width == 0 {
            return Err(Error::BadShape {
                op: "softmax",
                expected: "non-empty rows".into(),
                shape: a.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; a.len()];
        for (out_row, in_row) in data.chunks_mut(width).zip(a.data().chunks(width)) {
            let max = in_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in out_row.iter_mut().zip(in_row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out_row.iter_mut() {
                *o /= sum;
            }
        }
        self.emit("softmax", a.shape().to_vec(), data, |g| Op::Softmax { arg: g.intern(a) })
    }

    /// Per-row layer normalization over the last axis with learnable gain
    /// and bias of shape `[D]`.
    pub fn layer_norm(&mut self, a: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let d = *a.shape().last().ok_or_else(|| Error::BadShape {
            op: "layer_norm",
            expected: "rank >= 1".into(),
            shape: a.shape().to_vec(),
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: a.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let gd = gain.data();
        let bd = bias.data();
        let mut data = vec![0.0; a.len()];
        for (out_row, in_row) in data.chunks_mut(d).zip(a.data().chunks(d)) {
            let (mean, inv_std) = row_moments(in_row);
            for i in 0..d {
                out_row[i] = gd[i] * (in_row[i] - mean) * inv_std + bd[i];
            }
        }
        self.emit("layer_norm", a.shape().to_vec(), data, |g| Op::LayerNorm {
            arg: g.intern(a),
            gain: g.intern(gain),
            bias: g.intern(bias),
        })
    }

    /// Mean over one axis; the axis is dropped (a rank-1 input yields `[1]`).
    pub fn mean_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::InvalidArg {
                op: "mean_axis",
                msg: format!("axis {axis} out of range for rank {}", a.rank()),
            });
        }
        let (outer, n, inner) = split_at_axis(a.shape(), axis);
        let mut shape: Vec<usize> = a.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += a.data()[base + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= n as f64;
        }
        self.emit("mean_axis", shape, data, |g| Op::MeanAxis {
            arg: g.intern(a),
            axis,
        })
    }

    /// Mean over every element, producing a `[1]` scalar.
    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::BadShape {
                op: "mean_all",
                expected: "a non-empty tensor".into(),
                shape: a.shape().to_vec(),
            });
        }
        let mean = a.data().iter().sum::<f64>() / a.len() as f64;
        self.emit("mean_all", vec![1], vec![mean], |g| Op::MeanAll { arg: g.intern(a) })
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p) so the expected
    /// value is unchanged. The mask depends only on `seed`.
    pub fn dropout(&mut self, a: &Tensor, p: f64, seed: u64) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArg {
                op: "dropout",
                msg: format!("p must lie in [0,1), got {p}"),
            });
        }
        let mut rng = StreamRng::new(seed, "dropout-mask", 0);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..a.len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let data = a.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let mask = Arc::new(mask);
        self.emit("dropout", a.shape().to_vec(), data, |g| Op::Dropout {
            arg: g.intern(a),
            mask,
        })
    }

    /// Selects rows (axis 0) in the given order. Repeated indices are legal;
    /// their gradients accumulate.
    pub fn gather_rows(&mut self, a: &Tensor, rows: &[usize]) -> Result<Tensor> {
        if a.rank() == 0 || a.shape()[0] == 0 {
            return Err(Error::BadShape {
                op: "gather_rows",
                expected: "rank >= 1 with non-empty axis 0".into(),
                shape: a.shape().to_vec(),
            });
        }
        let n = a.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidArg {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {n} rows"),
            });
        }
        let width = a.len() / n;
        let mut shape = a.shape().to_vec();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&a.data()[r * width..(r + 1) * width]);
        }
        let rows = Arc::new(rows.to_vec());
        self.emit("gather_rows", shape, data, |g| Op::GatherRows {
            arg: g.intern(a),
            rows,
        })
    }

    /// Concatenates along axis 0; all inputs must agree on the other axes.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::InvalidArg {
            op: "concat_rows",
            msg: "empty input list".into(),
        })?;
        let mut shape = first.shape().to_vec();
        for p in parts {
            if p.rank() != first.rank() || p.shape()[1..] != first.shape()[1..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
        let mut data = Vec::with_capacity(numel(&shape));
        for p in parts {
            data.extend_from_slice(p.data());
        }
        self.emit("concat_rows", shape, data, |g| Op::ConcatRows {
            args: parts.iter().map(|p| g.intern(p)).collect(),
        })
    }

    // ---- composites ------------------------------------------------------

    /// `a - b`, built from scale and add.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let neg = self.scale(b, -1.0)?;
        self.add(a, &neg)
    }

    /// Elementwise square.
    pub fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        self.mul(a, a)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar loss recorded on this tape. May run once
    /// per graph unless [`Graph::reset`] is called.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let root = match loss.origin() {
            Some(nr) if nr.graph == self.id => nr.node,
            _ => return Err(Error::LossNotRecorded),
        };
        if self.nodes[root].shape != [1] {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[root].shape.clone(),
            });
        }
        self.backward_done = true;
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        pending[root] = Some(vec![1.0]);
        self.grads = vec![None; self.nodes.len()];
        for id in (0..=root).rev() {
            let Some(g) = pending[id].take() else { continue };
            check_finite("backward", &g)?;
            self.propagate(id, &g, &mut pending)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) -> Result<()> {
        let value = |n: usize| -> &[f64] { &self.nodes[n].value };
        let len = |n: usize| -> usize { self.nodes[n].value.len() };
        macro_rules! sink {
            ($n:expr) => {{
                let node: usize = $n;
                let l = self.nodes[node].value.len();
                pending[node].get_or_insert_with(|| vec![0.0; l])
            }};
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { lhs, rhs } => {
                let (lsh, rsh) = (&self.nodes[*lhs].shape, &self.nodes[*rhs].shape);
                let m = lsh[lsh.len() - 2];
                let k = lsh[lsh.len() - 1];
                let n = rsh[rsh.len() - 1];
                let batches = len(*lhs) / (m * k);
                let shared_rhs = rsh.len() == 2;
                {
                    let dl = pending[*lhs].get_or_insert_with(|| vec![0.0; m * k * batches]);
                    for b in 0..batches {
                        let bv = if shared_rhs {
                            value(*rhs)
                        } else {
                            &value(*rhs)[b * k * n..(b + 1) * k * n]
                        };
                        mm_d_bt(&g[b * m * n..(b + 1) * m * n], bv, m, k, n, &mut dl[b * m * k..(b + 1) * m * k]);
                    }
                }
                {
                    let dr = pending[*rhs].get_or_insert_with(|| vec![0.0; len(*rhs)]);
                    for b in 0..batches {
                        let av = &value(*lhs)[b * m * k..(b + 1) * m * k];
                        let dst = if shared_rhs {
                            &mut dr[..]
                        } else {
                            &mut dr[b * k * n..(b + 1) * k * n]
                        };
                        mm_at_b(av, &g[b * m * n..(b + 1) * m * n], m, k, n, dst);
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for (dst, src) in sink!(*lhs).iter_mut().zip(g) {
                    *dst += src;
                }
                let rl = len(*rhs);
                let dr = sink!(*rhs);
                for chunk in g.chunks_exact(rl) {
                    for (dst, src) in dr.iter_mut().zip(chunk) {
                        *dst += src;
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                let rl = len(*rhs);
                {
                    let rv = value(*rhs);
                    let dl = sink!(*lhs);
                    for (i, (dst, src)) in dl.iter_mut().zip(g).enumerate() {
                        *dst += src * rv[i % rl];
                    }
                }
                {
                    let lv = value(*lhs);
                    let dr = sink!(*rhs);
                    for (chunk_g, chunk_l) in g.chunks_exact(rl).zip(lv.chunks_exact(rl)) {
                        for ((dst, src), x) in dr.iter_mut().zip(chunk_g).zip(chunk_l) {
                            *dst += src * x;
                        }
                    }
                }
            }
            Op::Scale { arg, factor } => {
                for (dst, src) in sink!(*arg).iter_mut().zip(g) {
                    *dst += factor * src;
                }
            }
            Op::AddScalar { arg } => {
                for (dst, src) in sink!(*arg).iter_mut().zip(g) {
                    *dst += src;
                }
            }
            Op::Log { arg } => {
                let xv = value(*arg);
                for (i, (dst, src)) in sink!(*arg).iter_mut().zip(g).enumerate() {
                    *dst += src / xv[i];
                }
            }
            Op::Gelu { arg } => {
                let xv = value(*arg);
                for (i, (dst, src)) in sink!(*arg).iter_mut().zip(g).enumerate() {
                    *dst += src * gelu_derivative(xv[i]);
                }
            }
            Op::Reshape { arg } => {
                for (dst, src) in sink!(*arg).iter_mut().zip(g) {
                    *dst += src;
                }
            }
            Op::SwapAxes { arg, a, b } => {
                let out_shape = &self.nodes[id].shape;
                let (_, back) = swap_axes_forward(out_shape, g, *a, *b);
                for (dst, src) in sink!(*arg).iter_mut().zip(&back) {
                    *dst += src;
                }
            }
            Op::Softmax { arg } => {
                let y = &self.nodes[id].value;
                let width = *self.nodes[id].shape.last().unwrap();
                let dx = sink!(*arg);
                for r in 0..y.len() / width {
                    let o = r * width;
                    let dot: f64 = (0..width).map(|i| g[o + i] * y[o + i]).sum();
                    for i in 0..width {
                        dx[o + i] += y[o + i] * (g[o + i] - dot);
                    }
                }
            }
            Op::LayerNorm { arg, gain, bias } => {
                let d = *self.nodes[id].shape.last().unwrap();
                let xv = value(*arg);
                let gv = value(*gain);
                let rows = xv.len() / d;
                {
                    let db = sink!(*bias);
                    for r in 0..rows {
                        for i in 0..d {
                            db[i] += g[r * d + i];
                        }
                    }
                }
                {
                    let dg = sink!(*gain);
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(row);
                        for i in 0..d {
                            dg[i] += g[r * d + i] * (row[i] - mean) * inv_std;
                        }
                    }
                }
                {
                    let dx = sink!(*arg);
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(row);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_xhat = 0.0;
                        for i in 0..d {
                            let xh = (row[i] - mean) * inv_std;
                            let dh = g[r * d + i] * gv[i];
                            sum_dh += dh;
                            sum_dh_xhat += dh * xh;
                        }
                        let inv_d = 1.0 / d as f64;
                        for i in 0..d {
                            let xh = (row[i] - mean) * inv_std;
                            let dh = g[r * d + i] * gv[i];
                            dx[r * d + i] +=
                                inv_std * (dh - inv_d * sum_dh - xh * inv_d * sum_dh_xhat);
                        }
                    }
                }
            }
            Op::MeanAxis { arg, axis } => {
                let in_shape = &self.nodes[*arg].shape;
                let (outer, n, inner) = split_at_axis(in_shape, *axis);
                let scale = 1.0 / n as f64;
                let dx = sink!(*arg);
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            dx[base + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
            Op::MeanAll { arg } => {
                let scale = 1.0 / len(*arg) as f64;
                for dst in sink!(*arg).iter_mut() {
                    *dst += g[0] * scale;
                }
            }
            Op::Dropout { arg, mask } => {
                for ((dst, src), m) in sink!(*arg).iter_mut().zip(g).zip(mask.iter()) {
                    *dst += src * m;
                }
            }
            Op::GatherRows { arg, rows } => {
                let width = len(*arg) / self.nodes[*arg].shape[0];
                let dx = sink!(*arg);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        dx[r * width + j] += g[i * width + j];
                    }
                }
            }
            Op::ConcatRows { args } => {
                let mut offset = 0;
                for &a in args {
                    let l = len(a);
                    for (dst, src) in sink!(a).iter_mut().zip(&g[offset..offset + l]) {
                        *dst += src;
                    }
                    offset += l;
                }
            }
        }
        Ok(())
    }

    /// Gradient of the loss w.r.t. any tensor recorded on this tape, or
    /// `None` if the tensor never influenced the loss.
    pub fn grad_of(&self, t: &Tensor) -> Option<Tensor> {
        let nr = t.origin()?;
        if nr.graph != self.id {
            return None;
        }
        let g = self.grads.get(nr.node)?.as_ref()?;
        Some(Tensor::from_parts(
            t.shape().to_vec(),
            Arc::new(g.clone()),
            None,
        ))
    }

    /// Gradient for one parameter; zeros when the parameter never reached
    /// the loss (or was never bound).
    pub fn grad_param(&self, p: &Param) -> Tensor {
        if let Some(&node) = self.param_nodes.get(&p.id()) {
            if let Some(Some(g)) = self.grads.get(node) {
                return Tensor::from_parts(
                    p.value().shape().to_vec(),
                    Arc::new(g.clone()),
                    None,
                );
            }
        }
        Tensor::zeros(p.value().shape())
    }

    /// Gradients aligned with the store's parameter order.
    pub fn grads_for(&self, store: &ParamStore) -> Vec<Tensor> {
        store.iter().map(|p| self.grad_param(p)).collect()
    }
}

// ---- kernels --------------------------------------------------------------

fn check_suffix(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (asn, bsn) = (a.shape(), b.shape());
    if bsn.len() > asn.len() || asn[asn.len() - bsn.len()..] != *bsn || b.is_empty() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: asn.to_vec(),
            rhs: bsn.to_vec(),
        });
    }
    Ok(())
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let (asn, bsn) = (a.shape(), b.shape());
    if asn.len() < 2 {
        return Err(Error::BadShape {
            op: "matmul",
            expected: "lhs rank >= 2".into(),
            shape: asn.to_vec(),
        });
    }
    let shared_rhs = bsn.len() == 2;
    if !shared_rhs && (bsn.len() != asn.len() || asn[..asn.len() - 2] != bsn[..bsn.len() - 2]) {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: asn.to_vec(),
            rhs: bsn.to_vec(),
        });
    }
    let m = asn[asn.len() - 2];
    let k = asn[asn.len() - 1];
    if bsn[bsn.len() - 2] != k {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: asn.to_vec(),
            rhs: bsn.to_vec(),
        });
    }
    let n = bsn[bsn.len() - 1];
    let batches = a.len() / (m * k).max(1);
    let mut shape = asn[..asn.len() - 2].to_vec();
    shape.push(m);
    shape.push(n);
    let mut out = vec![0.0; batches * m * n];
    for bi in 0..batches {
        let av = &a.data()[bi * m * k..(bi + 1) * m * k];
        let bv = if shared_rhs {
            b.data()
        } else {
            &b.data()[bi * k * n..(bi + 1) * k * n]
        };
        mm(av, bv, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
    }
    Ok((shape, out))
}

/// out[m,n] += a[m,k] @ b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out[k,n] += a[m,k]^T @ d[m,n]
fn mm_at_b(a: &[f64], d: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let drow = &d[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &dv) in orow.iter_mut().zip(drow) {
                *o += aik * dv;
            }
        }
    }
}

/// out[m,k] += d[m,n] @ b[k,n]^T
fn mm_d_bt(d: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let drow = &d[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (dv, bv) in drow.iter().zip(brow) {
                acc += dv * bv;
            }
            *o += acc;
        }
    }
}

fn swap_axes_forward(shape: &[usize], data: &[f64], a: usize, b: usize) -> (Vec<usize>, Vec<f64>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    if a == b {
        return (out_shape, data.to_vec());
    }
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut perm_strides = in_strides;
    perm_strides.swap(a, b);
    let mut out = vec![0.0; data.len()];
    for (oi, slot) in out.iter_mut().enumerate() {
        let mut idx = 0;
        let mut r = oi;
        for axis in (0..rank).rev() {
            idx += (r % out_shape[axis]) * perm_strides[axis];
            r /= out_shape[axis];
        }
        *slot = data[idx];
    }
    (out_shape, out)
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn gelu_value(x: f64) -> f64 {
    const A: f64 = 0.044715;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    const A: f64 = 0.044715;
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::inference();
        let y = g.softmax(&t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let mut g = Graph::inference();
        let x = t(&[2, 4], &[5.0; 8]);
        let gain = t(&[4], &[1.0; 4]);
        let bias = Tensor::zeros(&[4]);
        let y = g.layer_norm(&x, &gain, &bias).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut g = Graph::inference();
        let x = t(&[8], &[1.0, -2.0, 3.0, 0.5, -0.25, 9.0, 0.0, 4.0]);
        let y = g.dropout(&x, 0.0, 42).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn dropout_masks_are_seed_reproducible() {
        let run = |seed| {
            let mut g = Graph::inference();
            g.dropout(&Tensor::full(&[64], 1.0), 0.4, seed).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert!(run(9) != run(10));
    }

    #[test]
    fn square_gradient_matches_2x() {
        let mut g = Graph::recording();
        let x = t(&[1], &[3.0]);
        let bound = g.add_scalar(&x, 0.0).unwrap();
        let y = g.square(&bound).unwrap();
        g.backward(&y).unwrap();
        let dx = g.grad_of(&bound).unwrap();
        assert!((dx.data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::inference();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn batched_matmul_with_shared_rhs() {
        let mut g = Graph::inference();
        let a = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 2.0]);
        let b = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::inference();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(g.matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn add_broadcasts_suffix_only() {
        let mut g = Graph::inference();
        let a = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let c = g.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let bad = t(&[2], &[1.0, 2.0]);
        assert!(g.add(&a, &bad).is_err());
    }

    #[test]
    fn swap_axes_transposes() {
        let mut g = Graph::inference();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = g.swap_axes(&a, 0, 1).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn mean_axis_drops_axis() {
        let mut g = Graph::inference();
        let a = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let m = g.mean_axis(&a, 1).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(m.data(), &[2.0, 3.0, 6.0, 7.0]);
        let v = g.mean_axis(&t(&[4], &[1.0, 2.0, 3.0, 4.0]), 0).unwrap();
        assert_eq!(v.shape(), &[1]);
        assert_eq!(v.data(), &[2.5]);
    }

    #[test]
    fn inference_and_recording_forward_match_bitwise() {
        let x = t(&[2, 4], &[0.3, -1.2, 0.7, 2.2, -0.4, 0.0, 1.5, -2.0]);
        let w = t(&[4, 3], &(0..12).map(|i| (i as f64) * 0.17 - 1.0).collect::<Vec<_>>());
        let run = |mut g: Graph| {
            let h = g.matmul(&x, &w).unwrap();
            let h = g.gelu(&h).unwrap();
            let h = g.softmax(&h).unwrap();
            g.mean_all(&h).unwrap()
        };
        let a = run(Graph::recording());
        let b = run(Graph::inference());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn backward_twice_fails_until_reset() {
        let mut g = Graph::recording();
        let x = g.add_scalar(&Tensor::scalar(2.0), 0.0).unwrap();
        let y = g.square(&x).unwrap();
        g.backward(&y).unwrap();
        assert!(matches!(g.backward(&y), Err(Error::BackwardTwice)));
        g.reset();
        g.backward(&y).unwrap();
    }

    #[test]
    fn backward_demands_scalar_recorded_loss() {
        let mut g = Graph::recording();
        let x = g.add_scalar(&t(&[2], &[1.0, 2.0]), 0.0).unwrap();
        assert!(matches!(g.backward(&x), Err(Error::NonScalarLoss { .. })));
        let mut other = Graph::recording();
        let y = other.mean_all(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(&y), Err(Error::LossNotRecorded)));
    }

    #[test]
    fn reused_parameter_accumulates_gradient() {
        use super::super::ParamStore;
        let mut store = ParamStore::new();
        let p = store.add("w", t(&[1], &[3.0])).unwrap();
        let mut g = Graph::recording();
        let w1 = g.param(store.get(p));
        let w2 = g.param(store.get(p));
        let prod = g.mul(&w1, &w2).unwrap();
        g.backward(&prod).unwrap();
        let grad = g.grad_param(store.get(p));
        assert!((grad.data()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn unreached_parameter_grad_is_zero() {
        use super::super::ParamStore;
        let mut store = ParamStore::new();
        let a = store.add("a", t(&[1], &[2.0])).unwrap();
        let b = store.add("b", t(&[2, 2], &[0.0; 4])).unwrap();
        let mut g = Graph::recording();
        let wa = g.param(store.get(a));
        let y = g.square(&wa).unwrap();
        g.backward(&y).unwrap();
        let gb = g.grad_param(store.get(b));
        assert_eq!(gb.shape(), &[2, 2]);
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gather_rows_accumulates_duplicate_gradients() {
        let mut g = Graph::recording();
        let x = g.add_scalar(&t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 0.0).unwrap();
        let picked = g.gather_rows(&x, &[1, 1, 2]).unwrap();
        assert_eq!(picked.data(), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.mean_all(&picked).unwrap();
        g.backward(&s).unwrap();
        let dx = g.grad_of(&x).unwrap();
        assert!((dx.at(&[1, 0]) - 2.0 / 6.0).abs() < 1e-12);
        assert!((dx.at(&[2, 0]) - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(dx.at(&[0, 0]), 0.0);
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let mut g = Graph::inference();
        assert!(matches!(
            g.log(&t(&[2], &[1.0, 0.0])),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn concat_rows_stacks_and_checks() {
        let mut g = Graph::inference();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = g.concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bad = t(&[1, 3], &[0.0; 3]);
        assert!(g.concat_rows(&[&a, &bad]).is_err());
    }
}
