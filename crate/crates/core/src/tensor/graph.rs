use super::conv::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    /// Input or constant; also used for any result none of whose inputs
    /// require gradients.
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Softmax(Var),
    Log(Var),
    LogClamped(Var, f64),
    Sum(Var),
    Mean(Var),
    MaskMul(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order of the computation, so the backward pass is a single
/// reverse sweep.
///
/// In checked mode (the default) every operation rejects non-finite output.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
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

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.record("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.record("mul", v, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.record("scale", v, &[a], Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let data = conv::matmul(m, k, n, &self.value(a).data, &self.value(b).data);
        let v = Tensor { shape: vec![m, n], data };
        self.record("matmul", v, &[a, b], Op::MatMul(a, b))
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `input` is `[B, C_in, H, W]`, `weight` is `[C_out, C_in, k, k]` with
    /// `k` odd, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (batch, in_ch, height, width) = self.value(input).dims4()?;
        let ws = self.shape(weight).to_vec();
        let geom = match ws[..] {
            [out_ch, c, k, k2] if c == in_ch && k == k2 && k % 2 == 1 => ConvGeom {
                batch,
                in_ch,
                out_ch,
                height,
                width,
                kernel: k,
            },
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: self.shape(input).to_vec(),
                    rhs: ws,
                })
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_ch] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let data = conv::conv2d_forward(
            &geom,
            &self.value(input).data,
            &self.value(weight).data,
            bias.map(|b| &self.value(b).data[..]),
        );
        let v = Tensor {
            shape: vec![batch, geom.out_ch, height, width],
            data,
        };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.record(
            "conv2d",
            v,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, |x| x.max(0.0));
        self.record("relu", v, &[a], Op::Relu(a))
    }

    /// Softmax over axis 1 (the channel axis of `[B, C, ...]`).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape.len() < 2 {
            return Err(Error::invalid("softmax", format!("needs a channel axis, got {:?}", t.shape)));
        }
        let (b, c) = (t.shape[0], t.shape[1]);
        let inner: usize = t.shape[2..].iter().product();
        let mut out = vec![0.0; t.data.len()];
        for bi in 0..b {
            let base = bi * c * inner;
            for s in 0..inner {
                let mut mx = f64::NEG_INFINITY;
                for k in 0..c {
                    mx = mx.max(t.data[base + k * inner + s]);
                }
                let mut z = 0.0;
                for k in 0..c {
                    let e = (t.data[base + k * inner + s] - mx).exp();
                    out[base + k * inner + s] = e;
                    z += e;
                }
                for k in 0..c {
                    out[base + k * inner + s] /= z;
                }
            }
        }
        let v = Tensor {
            shape: t.shape.clone(),
            data: out,
        };
        self.record("softmax", v, &[a], Op::Softmax(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::ln);
        self.record("log", v, &[a], Op::Log(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.map(a, |x| x.max(floor).ln());
        self.record("log_clamped", v, &[a], Op::LogClamped(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.record("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        self.record("mean", Tensor::scalar(s), &[a], Op::Mean(a))
    }

    /// Multiplies `x` of shape `[B, C, ...]` by a per-position mask, which
    /// is either the same shape as `x`, `[B, 1, ...]` or `[B, ...]`; the
    /// latter two broadcast over the channel axis.
    pub fn mask_mul(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (bc, inner) = self.mask_layout(x, mask)?;
        let (tx, tm) = (self.value(x), self.value(mask));
        let data = if tm.data.len() == tx.data.len() {
            tx.data.iter().zip(&tm.data).map(|(a, b)| a * b).collect()
        } else {
            let c = tx.shape[1];
            let mut out = tx.data.clone();
            for (i, o) in out.iter_mut().enumerate() {
                let b = i / (c * inner);
                let s = i % inner;
                *o *= tm.data[b * inner + s];
            }
            debug_assert_eq!(bc, tx.shape[0] * c);
            out
        };
        let v = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        self.record("mask_mul", v, &[x, mask], Op::MaskMul(x, mask))
    }

    fn mask_layout(&self, x: Var, mask: Var) -> Result<(usize, usize)> {
        let (sx, sm) = (self.shape(x), self.shape(mask));
        let err = || Error::ShapeMismatch {
            op: "mask_mul",
            lhs: sx.to_vec(),
            rhs: sm.to_vec(),
        };
        if sx.len() < 2 {
            return Err(err());
        }
        let inner: usize = sx[2..].iter().product();
        let ok = sm == sx
            || (sm.len() == sx.len() && sm[0] == sx[0] && sm[1] == 1 && sm[2..] == sx[2..])
            || (sm.len() + 1 == sx.len() && sm[0] == sx[0] && sm[1..] == sx[2..]);
        if ok {
            Ok((sx[0] * sx[1], inner))
        } else {
            Err(err())
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.record("reshape", v, &[a], Op::Reshape(a))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves that require
    /// them are accumulated into [`Graph::grad`]; calling twice without
    /// [`Graph::zero_grad`] adds the second pass on top of the first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    match node.grad.as_mut() {
                        Some(acc) => {
                            for (a, d) in acc.data.iter_mut().zip(&g) {
                                *a += d;
                            }
                        }
                        None => {
                            node.grad = Some(Tensor {
                                shape: node.value.shape.clone(),
                                data: g,
                            })
                        }
                    }
                }
                op => {
                    for (target, delta) in self.local_grads(op, &node.value, g) {
                        accumulate(&mut grads, target, delta);
                    }
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of one op, for inputs that require grad.
    fn local_grads(&self, op: &Op, out: &Tensor, g: Vec<f64>) -> Vec<(Var, Vec<f64>)> {
        let mut res = Vec::with_capacity(3);
        match *op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if self.wants(a) && self.wants(b) {
                    res.push((a, g.clone()));
                    res.push((b, g));
                } else if self.wants(a) {
                    res.push((a, g));
                } else {
                    res.push((b, g));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    res.push((a, g.iter().zip(&tb.data).map(|(d, y)| d * y).collect()));
                }
                if self.wants(b) {
                    res.push((b, g.iter().zip(&ta.data).map(|(d, x)| d * x).collect()));
                }
            }
            Op::Scale(a, c) => res.push((a, g.into_iter().map(|d| d * c).collect())),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                let (da, db) = conv::matmul_backward(m, k, n, &ta.data, &tb.data, &g);
                if self.wants(a) {
                    res.push((a, da));
                }
                if self.wants(b) {
                    res.push((b, db));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need_b = bias.is_some_and(|b| self.wants(b));
                let grads = conv::conv2d_backward(
                    &geom,
                    &self.value(input).data,
                    &self.value(weight).data,
                    &g,
                    (self.wants(input), self.wants(weight), need_b),
                );
                if let Some(d) = grads.input {
                    res.push((input, d));
                }
                if let Some(d) = grads.weight {
                    res.push((weight, d));
                }
                if let (Some(b), Some(d)) = (bias, grads.bias) {
                    res.push((b, d));
                }
            }
            Op::Relu(a) => {
                let ta = self.value(a);
                res.push((
                    a,
                    g.iter()
                        .zip(&ta.data)
                        .map(|(&d, &x)| if x > 0.0 { d } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Softmax(a) => {
                // dx = p * (g - sum_k p_k g_k), per position
                let (b, c) = (out.shape[0], out.shape[1]);
                let inner: usize = out.shape[2..].iter().product();
                let p = &out.data;
                let mut dx = vec![0.0; p.len()];
                for bi in 0..b {
                    let base = bi * c * inner;
                    for s in 0..inner {
                        let mut dot = 0.0;
                        for k in 0..c {
                            let j = base + k * inner + s;
                            dot += p[j] * g[j];
                        }
                        for k in 0..c {
                            let j = base + k * inner + s;
                            dx[j] = p[j] * (g[j] - dot);
                        }
                    }
                }
                res.push((a, dx));
            }
            Op::Log(a) => {
                let ta = self.value(a);
                res.push((a, g.iter().zip(&ta.data).map(|(d, x)| d / x).collect()));
            }
            Op::LogClamped(a, floor) => {
                let ta = self.value(a);
                res.push((
                    a,
                    g.iter()
                        .zip(&ta.data)
                        .map(|(&d, &x)| if x > floor { d / x } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sum(a) => res.push((a, vec![g[0]; self.value(a).len()])),
            Op::Mean(a) => {
                let n = self.value(a).len();
                res.push((a, vec![g[0] / n as f64; n]));
            }
            Op::MaskMul(x, mask) => {
                let (tx, tm) = (self.value(x), self.value(mask));
                let full = tm.len() == tx.len();
                let c = tx.shape[1];
                let inner: usize = tx.shape[2..].iter().product();
                let midx = |i: usize| if full { i } else { (i / (c * inner)) * inner + i % inner };
                if self.wants(mask) {
                    let mut dm = vec![0.0; tm.len()];
                    for (i, (&d, &xv)) in g.iter().zip(&tx.data).enumerate() {
                        dm[midx(i)] += d * xv;
                    }
                    res.push((mask, dm));
                }
                if self.wants(x) {
                    res.push((x, g.iter().enumerate().map(|(i, &d)| d * tm.data[midx(i)]).collect()));
                }
            }
            Op::Reshape(a) => res.push((a, g)),
        }
        res
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match grads[v.0].as_mut() {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
        None => grads[v.0] = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 19, 2, 2], 0.37));
        let p = g.softmax(x).unwrap();
        for &v in g.value(p).data() {
            assert!((v - 1.0 / 19.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_and_zero_kernels() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64 * 0.31).sin());
        let xv = g.constant(x.clone());
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            eye.data_mut()[c * 3 + c] = 1.0;
        }
        let w = g.constant(eye);
        let y = g.conv2d(xv, w, None).unwrap();
        assert!(g.value(y).bit_eq(&x));

        let zero = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(xv, zero, None).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[2, 4, 4, 5]);
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), true);
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_mean_grad() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[1], &[3.0]), true);
        let sq = g.mul(w, w).unwrap();
        let m = g.mean(sq).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
        assert!(g.matmul(a, a).is_err());
        assert!(g.matmul(a, b).is_ok());
    }

    #[test]
    fn checked_mode_rejects_nan() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.log(a), Err(Error::NonFinite { op: "log" })));
        let mut g = Graph::unchecked();
        let a = g.constant(t(&[1], &[-1.0]));
        assert!(g.log(a).is_ok());
    }

    #[test]
    fn constants_are_not_recorded_for_backward() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let c = g.mul(a, a).unwrap();
        assert!(!g.requires_grad(c));
        let d = g.mul(c, b).unwrap();
        let s = g.sum(d).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn mask_broadcasts_over_channels() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1, 2, 1, 3]), true);
        let m = g.constant(t(&[1, 1, 3], &[1.0, 0.0, 1.0]));
        let y = g.mask_mul(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let bad = g.constant(Tensor::ones(&[1, 4]));
        assert!(g.mask_mul(x, bad).is_err());
    }
}
