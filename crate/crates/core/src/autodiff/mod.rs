//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass in insertion
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and leaves gradients in the grad slot of every node
//! that requires one. Graphs are built fresh per forward pass and dropped
//! afterwards.
//!
//! Tensors use NCHW layout for image ops: `[batch, channels, height, width]`.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;
use std::rc::Rc;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    Concat(Vec<Var>),
    DisperseSum { input: Var, shifts: Rc<[usize]> },
    DisperseAdjoint { input: Var, channels: usize, width: usize, shifts: Rc<[usize]> },
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For each flat index of `out`, the flat index it reads in `src` under broadcasting.
fn broadcast_indices(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if src[ax] == 1 { 0 } else { acc };
        acc *= src[ax];
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], map: &[usize], len: usize) -> Vec<f64> {
    if map.len() == len {
        // identity map (same shape)
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for (g, &i) in grad.iter().zip(map) {
        out[i] += g;
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are tracked when `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.leaf(tensor.clone().with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`Graph::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(op, &sa, &sb)?;
        let (ma, mb) = (broadcast_indices(&out, &sa), broadcast_indices(&out, &sb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
        Ok((Tensor::new(&out, data)?, out))
    }

    /// Elementwise sum with singleton broadcasting on either side.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product with singleton broadcasting, e.g. a
    /// `[1,C,1,1]` factor over `[B,C,H,W]`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, _) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    /// `max(x, 0)` with subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `sum((a - b)^2)` over all entries.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum(sq))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected rank-4 input/weight, got {si:?} / {sw:?}")));
        }
        if si[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input has {} channels, weight expects {}", si[1], sw[1])));
        }
        if stride == 0 || si[2] + 2 * padding < sw[2] || si[3] + 2 * padding < sw[3] {
            return Err(Error::shape("conv2d", format!("kernel {sw:?} does not fit input {si:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d", format!("bias shape {:?} != [{}]", self.shape(b), sw[0])));
            }
        }
        let geom = ConvGeom {
            batch: si[0],
            cin: si[1],
            h: si[2],
            w: si[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[geom.batch, geom.cout, geom.out_h(), geom.out_w()], out)?;
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(t, Op::Conv2d { input, weight, bias, geom }, &ins))
    }

    /// Per-channel spatial mean, `[B,C,H,W] -> [B,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected rank 4, got {s:?}")));
        }
        let plane = s[2] * s[3];
        let data = self.value(a).data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
        let t = Tensor::new(&[s[0], s[1], 1, 1], data)?;
        Ok(self.push(t, Op::GlobalAvgPool(a), &[a]))
    }

    /// Nearest-neighbour ×2 spatial upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("expected rank 4, got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() * 4);
        for plane in src.chunks(h * w) {
            for y in 0..2 * h {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(a), &[a]))
    }

    /// Concatenation along the channel axis of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() != 4 {
            return Err(Error::shape("concat", format!("expected rank 4, got {s0:?}")));
        }
        let mut channels = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {s0:?}")));
            }
            channels += s[1];
        }
        let plane = s0[2] * s0[3];
        let mut data = Vec::with_capacity(s0[0] * channels * plane);
        for b in 0..s0[0] {
            for p in parts {
                let s = self.shape(*p);
                let n = s[1] * plane;
                data.extend_from_slice(&self.value(*p).data()[b * n..(b + 1) * n]);
            }
        }
        let t = Tensor::new(&[s0[0], channels, s0[2], s0[3]], data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Shift-and-sum of a `[B,C,H,W]` cube into a `[B,1,H,W+max_shift]` snapshot.
    pub fn disperse_sum(&mut self, a: Var, shifts: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[1] != shifts.len() {
            return Err(Error::shape("disperse_sum", format!("input {s:?} vs {} shifts", shifts.len())));
        }
        let wm = s[3] + shifts.iter().copied().max().unwrap_or(0);
        let y = kernels::disperse_sum(self.value(a).data(), s[0], s[1], s[2], s[3], shifts);
        let t = Tensor::new(&[s[0], 1, s[2], wm], y)?;
        Ok(self.push(t, Op::DisperseSum { input: a, shifts: shifts.into() }, &[a]))
    }

    /// Adjoint of [`Graph::disperse_sum`] for a cube of spatial width `width`.
    pub fn disperse_adjoint(&mut self, a: Var, width: usize, shifts: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let wm = width + shifts.iter().copied().max().unwrap_or(0);
        if s.len() != 4 || s[1] != 1 || s[3] != wm {
            return Err(Error::shape(
                "disperse_adjoint",
                format!("measurement {s:?} does not match width {width} with {} bands", shifts.len()),
            ));
        }
        let c = shifts.len();
        let x = kernels::disperse_adjoint(self.value(a).data(), s[0], c, s[2], width, shifts);
        let t = Tensor::new(&[s[0], c, s[2], width], x)?;
        Ok(self.push(t, Op::DisperseAdjoint { input: a, channels: c, width, shifts: shifts.into() }, &[a]))
    }

    /// Thresholds at `threshold` (value 1 when `z >= threshold`, else 0) in the
    /// forward pass and passes the upstream gradient through unchanged.
    pub fn binarize_ste(&mut self, a: Var, threshold: f64) -> Var {
        let t = self.value(a).map(|z| crate::mask::binary_sign(z, threshold));
        self.push(t, Op::StraightThrough(a), &[a])
    }

    /// Reverse pass from a scalar `loss`. Any gradients from a previous call
    /// are discarded first, so repeated calls give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad {
                continue;
            }
            let contributions = self.local_grads(id, &g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].value.requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
            self.nodes[id].value.grad = Some(g);
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = reduce_to(g, &broadcast_indices(out_shape, va.shape()), va.len());
                let mut gb = reduce_to(g, &broadcast_indices(out_shape, vb.shape()), vb.len());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ma = broadcast_indices(out_shape, va.shape());
                let mb = broadcast_indices(out_shape, vb.shape());
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (k, gk) in g.iter().enumerate() {
                    ga[ma[k]] += gk * vb.data()[mb[k]];
                    gb[mb[k]] += gk * va.data()[ma[k]];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Relu(a) => {
                let x = self.value(*a).data();
                vec![(*a, g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect())]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                vec![(*a, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::Conv2d { input, weight, bias, geom } => {
                let mut out = vec![];
                if self.value(*input).requires_grad {
                    out.push((*input, kernels::conv2d_backward_input(geom, g, self.value(*weight).data())));
                }
                if self.value(*weight).requires_grad {
                    out.push((*weight, kernels::conv2d_backward_weight(geom, g, self.value(*input).data())));
                }
                if let Some(b) = bias {
                    out.push((*b, kernels::conv2d_backward_bias(geom, g)));
                }
                out
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let plane = s[2] * s[3];
                let scale = 1.0 / plane as f64;
                let ga = g.iter().flat_map(|&v| std::iter::repeat_n(v * scale, plane)).collect();
                vec![(*a, ga)]
            }
            Op::Upsample2x(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[2], s[3]);
                let mut ga = vec![0.0; self.value(*a).len()];
                for (p, dst) in ga.chunks_mut(h * w).enumerate() {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Concat(parts) => {
                let plane = out_shape[2] * out_shape[3];
                let total = out_shape[1] * plane;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let s = self.shape(*p);
                    let n = s[1] * plane;
                    let mut gp = Vec::with_capacity(s[0] * n);
                    for b in 0..s[0] {
                        gp.extend_from_slice(&g[b * total + offset..b * total + offset + n]);
                    }
                    offset += n;
                    res.push((*p, gp));
                }
                res
            }
            Op::DisperseSum { input, shifts } => {
                let s = self.shape(*input);
                vec![(*input, kernels::disperse_adjoint(g, s[0], s[1], s[2], s[3], shifts))]
            }
            Op::DisperseAdjoint { input, channels, width, shifts } => {
                let s = self.shape(*input);
                vec![(*input, kernels::disperse_sum(g, s[0], *channels, s[2], *width, shifts))]
            }
            Op::StraightThrough(a) => vec![(*a, g.to_vec())],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data()[1], 0.5);
    }

    #[test]
    fn relu_gradient_at_kink_is_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        let l = g.sum(r);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_idempotent() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let l = g.squared_distance(x, x).unwrap();
        let s = g.sum(x);
        let l2 = g.add(l, s).unwrap();
        g.backward(l2).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(l2).unwrap();
        assert_eq!(g.grad(x).unwrap(), first.as_slice());
        assert_eq!(first, vec![1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
        assert!(g.mul(a, b).is_err());
        let c = g.constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(g.concat(&[a, c]).is_err());
    }

    #[test]
    fn broadcast_mul_both_directions() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::new(&[2, 1, 1, 2], vec![1.0, 10.0, 100.0, 1000.0]).unwrap());
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 1, 2]);
        assert_eq!(g.value(c).data(), &[2.0, 20.0, 3.0, 30.0, 200.0, 2000.0, 300.0, 3000.0]);
    }

    #[test]
    fn nearest_upsample_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let u = g.upsample2x(x).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn gap_of_hand_sum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[4.0]);
    }
}
