//! Forward definitions and backward rules of every recorded operation.

use super::kernels::{fold, hwc, inverse_perm, mm_nn, mm_nt, mm_tn, permute, unfold};
use super::{Node, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "variables from different tapes");
}

impl<'t> Var<'t> {
    /// Matrix product of two rank-2 variables.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(shape_err(format!("matmul of {sa:?} and {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut c = vec![0.0; m * n];
            mm_nn(a.data(), b.data(), &mut c, m, k, n);
            Tensor::from_parts(vec![m, n], c)
        };
        Ok(self.tape.push(out, Op::MatMul { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    /// Batched matrix product `[G,m,k] x [G,k,n]`, or `[G,m,k] x [G,n,k]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            let bad = || shape_err(format!("bmm (trans_b={trans_b}) of {sa:?} and {sb:?}"));
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(bad());
            }
            let (g, m, k) = (sa[0], sa[1], sa[2]);
            let n = if trans_b { sb[1] } else { sb[2] };
            let kb = if trans_b { sb[2] } else { sb[1] };
            if kb != k {
                return Err(bad());
            }
            let mut c = vec![0.0; g * m * n];
            for gi in 0..g {
                let ab = &a.data()[gi * m * k..(gi + 1) * m * k];
                let bb = &b.data()[gi * k * n..(gi + 1) * k * n];
                let cb = &mut c[gi * m * n..(gi + 1) * m * n];
                if trans_b {
                    mm_nt(ab, bb, cb, m, k, n);
                } else {
                    mm_nn(ab, bb, cb, m, k, n);
                }
            }
            Tensor::from_parts(vec![g, m, n], c)
        };
        Ok(self.tape.push(
            out,
            Op::Bmm { a: self.id, b: other.id, trans_b },
            &[self.id, other.id],
        ))
    }

    /// Affine map over the last axis: `[*, Cin] · [Cin, Cout] + [Cout]`.
    pub fn linear(self, w: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        same_tape(&self, &w);
        let out = {
            let x = self.value();
            let wv = w.value();
            let (sx, sw) = (x.shape(), wv.shape());
            if sw.len() != 2 || sx.last() != Some(&sw[0]) {
                return Err(shape_err(format!("linear input {sx:?} with weight {sw:?}")));
            }
            let (cin, cout) = (sw[0], sw[1]);
            let rows = x.numel() / cin;
            let mut c = vec![0.0; rows * cout];
            if let Some(b) = bias {
                let bv = b.value();
                if bv.shape() != [cout] {
                    return Err(shape_err(format!(
                        "linear bias {:?} for output width {cout}",
                        bv.shape()
                    )));
                }
                for row in c.chunks_mut(cout) {
                    row.copy_from_slice(bv.data());
                }
            }
            mm_nn(x.data(), wv.data(), &mut c, rows, cin, cout);
            let mut shape = sx.to_vec();
            *shape.last_mut().unwrap() = cout;
            Tensor::from_parts(shape, c)
        };
        let mut inputs = vec![self.id, w.id];
        inputs.extend(bias.map(|b| b.id));
        Ok(self.tape.push(
            out,
            Op::Linear { x: self.id, w: w.id, b: bias.map(|b| b.id) },
            &inputs,
        ))
    }

    /// Elementwise sum. `other` may have a shape equal to a trailing suffix
    /// of `self`'s shape, in which case it is repeated over the leading axes.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        same_tape(&self, &other);
        let out = {
            let a = self.value();
            let b = other.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
                return Err(shape_err(format!("add of {sa:?} and {sb:?}")));
            }
            let n = b.numel();
            let mut c = a.data().to_vec();
            for chunk in c.chunks_mut(n) {
                for (x, y) in chunk.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::from_parts(sa.to_vec(), c)
        };
        Ok(self.tape.push(out, Op::Add { a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v * c);
        self.tape.push(out, Op::Scale { x: self.id, c }, &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.push(out, Op::Relu { x: self.id }, &[self.id])
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if axis >= s.len() {
                return Err(shape_err(format!("softmax axis {axis} on shape {s:?}")));
            }
            let (outer, len, inner) = split_axis(s, axis);
            let mut y = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..len {
                        mx = mx.max(y[base + j * inner]);
                    }
                    let mut z = 0.0;
                    for j in 0..len {
                        let e = (y[base + j * inner] - mx).exp();
                        y[base + j * inner] = e;
                        z += e;
                    }
                    for j in 0..len {
                        y[base + j * inner] /= z;
                    }
                }
            }
            Tensor::from_parts(s.to_vec(), y)
        };
        Ok(self.tape.push(out, Op::Softmax { x: self.id, axis }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let mut sorted = perm.to_vec();
            sorted.sort_unstable();
            if sorted != (0..x.rank()).collect::<Vec<_>>() {
                return Err(shape_err(format!(
                    "permutation {perm:?} for shape {:?}",
                    x.shape()
                )));
            }
            let (s, d) = permute(x.data(), x.shape(), perm);
            Tensor::from_parts(s, d)
        };
        Ok(self.tape.push(out, Op::Permute { x: self.id, perm: perm.to_vec() }, &[self.id]))
    }

    /// 2×2 average pooling with stride 2 over `[.., H, W, C]`.
    pub fn avgpool2d(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if s.len() < 3 {
                return Err(shape_err(format!("avgpool2d needs [.., H, W, C], got {s:?}")));
            }
            let (b, h, w, c) = hwc(s);
            if h % 2 != 0 || w % 2 != 0 {
                return Err(shape_err(format!("avgpool2d needs even spatial extents, got {s:?}")));
            }
            let (ho, wo) = (h / 2, w / 2);
            let xd = x.data();
            let mut y = vec![0.0; b * ho * wo * c];
            for bi in 0..b {
                for i in 0..ho {
                    for j in 0..wo {
                        let dst = ((bi * ho + i) * wo + j) * c;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let src = ((bi * h + 2 * i + di) * w + 2 * j + dj) * c;
                            for ch in 0..c {
                                y[dst + ch] += 0.25 * xd[src + ch];
                            }
                        }
                    }
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - 3] = ho;
            shape[r - 2] = wo;
            Tensor::from_parts(shape, y)
        };
        Ok(self.tape.push(out, Op::AvgPool2 { x: self.id }, &[self.id]))
    }

    /// Zero-padded k×k neighborhood gather: `[.., H, W, C] -> [.., H, W, k², C]`.
    /// Slot `(dy + k/2) * k + (dx + k/2)` holds the pixel at offset `(dy, dx)`.
    pub fn unfold(self, k: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if s.len() < 3 || k % 2 == 0 {
                return Err(shape_err(format!("unfold k={k} on shape {s:?}")));
            }
            let (b, h, w, c) = hwc(s);
            let d = unfold(x.data(), b, h, w, c, k);
            let mut shape = s[..s.len() - 1].to_vec();
            shape.push(k * k);
            shape.push(c);
            Tensor::from_parts(shape, d)
        };
        Ok(self.tape.push(out, Op::Unfold { x: self.id, k }, &[self.id]))
    }

    /// Nearest-neighbor 2× upsampling over `[.., H, W, C]`.
    pub fn upsample_nearest2x(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if s.len() < 3 {
                return Err(shape_err(format!("upsample needs [.., H, W, C], got {s:?}")));
            }
            let (b, h, w, c) = hwc(s);
            let (ho, wo) = (2 * h, 2 * w);
            let xd = x.data();
            let mut y = vec![0.0; b * ho * wo * c];
            for bi in 0..b {
                for i in 0..ho {
                    for j in 0..wo {
                        let src = ((bi * h + i / 2) * w + j / 2) * c;
                        let dst = ((bi * ho + i) * wo + j) * c;
                        y[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - 3] = ho;
            shape[r - 2] = wo;
            Tensor::from_parts(shape, y)
        };
        Ok(self.tape.push(out, Op::Upsample2 { x: self.id }, &[self.id]))
    }

    /// Global average over the spatial axes: `[B, H, W, C] -> [B, C]`.
    pub fn mean_spatial(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 {
                return Err(shape_err(format!("mean_spatial needs [B, H, W, C], got {s:?}")));
            }
            let (b, h, w, c) = hwc(s);
            let hw = (h * w) as f64;
            let mut y = vec![0.0; b * c];
            for (bi, pix) in x.data().chunks(h * w * c).enumerate() {
                for p in pix.chunks(c) {
                    for ch in 0..c {
                        y[bi * c + ch] += p[ch];
                    }
                }
            }
            for v in &mut y {
                *v /= hw;
            }
            Tensor::from_parts(vec![b, c], y)
        };
        Ok(self.tape.push(out, Op::MeanSpatial { x: self.id }, &[self.id]))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.push(out, Op::Sum { x: self.id }, &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let out = {
            let x = self.value();
            Tensor::scalar(x.sum() / x.numel() as f64)
        };
        self.tape.push(out, Op::Mean { x: self.id }, &[self.id])
    }

    /// Row `row` of a rank-2 variable.
    pub fn select_row(self, row: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 2 || row >= s[0] {
                return Err(shape_err(format!("row {row} of shape {s:?}")));
            }
            Tensor::from_parts(vec![s[1]], x.data()[row * s[1]..(row + 1) * s[1]].to_vec())
        };
        Ok(self.tape.push(out, Op::SelectRow { x: self.id, row }, &[self.id]))
    }

    /// `Σ_i weights[i] · xs[i]` for a rank-1 `weights` and equally shaped `xs`.
    pub fn weighted_sum(weights: Var<'t>, xs: &[Var<'t>]) -> Result<Var<'t>> {
        let out = {
            let w = weights.value();
            if w.rank() != 1 || w.numel() != xs.len() || xs.is_empty() {
                return Err(shape_err(format!(
                    "weighted_sum of {} terms with weights {:?}",
                    xs.len(),
                    w.shape()
                )));
            }
            let shape = xs[0].shape();
            let mut acc = vec![0.0; shape.iter().product()];
            for (x, &wi) in xs.iter().zip(w.data()) {
                same_tape(&weights, x);
                let xv = x.value();
                if xv.shape() != shape.as_slice() {
                    return Err(shape_err(format!(
                        "weighted_sum terms {:?} and {shape:?}",
                        xv.shape()
                    )));
                }
                for (a, v) in acc.iter_mut().zip(xv.data()) {
                    *a += wi * v;
                }
            }
            Tensor::from_parts(shape, acc)
        };
        let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
        let mut inputs = ids.clone();
        inputs.push(weights.id);
        Ok(weights
            .tape
            .push(out, Op::WeightedSum { w: weights.id, xs: ids }, &inputs))
    }

    /// Mean absolute difference over all elements.
    pub fn l1_loss(self, target: Var<'t>) -> Result<Var<'t>> {
        self.l1_loss_weighted(target, None)
    }

    /// Weighted mean absolute difference `Σ w|p - t| / Σ w`; `None` means
    /// unit weights.
    pub fn l1_loss_weighted(self, target: Var<'t>, weights: Option<Vec<f64>>) -> Result<Var<'t>> {
        same_tape(&self, &target);
        let out = {
            let p = self.value();
            let t = target.value();
            if p.shape() != t.shape() {
                return Err(shape_err(format!(
                    "l1_loss of {:?} and {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
            let diffs = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs());
            let v = match &weights {
                None => diffs.sum::<f64>() / p.numel() as f64,
                Some(w) => {
                    if w.len() != p.numel() {
                        return Err(shape_err("l1 weights length differs from prediction"));
                    }
                    let total: f64 = w.iter().sum();
                    if total <= 0.0 {
                        return Err(Error::Input("l1 weights sum to zero".into()));
                    }
                    diffs.zip(w).map(|(d, w)| d * w).sum::<f64>() / total
                }
            };
            Tensor::scalar(v)
        };
        Ok(self.tape.push(
            out,
            Op::L1 { pred: self.id, target: target.id, weights },
            &[self.id, target.id],
        ))
    }

    /// Mean over the batch of `-Σ_k q_k log softmax(logits)_k` where `q` is the
    /// one-hot label distribution smoothed by `smoothing`.
    pub fn cross_entropy(self, labels: &[usize], smoothing: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 2 || s[0] != labels.len() {
                return Err(shape_err(format!(
                    "cross_entropy logits {s:?} with {} labels",
                    labels.len()
                )));
            }
            if !(0.0..1.0).contains(&smoothing) {
                return Err(Error::Input(format!("smoothing {smoothing} outside [0, 1)")));
            }
            let k = s[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
            }
            let mut total = 0.0;
            for (row, &y) in x.data().chunks(k).zip(labels) {
                let lse = log_sum_exp(row);
                for (j, &v) in row.iter().enumerate() {
                    let q = smoothed_target(j, y, k, smoothing);
                    if q != 0.0 {
                        total -= q * (v - lse);
                    }
                }
            }
            Tensor::scalar(total / labels.len() as f64)
        };
        Ok(self.tape.push(
            out,
            Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), smoothing },
            &[self.id],
        ))
    }
}

fn smoothed_target(j: usize, label: usize, k: usize, smoothing: f64) -> f64 {
    let base = smoothing / k as f64;
    if j == label {
        1.0 - smoothing + base
    } else {
        base
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub(super) fn backward_rule(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let mut ga = vec![0.0; m * k];
                mm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                accumulate(nodes, grads, *a, Tensor::from_parts(vec![m, k], ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; k * n];
                mm_tn(av.data(), g.data(), &mut gb, m, k, n);
                accumulate(nodes, grads, *b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = g.shape()[2];
            if wants(*a) {
                let mut ga = vec![0.0; gn * m * k];
                for gi in 0..gn {
                    let gg = &g.data()[gi * m * n..(gi + 1) * m * n];
                    let bb = &bv.data()[gi * k * n..(gi + 1) * k * n];
                    let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                    if *trans_b {
                        mm_nn(gg, bb, out, m, n, k);
                    } else {
                        mm_nt(gg, bb, out, m, n, k);
                    }
                }
                accumulate(nodes, grads, *a, Tensor::from_parts(av.shape().to_vec(), ga));
            }
            if wants(*b) {
                let mut gb = vec![0.0; gn * k * n];
                for gi in 0..gn {
                    let gg = &g.data()[gi * m * n..(gi + 1) * m * n];
                    let aa = &av.data()[gi * m * k..(gi + 1) * m * k];
                    let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        mm_tn(gg, aa, out, m, n, k);
                    } else {
                        mm_tn(aa, gg, out, m, k, n);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.numel() / cin;
            if wants(*x) {
                let mut gx = vec![0.0; rows * cin];
                mm_nt(g.data(), wv.data(), &mut gx, rows, cout, cin);
                accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            if wants(*w) {
                let mut gw = vec![0.0; cin * cout];
                mm_tn(xv.data(), g.data(), &mut gw, rows, cin, cout);
                accumulate(nodes, grads, *w, Tensor::from_parts(vec![cin, cout], gw));
            }
            if let Some(b) = b {
                if wants(*b) {
                    let mut gb = vec![0.0; cout];
                    for row in g.data().chunks(cout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(nodes, grads, *b, Tensor::from_parts(vec![cout], gb));
                }
            }
        }
        Op::Add { a, b } => {
            if wants(*a) {
                accumulate(nodes, grads, *a, g.clone());
            }
            if wants(*b) {
                let bv = val(*b);
                let n = bv.numel();
                let mut gb = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (a, v) in gb.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::from_parts(bv.shape().to_vec(), gb));
            }
        }
        Op::Scale { x, c } => accumulate(nodes, grads, *x, g.map(|v| v * c)),
        Op::Relu { x } => {
            let xv = val(*x);
            let d = g
                .data()
                .iter()
                .zip(xv.data())
                .map(|(gv, &xi)| if xi > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, len, inner) = split_axis(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len)
                        .map(|j| yd[base + j * inner] * gd[base + j * inner])
                        .sum();
                    for j in 0..len {
                        let p = base + j * inner;
                        gx[p] = yd[p] * (gd[p] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(y.shape().to_vec(), gx));
        }
        Op::Reshape { x } => {
            let shape = val(*x).shape().to_vec();
            accumulate(nodes, grads, *x, Tensor::from_parts(shape, g.data().to_vec()));
        }
        Op::Permute { x, perm } => {
            let (s, d) = permute(g.data(), g.shape(), &inverse_perm(perm));
            accumulate(nodes, grads, *x, Tensor::from_parts(s, d));
        }
        Op::AvgPool2 { x } => {
            let xv = val(*x);
            let (b, h, w, c) = hwc(xv.shape());
            let (ho, wo) = (h / 2, w / 2);
            let gd = g.data();
            let mut gx = vec![0.0; xv.numel()];
            for bi in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let src = ((bi * ho + i / 2) * wo + j / 2) * c;
                        let dst = ((bi * h + i) * w + j) * c;
                        for ch in 0..c {
                            gx[dst + ch] = 0.25 * gd[src + ch];
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::LocalAttn(la) => local_attention_backward(nodes, la, g, grads),
        Op::Unfold { x, k } => {
            let xv = val(*x);
            let (b, h, w, c) = hwc(xv.shape());
            let gx = fold(g.data(), b, h, w, c, *k);
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::Upsample2 { x } => {
            let xv = val(*x);
            let (b, h, w, c) = hwc(xv.shape());
            let (ho, wo) = (2 * h, 2 * w);
            let gd = g.data();
            let mut gx = vec![0.0; xv.numel()];
            for bi in 0..b {
                for i in 0..ho {
                    for j in 0..wo {
                        let dst = ((bi * h + i / 2) * w + j / 2) * c;
                        let src = ((bi * ho + i) * wo + j) * c;
                        for ch in 0..c {
                            gx[dst + ch] += gd[src + ch];
                        }
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::MeanSpatial { x } => {
            let xv = val(*x);
            let (b, h, w, c) = hwc(xv.shape());
            let scale = 1.0 / (h * w) as f64;
            let mut gx = vec![0.0; xv.numel()];
            for bi in 0..b {
                let grow = &g.data()[bi * c..(bi + 1) * c];
                for p in gx[bi * h * w * c..(bi + 1) * h * w * c].chunks_mut(c) {
                    for (a, v) in p.iter_mut().zip(grow) {
                        *a = v * scale;
                    }
                }
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        Op::Sum { x } => {
            let shape = val(*x).shape().to_vec();
            accumulate(nodes, grads, *x, Tensor::full(&shape, g.item()));
        }
        Op::Mean { x } => {
            let xv = val(*x);
            let v = g.item() / xv.numel() as f64;
            accumulate(nodes, grads, *x, Tensor::full(xv.shape(), v));
        }
        Op::SelectRow { x, row } => {
            let xv = val(*x);
            let cols = xv.shape()[1];
            let mut gx = Tensor::zeros(xv.shape());
            gx.data_mut()[row * cols..(row + 1) * cols].copy_from_slice(g.data());
            accumulate(nodes, grads, *x, gx);
        }
        Op::WeightedSum { w, xs } => {
            let wv = val(*w);
            if wants(*w) {
                let gw: Vec<f64> = xs
                    .iter()
                    .map(|&xi| val(xi).data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
                    .collect();
                accumulate(nodes, grads, *w, Tensor::from_parts(wv.shape().to_vec(), gw));
            }
            for (&xi, &wi) in xs.iter().zip(wv.data()) {
                if wants(xi) {
                    accumulate(nodes, grads, xi, g.map(|v| v * wi));
                }
            }
        }
        Op::L1 { pred, target, weights } => {
            let (p, t) = (val(*pred), val(*target));
            let n = p.numel() as f64;
            let total: f64 = weights.as_ref().map_or(n, |w| w.iter().sum());
            let gs = g.item() / total;
            let gp: Vec<f64> = p
                .data()
                .iter()
                .zip(t.data())
                .enumerate()
                .map(|(i, (a, b))| {
                    let d = a - b;
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    s * gs * weights.as_ref().map_or(1.0, |w| w[i])
                })
                .collect();
            if wants(*target) {
                let gt = gp.iter().map(|v| -v).collect();
                accumulate(nodes, grads, *target, Tensor::from_parts(t.shape().to_vec(), gt));
            }
            accumulate(nodes, grads, *pred, Tensor::from_parts(p.shape().to_vec(), gp));
        }
        Op::CrossEntropy { logits, labels, smoothing } => {
            let xv = val(*logits);
            let k = xv.shape()[1];
            let scale = g.item() / labels.len() as f64;
            let mut gx = Vec::with_capacity(xv.numel());
            for (row, &y) in xv.data().chunks(k).zip(labels) {
                let lse = log_sum_exp(row);
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - lse).exp();
                    gx.push((p - smoothed_target(j, y, k, *smoothing)) * scale);
                }
            }
            accumulate(nodes, grads, *logits, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
    }
}

/// Windowed multi-head attention over `[B, H, W, C]` projections.
///
/// For pixel `p`, head `h` and window slot `s` with neighbor `n`, the logit is
/// `q·k_n / sqrt(d) + q·r_s` and the output is `Σ_s softmax(logits)_s v_n`.
/// Slots falling outside the image see zero keys and values but keep their
/// relative term. Returns the output and, if asked, the attention weights.
pub(crate) fn local_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    rel: Option<Var<'t>>,
    window: usize,
    heads: usize,
    keep_weights: bool,
) -> Result<(Var<'t>, Option<Tensor>)> {
    same_tape(&q, &k);
    same_tape(&q, &v);
    let (out, attn) = {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let s = qv.shape().to_vec();
        if s.len() != 4 || kv.shape() != s.as_slice() || vv.shape() != s.as_slice() {
            return Err(shape_err(format!(
                "local attention on {:?}, {:?}, {:?}",
                s,
                kv.shape(),
                vv.shape()
            )));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let d = c / heads;
        let kk = window * window;
        let relv = rel.map(|r| r.value());
        if let Some(r) = &relv {
            if r.shape() != [kk, d] {
                return Err(shape_err(format!("relative table {:?}, expected [{kk}, {d}]", r.shape())));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; qd.len()];
        let mut attn = vec![0.0; b * h * w * heads * kk];
        let mut nbr = vec![None; kk];
        for pi in 0..b * h * w {
            neighbors(pi, h, w, window, &mut nbr);
            for hd in 0..heads {
                let qo = pi * c + hd * d;
                let qs = &qd[qo..qo + d];
                let a = &mut attn[(pi * heads + hd) * kk..(pi * heads + hd + 1) * kk];
                let mut mx = f64::NEG_INFINITY;
                for (slot, n) in nbr.iter().enumerate() {
                    let mut l = 0.0;
                    if let Some(n) = n {
                        let ko = n * c + hd * d;
                        l = dot(qs, &kd[ko..ko + d]) * scale;
                    }
                    if let Some(r) = &relv {
                        l += dot(qs, &r.data()[slot * d..(slot + 1) * d]);
                    }
                    a[slot] = l;
                    mx = mx.max(l);
                }
                let mut z = 0.0;
                for x in a.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                let o = &mut out[qo..qo + d];
                for (slot, n) in nbr.iter().enumerate() {
                    a[slot] /= z;
                    if let Some(n) = n {
                        let vo = n * c + hd * d;
                        for (oj, vj) in o.iter_mut().zip(&vd[vo..vo + d]) {
                            *oj += a[slot] * vj;
                        }
                    }
                }
            }
        }
        (Tensor::from_parts(s, out), attn)
    };
    let returned = keep_weights.then(|| Tensor::from_parts(vec![attn.len() / (window * window), 1, window * window], attn.clone()));
    let mut inputs = vec![q.id, k.id, v.id];
    inputs.extend(rel.map(|r| r.id));
    let op = Op::LocalAttn(Box::new(super::LocalAttn {
        q: q.id,
        k: k.id,
        v: v.id,
        rel: rel.map(|r| r.id),
        window,
        heads,
        attn,
    }));
    Ok((q.tape.push(out, op, &inputs), returned))
}

/// Flat pixel index of each window slot around pixel `pi`, `None` if padded.
fn neighbors(pi: usize, h: usize, w: usize, window: usize, out: &mut [Option<usize>]) {
    let r = (window / 2) as isize;
    let (img, rem) = (pi / (h * w), pi % (h * w));
    let (i, j) = ((rem / w) as isize, (rem % w) as isize);
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (i + dy, j + dx);
            let slot = ((dy + r) as usize) * window + (dx + r) as usize;
            out[slot] = (y >= 0 && y < h as isize && x >= 0 && x < w as isize)
                .then(|| img * h * w + y as usize * w + x as usize);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn local_attention_backward(nodes: &[Node], la: &super::LocalAttn, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let s = val(la.q).shape().to_vec();
    let (h, w, c) = (s[1], s[2], s[3]);
    let d = c / la.heads;
    let kk = la.window * la.window;
    let scale = 1.0 / (d as f64).sqrt();
    let (qd, kd, vd) = (val(la.q).data(), val(la.k).data(), val(la.v).data());
    let reld = la.rel.map(|r| val(r).data());
    let gd = g.data();
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut gr = vec![0.0; kk * d];
    let mut nbr = vec![None; kk];
    let mut gl = vec![0.0; kk];
    for pi in 0..qd.len() / c {
        neighbors(pi, h, w, la.window, &mut nbr);
        for hd in 0..la.heads {
            let off = pi * c + hd * d;
            let a = &la.attn[(pi * la.heads + hd) * kk..(pi * la.heads + hd + 1) * kk];
            let go = &gd[off..off + d];
            let mut mean = 0.0;
            for (slot, n) in nbr.iter().enumerate() {
                let ga = match n {
                    Some(n) => {
                        let vo = n * c + hd * d;
                        for (gvj, goj) in gv[vo..vo + d].iter_mut().zip(go) {
                            *gvj += a[slot] * goj;
                        }
                        dot(go, &vd[vo..vo + d])
                    }
                    None => 0.0,
                };
                gl[slot] = ga;
                mean += a[slot] * ga;
            }
            let qs = &qd[off..off + d];
            for (slot, n) in nbr.iter().enumerate() {
                let l = a[slot] * (gl[slot] - mean);
                if l == 0.0 {
                    continue;
                }
                if let Some(n) = n {
                    let ko = n * c + hd * d;
                    for j in 0..d {
                        gq[off + j] += l * scale * kd[ko + j];
                        gk[ko + j] += l * scale * qs[j];
                    }
                }
                if let Some(r) = reld {
                    let ro = slot * d;
                    for j in 0..d {
                        gq[off + j] += l * r[ro + j];
                        gr[ro + j] += l * qs[j];
                    }
                }
            }
        }
    }
    accumulate(nodes, grads, la.q, Tensor::from_parts(s.clone(), gq));
    accumulate(nodes, grads, la.k, Tensor::from_parts(s.clone(), gk));
    accumulate(nodes, grads, la.v, Tensor::from_parts(s, gv));
    if let Some(r) = la.rel {
        accumulate(nodes, grads, r, Tensor::from_parts(vec![kk, d], gr));
    }
}
