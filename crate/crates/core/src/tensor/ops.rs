//! Forward kernels recorded on the tape and their vector-Jacobian products.

use super::tape::{Op, PoolMode, Tape, Var};
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::exec::{self, Exec};

/// Distances at or below this floor (squared) are treated as constant.
pub(crate) const DIST_FLOOR_SQ: f64 = 1e-12;

fn broadcastable(a: Shape, b: Shape) -> bool {
    a.0.iter().zip(&b.0).all(|(&x, &y)| y == x || y == 1)
}

/// For each flat index of `a`, the flat index of `b` it reads under broadcasting.
fn broadcast_map(a: Shape, b: Shape) -> Vec<usize> {
    let pick = |d: usize, i: usize| if b.0[d] == 1 { 0 } else { i };
    let mut map = Vec::with_capacity(a.numel());
    for n in 0..a.n() {
        for c in 0..a.c() {
            for h in 0..a.h() {
                for w in 0..a.w() {
                    map.push(b.flat(pick(0, n), pick(1, c), pick(2, h), pick(3, w)));
                }
            }
        }
    }
    map
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn check2(&self, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)
    }

    /// Elementwise product; `b` broadcasts along any axis where its extent is 1.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check2(a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::ShapeMismatch {
                op: "mul_broadcast",
                left: sa,
                right: sb,
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = if sa == sb {
            av.iter().zip(bv).map(|(x, y)| x * y).collect()
        } else {
            broadcast_map(sa, sb)
                .into_iter()
                .zip(av)
                .map(|(j, x)| x * bv[j])
                .collect()
        };
        Ok(self.record(Tensor::from_vec(sa, data)?, Op::MulBroadcast { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check2(a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: sa,
                right: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.record(Tensor::from_vec(sa, data)?, Op::Add { a, b }))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(t.shape(), data)?;
        Ok(self.record(out, op))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| 1.0 - v, Op::OneMinus { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, |v| v * factor, Op::Scale { x, factor })
    }

    /// Identity forward; the backward pass multiplies the gradient by `-scale`.
    pub fn gradient_reversal(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!(
                "reversal scale must be positive, got {scale}"
            )));
        }
        self.unary(x, |v| v, Op::GradientReversal { x, scale })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum { x }))
    }

    /// Reduces `H x W` to `1 x 1` per channel. Max picks the lowest flat index on ties.
    pub fn pool_global(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let s = t.shape();
        let plane = s.plane();
        if plane == 0 {
            return Err(Error::Empty("pool_global over empty spatial extent".into()));
        }
        let mut data = Vec::with_capacity(s.n() * s.c());
        let mut argmax = Vec::new();
        for (i, chunk) in t.data().chunks(plane).enumerate() {
            match mode {
                PoolMode::Avg => data.push(chunk.iter().sum::<f64>() / plane as f64),
                PoolMode::Max => {
                    let (j, v) = first_max(chunk.iter().copied());
                    data.push(v);
                    argmax.push(i * plane + j);
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1), data)?;
        Ok(self.record(out, Op::PoolGlobal { x, mode, argmax }))
    }

    /// Reduces the channel axis to 1. Max picks the lowest channel on ties.
    pub fn pool_channel(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        self.check(x)?;
        let t = self.value(x);
        let s = t.shape();
        if s.c() == 0 {
            return Err(Error::Empty("pool_channel over zero channels".into()));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n() * plane);
        let mut argmax = Vec::new();
        let v = t.data();
        for n in 0..s.n() {
            for p in 0..plane {
                let at = |c: usize| (n * s.c() + c) * plane + p;
                match mode {
                    PoolMode::Avg => {
                        let total: f64 = (0..s.c()).map(|c| v[at(c)]).sum();
                        data.push(total / s.c() as f64);
                    }
                    PoolMode::Max => {
                        let (c, m) = first_max((0..s.c()).map(|c| v[at(c)]));
                        data.push(m);
                        argmax.push(at(c));
                    }
                }
            }
        }
        let out = Tensor::from_vec(Shape::new(s.n(), 1, s.h(), s.w()), data)?;
        Ok(self.record(out, Op::PoolChannel { x, mode, argmax }))
    }

    /// Affine map `x W^T + b` per batch item.
    ///
    /// `x` is `(N, C_in, 1, 1)`, `w` is `(C_out, C_in, 1, 1)`, `b` is `(1, C_out, 1, 1)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check2(x, w)?;
        self.check(b)?;
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.h() != 1 || sx.w() != 1 || sw.h() != 1 || sw.w() != 1 || sw.c() != sx.c() {
            return Err(Error::ShapeMismatch {
                op: "dense",
                left: sx,
                right: sw,
            });
        }
        if sb != Shape::new(1, sw.n(), 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "dense bias",
                left: sw,
                right: sb,
            });
        }
        let (cin, cout) = (sx.c(), sw.n());
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut data = Vec::with_capacity(sx.n() * cout);
        for row in xv.chunks(cin) {
            for o in 0..cout {
                let wr = &wv[o * cin..(o + 1) * cin];
                data.push(bv[o] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let out = Tensor::from_vec(Shape::new(sx.n(), cout, 1, 1), data)?;
        Ok(self.record(out, Op::Dense { x, w, b }))
    }

    /// 2-D cross-correlation with zero padding `(k-1)/2` and the given stride.
    ///
    /// `kernel` is `(C_out, C_in, k, k)` with odd `k`; `bias` is `(1, C_out, 1, 1)`.
    /// With stride 1 the output keeps the input's spatial size.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        self.check2(x, kernel)?;
        self.check(bias)?;
        let (sx, sk, sb) = (self.shape(x), self.shape(kernel), self.shape(bias));
        if sk.h() != sk.w() || sk.h() % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be square with odd size, got {sk}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if sk.c() != sx.c() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: sx,
                right: sk,
            });
        }
        if sb != Shape::new(1, sk.n(), 1, 1) {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: sk,
                right: sb,
            });
        }
        let geo = ConvGeometry::new(sx, sk, stride);
        let data = conv_forward(
            &geo,
            self.value(x).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            self.exec,
        );
        let out = Tensor::from_vec(geo.out, data)?;
        Ok(self.record(out, Op::Conv2d { x, k: kernel, b: bias, stride }))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check2(a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(Error::ShapeMismatch {
                op: "concat_channel",
                left: sa,
                right: sb,
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..sa.n() {
            data.extend_from_slice(&av[n * sa.item_len()..(n + 1) * sa.item_len()]);
            data.extend_from_slice(&bv[n * sb.item_len()..(n + 1) * sb.item_len()]);
        }
        let out = Tensor::from_vec(Shape::new(sa.n(), sa.c() + sb.c(), sa.h(), sa.w()), data)?;
        Ok(self.record(out, Op::ConcatChannel { a, b }))
    }

    /// Mean softmax cross-entropy of `(N, K, 1, 1)` logits against class labels.
    ///
    /// Log-probabilities are clamped at `-50`; clamped rows pass no gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits);
        if s.h() != 1 || s.w() != 1 {
            return Err(Error::invalid(format!("cross_entropy expects (N,K,1,1), got {s}")));
        }
        if labels.len() != s.n() {
            return Err(Error::invalid(format!(
                "cross_entropy: {} labels for batch of {}",
                labels.len(),
                s.n()
            )));
        }
        if s.n() == 0 {
            return Err(Error::Empty("cross_entropy over empty batch".into()));
        }
        let k = s.c();
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = Vec::with_capacity(s.numel());
        let mut live = Vec::with_capacity(s.n());
        let mut total = 0.0;
        for (row, &y) in self.value(logits).data().chunks(k).zip(labels) {
            let (m, log_z) = crate::losses::log_partition(row);
            probs.extend(row.iter().map(|l| (l - m - log_z).exp()));
            let log_p = row[y] - m - log_z;
            live.push(log_p >= crate::losses::LOG_PROB_FLOOR);
            total -= log_p.max(crate::losses::LOG_PROB_FLOOR);
        }
        let out = Tensor::scalar(total / s.n() as f64);
        Ok(self.record(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                live,
            },
        ))
    }

    /// Batch-hard triplet loss on `(N, D, 1, 1)` embeddings with Euclidean distance.
    ///
    /// Anchors without a positive in the batch are skipped.
    pub fn triplet_batch_hard(&mut self, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
        self.check(emb)?;
        let s = self.shape(emb);
        if s.h() != 1 || s.w() != 1 {
            return Err(Error::invalid(format!("triplet expects (N,D,1,1), got {s}")));
        }
        if labels.len() != s.n() {
            return Err(Error::invalid(format!(
                "triplet: {} labels for batch of {}",
                labels.len(),
                s.n()
            )));
        }
        if !(margin > 0.0) {
            return Err(Error::invalid(format!("triplet margin must be positive, got {margin}")));
        }
        let n = s.n();
        let d = s.c();
        let e = self.value(emb).data();
        let mut dist = vec![0.0; n * n];
        let mut clamped = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let sq: f64 = (0..d).map(|k| (e[i * d + k] - e[j * d + k]).powi(2)).sum();
                clamped[i * n + j] = sq <= DIST_FLOOR_SQ;
                dist[i * n + j] = sq.max(DIST_FLOOR_SQ).sqrt();
            }
        }
        let selections = batch_hard_selection(&dist, n, labels)?;
        let total: f64 = selections
            .iter()
            .map(|t| crate::losses::triplet_hinge(dist[t.anchor * n + t.positive], dist[t.anchor * n + t.negative], margin))
            .sum();
        let selections: Vec<TripletSelection> = selections
            .into_iter()
            .map(|mut t| {
                t.active = crate::losses::triplet_hinge(
                    dist[t.anchor * n + t.positive],
                    dist[t.anchor * n + t.negative],
                    margin,
                ) > 0.0;
                t
            })
            .collect();
        let out = Tensor::scalar(total / selections.len() as f64);
        Ok(self.record(
            out,
            Op::Triplet {
                emb,
                selections,
                dist,
                clamped,
            },
        ))
    }
}

fn first_max(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// One mined triplet: hardest positive and hardest negative for an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletSelection {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// Hinge strictly positive (set by the loss op).
    pub active: bool,
}

/// Batch-hard mining over a row-major `n x n` distance matrix.
///
/// Per anchor: farthest same-label sample and nearest different-label sample,
/// ties broken by lowest index. Anchors lacking a positive are skipped.
pub fn batch_hard_selection(dist: &[f64], n: usize, labels: &[usize]) -> Result<Vec<TripletSelection>> {
    if dist.len() != n * n || labels.len() != n {
        return Err(Error::invalid("distance matrix and labels disagree in size"));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "need at least 2 identities, found {}",
            ids.len()
        )));
    }
    let mut out = Vec::new();
    for a in 0..n {
        let row = &dist[a * n..(a + 1) * n];
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if pos.is_none_or(|p| row[j] > row[p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|q| row[j] < row[q]) {
                neg = Some(j);
            }
        }
        if let (Some(positive), Some(negative)) = (pos, neg) {
            out.push(TripletSelection {
                anchor: a,
                positive,
                negative,
                active: false,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::DegenerateBatch(
            "no identity has two samples in the batch".into(),
        ));
    }
    Ok(out)
}

pub(crate) struct ConvGeometry {
    pub x: Shape,
    pub k: Shape,
    pub out: Shape,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(x: Shape, k: Shape, stride: usize) -> Self {
        let ksize = k.h();
        let pad = (ksize - 1) / 2;
        let ho = (x.h() + 2 * pad - ksize) / stride + 1;
        let wo = (x.w() + 2 * pad - ksize) / stride + 1;
        ConvGeometry {
            x,
            k,
            out: Shape::new(x.n(), k.n(), ho, wo),
            stride,
            pad,
        }
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Valid output range `[lo, hi)` for a kernel tap along one axis.
    #[inline]
    fn out_range(&self, t: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        // o*stride + t - pad in [0, extent)
        let lo = if t >= self.pad {
            0
        } else {
            (self.pad - t).div_ceil(self.stride)
        };
        let mut hi = out_extent;
        while hi > lo && self.src(hi - 1, t, extent).is_none() {
            hi -= 1;
        }
        (lo, hi)
    }
}

pub(crate) fn conv_forward(geo: &ConvGeometry, x: &[f64], k: &[f64], b: &[f64], exec: Exec) -> Vec<f64> {
    let (ci_n, co_n, ks) = (geo.x.c(), geo.k.n(), geo.k.h());
    let (h, w, ho, wo) = (geo.x.h(), geo.x.w(), geo.out.h(), geo.out.w());
    let mut out = vec![0.0; geo.out.numel()];
    let item_in = geo.x.item_len();
    exec::for_each_chunk(exec, &mut out, geo.out.item_len(), |n, o| {
        let xn = &x[n * item_in..(n + 1) * item_in];
        for co in 0..co_n {
            let oc = &mut o[co * ho * wo..(co + 1) * ho * wo];
            oc.fill(b[co]);
            for ci in 0..ci_n {
                let xc = &xn[ci * h * w..(ci + 1) * h * w];
                for ky in 0..ks {
                    let (ylo, yhi) = geo.out_range(ky, h, ho);
                    for kx in 0..ks {
                        let (xlo, xhi) = geo.out_range(kx, w, wo);
                        let wt = k[((co * ci_n + ci) * ks + ky) * ks + kx];
                        for oy in ylo..yhi {
                            let iy = oy * geo.stride + ky - geo.pad;
                            let row = &xc[iy * w..(iy + 1) * w];
                            let orow = &mut oc[oy * wo..(oy + 1) * wo];
                            for ox in xlo..xhi {
                                orow[ox] += wt * row[ox * geo.stride + kx - geo.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_grad_input(geo: &ConvGeometry, g: &[f64], k: &[f64], exec: Exec) -> Vec<f64> {
    let (ci_n, co_n, ks) = (geo.x.c(), geo.k.n(), geo.k.h());
    let (h, w, ho, wo) = (geo.x.h(), geo.x.w(), geo.out.h(), geo.out.w());
    let item_out = geo.out.item_len();
    let mut gx = vec![0.0; geo.x.numel()];
    exec::for_each_chunk(exec, &mut gx, geo.x.item_len(), |n, gxn| {
        let gn = &g[n * item_out..(n + 1) * item_out];
        for co in 0..co_n {
            let gc = &gn[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..ci_n {
                let gxc = &mut gxn[ci * h * w..(ci + 1) * h * w];
                for ky in 0..ks {
                    let (ylo, yhi) = geo.out_range(ky, h, ho);
                    for kx in 0..ks {
                        let (xlo, xhi) = geo.out_range(kx, w, wo);
                        let wt = k[((co * ci_n + ci) * ks + ky) * ks + kx];
                        for oy in ylo..yhi {
                            let iy = oy * geo.stride + ky - geo.pad;
                            for ox in xlo..xhi {
                                gxc[iy * w + ox * geo.stride + kx - geo.pad] += wt * gc[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv_grad_kernel(geo: &ConvGeometry, g: &[f64], x: &[f64], exec: Exec) -> Vec<f64> {
    let (ci_n, co_n, ks) = (geo.x.c(), geo.k.n(), geo.k.h());
    let (h, w, ho, wo) = (geo.x.h(), geo.x.w(), geo.out.h(), geo.out.w());
    let (item_in, item_out) = (geo.x.item_len(), geo.out.item_len());
    let partials = exec::map_indexed(exec, geo.x.n(), |n| {
        let xn = &x[n * item_in..(n + 1) * item_in];
        let gn = &g[n * item_out..(n + 1) * item_out];
        let mut gk = vec![0.0; geo.k.numel()];
        for co in 0..co_n {
            let gc = &gn[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..ci_n {
                let xc = &xn[ci * h * w..(ci + 1) * h * w];
                for ky in 0..ks {
                    let (ylo, yhi) = geo.out_range(ky, h, ho);
                    for kx in 0..ks {
                        let (xlo, xhi) = geo.out_range(kx, w, wo);
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * geo.stride + ky - geo.pad;
                            for ox in xlo..xhi {
                                acc += gc[oy * wo + ox] * xc[iy * w + ox * geo.stride + kx - geo.pad];
                            }
                        }
                        gk[((co * ci_n + ci) * ks + ky) * ks + kx] = acc;
                    }
                }
            }
        }
        gk
    });
    sum_in_order(partials, geo.k.numel())
}

fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

/// Gradient contributions of one recorded op, for inputs that require them.
pub(crate) fn vjp(tape: &Tape, _out: Var, op: &Op, out: &Tensor, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
    let wants = |v: Var| tape.requires_grad(v);
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::MulBroadcast { a, b } => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
            let map = (sa != sb).then(|| broadcast_map(sa, sb));
            let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
            if wants(*a) {
                res.push((*a, g.iter().enumerate().map(|(i, gi)| gi * bv[bidx(i)]).collect()));
            }
            if wants(*b) {
                let mut gb = vec![0.0; sb.numel()];
                for (i, gi) in g.iter().enumerate() {
                    gb[bidx(i)] += gi * av[i];
                }
                res.push((*b, gb));
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if wants(v) {
                    res.push((v, g.to_vec()));
                }
            }
        }
        Op::Relu { x } => {
            let xv = tape.value(*x).data();
            res.push((*x, g.iter().zip(xv).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect()));
        }
        Op::Sigmoid { x } => {
            let y = out.data();
            res.push((*x, g.iter().zip(y).map(|(gi, &s)| gi * s * (1.0 - s)).collect()));
        }
        Op::OneMinus { x } => res.push((*x, g.iter().map(|v| -v).collect())),
        Op::Scale { x, factor } => res.push((*x, g.iter().map(|v| v * factor).collect())),
        Op::GradientReversal { x, scale } => res.push((*x, g.iter().map(|v| -scale * v).collect())),
        Op::Sum { x } => res.push((*x, vec![g[0]; tape.shape(*x).numel()])),
        Op::PoolGlobal { x, mode, argmax } => {
            let s = tape.shape(*x);
            let plane = s.plane();
            let mut gx = vec![0.0; s.numel()];
            match mode {
                PoolMode::Avg => {
                    for (i, gi) in g.iter().enumerate() {
                        gx[i * plane..(i + 1) * plane].fill(gi / plane as f64);
                    }
                }
                PoolMode::Max => {
                    for (gi, &j) in g.iter().zip(argmax) {
                        gx[j] += gi;
                    }
                }
            }
            res.push((*x, gx));
        }
        Op::PoolChannel { x, mode, argmax } => {
            let s = tape.shape(*x);
            let plane = s.plane();
            let mut gx = vec![0.0; s.numel()];
            match mode {
                PoolMode::Avg => {
                    let inv = 1.0 / s.c() as f64;
                    for n in 0..s.n() {
                        for c in 0..s.c() {
                            for p in 0..plane {
                                gx[(n * s.c() + c) * plane + p] = g[n * plane + p] * inv;
                            }
                        }
                    }
                }
                PoolMode::Max => {
                    for (gi, &j) in g.iter().zip(argmax) {
                        gx[j] += gi;
                    }
                }
            }
            res.push((*x, gx));
        }
        Op::Dense { x, w, b } => {
            let (sx, sw) = (tape.shape(*x), tape.shape(*w));
            let (cin, cout) = (sx.c(), sw.n());
            let (xv, wv) = (tape.value(*x).data(), tape.value(*w).data());
            if wants(*x) {
                let mut gx = vec![0.0; sx.numel()];
                for (n, grow) in g.chunks(cout).enumerate() {
                    for (o, go) in grow.iter().enumerate() {
                        for i in 0..cin {
                            gx[n * cin + i] += go * wv[o * cin + i];
                        }
                    }
                }
                res.push((*x, gx));
            }
            if wants(*w) {
                let mut gw = vec![0.0; sw.numel()];
                for (grow, xrow) in g.chunks(cout).zip(xv.chunks(cin)) {
                    for (o, go) in grow.iter().enumerate() {
                        for i in 0..cin {
                            gw[o * cin + i] += go * xrow[i];
                        }
                    }
                }
                res.push((*w, gw));
            }
            if wants(*b) {
                let mut gb = vec![0.0; cout];
                for grow in g.chunks(cout) {
                    gb.iter_mut().zip(grow).for_each(|(a, v)| *a += v);
                }
                res.push((*b, gb));
            }
        }
        Op::Conv2d { x, k, b, stride } => {
            let geo = ConvGeometry::new(tape.shape(*x), tape.shape(*k), *stride);
            if wants(*x) {
                res.push((*x, conv_grad_input(&geo, g, tape.value(*k).data(), tape.exec)));
            }
            if wants(*k) {
                res.push((*k, conv_grad_kernel(&geo, g, tape.value(*x).data(), tape.exec)));
            }
            if wants(*b) {
                let plane = geo.out.plane();
                let mut gb = vec![0.0; geo.k.n()];
                for (i, chunk) in g.chunks(plane).enumerate() {
                    gb[i % geo.k.n()] += chunk.iter().sum::<f64>();
                }
                res.push((*b, gb));
            }
        }
        Op::ConcatChannel { a, b } => {
            let (sa, sb) = (tape.shape(*a), tape.shape(*b));
            let (la, lb) = (sa.item_len(), sb.item_len());
            let mut ga = Vec::with_capacity(sa.numel());
            let mut gb = Vec::with_capacity(sb.numel());
            for chunk in g.chunks(la + lb) {
                ga.extend_from_slice(&chunk[..la]);
                gb.extend_from_slice(&chunk[la..]);
            }
            if wants(*a) {
                res.push((*a, ga));
            }
            if wants(*b) {
                res.push((*b, gb));
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            live,
        } => {
            let s = tape.shape(*logits);
            let (n, k) = (s.n(), s.c());
            let coef = g[0] / n as f64;
            let mut gl = vec![0.0; s.numel()];
            for r in 0..n {
                if !live[r] {
                    continue;
                }
                for j in 0..k {
                    let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                    gl[r * k + j] = coef * (probs[r * k + j] - onehot);
                }
            }
            res.push((*logits, gl));
        }
        Op::Triplet {
            emb,
            selections,
            dist,
            clamped,
        } => {
            let s = tape.shape(*emb);
            let (n, d) = (s.n(), s.c());
            let e = tape.value(*emb).data();
            let coef = g[0] / selections.len() as f64;
            let mut ge = vec![0.0; s.numel()];
            // d|e_i - e_j| / d e_i = (e_i - e_j) / |e_i - e_j|
            let mut push = |i: usize, j: usize, sign: f64| {
                if clamped[i * n + j] {
                    return;
                }
                let scale = sign * coef / dist[i * n + j];
                for k in 0..d {
                    let diff = e[i * d + k] - e[j * d + k];
                    ge[i * d + k] += scale * diff;
                    ge[j * d + k] -= scale * diff;
                }
            };
            for t in selections.iter().filter(|t| t.active) {
                push(t.anchor, t.positive, 1.0);
                push(t.anchor, t.negative, -1.0);
            }
            res.push((*emb, ge));
        }
    }
    res
}
