use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One bilinear tap: flat index into a feature plane and its weight.
type Tap<T> = (usize, T);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: T,
    },
    BceWithLogits {
        x: Var,
        targets: Vec<T>,
    },
    RoiAlign {
        features: Var,
        plane: usize,
        /// Per (roi, bin) the four bilinear taps.
        taps: Vec<[Tap<T>; 4]>,
        bins: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order of the graph.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [d] => (1, *d),
        _ => {
            let d = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), d)
        }
    }
}

/// Output positions `ox` for which `ox*stride + k - pad` lands in `[0, size)`.
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_num = size as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out);
    (lo.min(hi), hi)
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

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// required one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        value.requires_grad = parents.iter().any(|&p| self.req(p));
        #[cfg(debug_assertions)]
        {
            if parents.iter().all(|&p| self.value(p).all_finite()) {
                debug_assert!(value.all_finite(), "non-finite output from finite inputs");
            }
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// `backward` reports a gradient for it.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?.with_requires_grad(true)))
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb || self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Sum of several scalars (or equally shaped tensors).
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Contract("add_all on empty list".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape, self.data(a).to_vec())
            .map_err(|_| Error::dim("reshape", format!("cannot view {:?} as requested", self.shape(a))))?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Flat concatenation into a vector.
    pub fn concat(&mut self, vars: &[Var]) -> Var {
        let data: Vec<T> = vars.iter().flat_map(|&v| self.data(v).iter().copied()).collect();
        let out = Tensor::vector(data);
        self.push(out, Op::Concat(vars.to_vec()), vars)
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather", format!("index {bad} out of range {n}")));
        }
        let src = self.data(x);
        let data = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            Tensor::vector(data),
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(out, Op::Relu(x), &[x])
    }

    /// Non-overlapping `k`×`k` max pooling over a `[C,H,W]` tensor.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::dim("maxpool2d", format!("input must be [C,H,W], got {shape:?}")));
        };
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim(
                "maxpool2d",
                format!("window {k} does not divide {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.data(x);
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    // Row-major scan with strict `>` keeps the first maximum.
                    let mut best = ch * h * w + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = ch * h * w + (oy * k + dy) * w + ox * k + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    data.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![c, oh, ow], data)?;
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// 2-D convolution of a `[C_in,H,W]` input with `[C_out,C_in,kH,kW]`
    /// weights and `[C_out]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [cin, h, wd] = xs[..] else {
            return Err(Error::dim("conv2d", format!("input must be [C,H,W], got {xs:?}")));
        };
        let [cout, wcin, kh, kw] = ws[..] else {
            return Err(Error::dim("conv2d", format!("weight must be [O,C,kH,kW], got {ws:?}")));
        };
        if wcin != cin {
            return Err(Error::dim(
                "conv2d",
                format!("input channels {cin} != weight channels {wcin}"),
            ));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?} != [{cout}]", self.shape(b)),
            ));
        }
        if kh == 0 || kw == 0 || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} invalid for input {h}x{wd}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let (xd, wdta, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); cout * oh * ow];
        for o in 0..cout {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bd[o]);
            for c in 0..cin {
                let xin = &xd[c * h * wd..(c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let wv = wdta[((o * cin + c) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, wd, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let row = &xin[iy * wd..(iy + 1) * wd];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let n = ox_hi - ox_lo;
                                for (o_v, &i_v) in orow[ox_lo..ox_hi].iter_mut().zip(&row[off..off + n]) {
                                    *o_v = *o_v + wv * i_v;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    orow[ox] = orow[ox] + wv * row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &[x, w, b],
        ))
    }

    fn matmul_nt_raw(a: &[T], n: usize, d: usize, w: &[T], m: usize, bias: Option<&[T]>) -> Vec<T> {
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let row = &a[i * d..(i + 1) * d];
            for j in 0..m {
                let wr = &w[j * d..(j + 1) * d];
                let mut acc = bias.map_or(T::zero(), |b| b[j]);
                for (&p, &q) in row.iter().zip(wr) {
                    acc = acc + p * q;
                }
                out.push(acc);
            }
        }
        out
    }

    fn linear_impl(&mut self, x: Var, w: Var, b: Option<Var>, op: &'static str) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [m, d] = ws[..] else {
            return Err(Error::dim(op, format!("weight must be [M,D], got {ws:?}")));
        };
        let (n, xd) = row_split(&xs);
        if xs.is_empty() || xs.len() > 2 || xd != d {
            return Err(Error::dim(
                op,
                format!("input {xs:?} incompatible with weight [{m},{d}]"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::dim(
                    op,
                    format!("bias shape {:?} != [{m}]", self.shape(b)),
                ));
            }
        }
        let data = Self::matmul_nt_raw(
            self.data(x),
            n,
            d,
            self.data(w),
            m,
            b.map(|b| self.data(b)),
        );
        let shape = if xs.len() == 1 { vec![m] } else { vec![n, m] };
        let out = Tensor::new(shape, data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &parents))
    }

    /// `out[m] = Σ_d weight[m,d]·x[d] + bias[m]`, applied row-wise when `x`
    /// is `[N,D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.linear_impl(x, w, Some(b), "linear")
    }

    /// `a·bᵀ` for `a: [N,D]` (or `[D]`) and `b: [M,D]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear_impl(a, b, None, "matmul_nt")
    }

    /// Divides each row (last axis) by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Contract("l2_normalize needs eps > 0".into()));
        }
        let (rows, d) = row_split(self.shape(x));
        let src = self.data(x);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            data.extend(row.iter().map(|&v| v / denom));
            norms.push(norm);
        }
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::L2Normalize { x, eps, norms }, &[x]))
    }

    /// Mean over rows of `−log softmax(row)[label]`. A `[C]` input is a
    /// single row.
    pub fn softmax_ce_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, c) = row_split(self.shape(logits));
        if self.shape(logits).is_empty() || rows != labels.len() {
            return Err(Error::dim(
                "softmax_ce_loss",
                format!("{} labels for logits {:?}", labels.len(), self.shape(logits)),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let src = self.data(logits);
        let mut probs = Vec::with_capacity(src.len());
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total = total + (lse - row[label]);
            probs.extend(row.iter().map(|&v| (v - mx).exp() / z));
        }
        let n = T::from_usize(rows).unwrap();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean smooth-L1 (Huber with transition `beta`) between equal shapes.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: Var, beta: T) -> Result<Var> {
        if beta <= T::zero() {
            return Err(Error::Contract("smooth_l1_loss needs beta > 0".into()));
        }
        self.same_len("smooth_l1_loss", pred, target)?;
        let half = T::from_f64_lossy(0.5);
        let n = self.value(pred).len();
        let total: T = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| {
                let d = (p - t).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum();
        let mean = if n == 0 { T::zero() } else { total / T::from_usize(n).unwrap() };
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SmoothL1 { pred, target, beta },
            &[pred, target],
        ))
    }

    /// Mean binary cross-entropy of sigmoid(`x`) against constant targets.
    pub fn bce_with_logits(&mut self, x: Var, targets: &[T]) -> Result<Var> {
        let n = self.value(x).len();
        if targets.len() != n {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} targets for {} logits", targets.len(), n),
            ));
        }
        let total: T = self
            .data(x)
            .iter()
            .zip(targets)
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        let mean = if n == 0 { T::zero() } else { total / T::from_usize(n).unwrap() };
        Ok(self.push(
            Tensor::scalar(mean),
            Op::BceWithLogits {
                x,
                targets: targets.to_vec(),
            },
            &[x],
        ))
    }

    /// Bilinear ROI-align over a `[C,H,W]` feature map. Each ROI (image
    /// coordinates `[x1,y1,x2,y2]`) is split into `out`×`out` bins and
    /// sampled once at each bin centre. Returns `[R,C,out,out]`.
    pub fn roi_align(&mut self, features: Var, rois: &[[f64; 4]], out: usize, stride: f64) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let [c, h, w] = fs[..] else {
            return Err(Error::dim("roi_align", format!("features must be [C,H,W], got {fs:?}")));
        };
        if out == 0 || stride <= 0.0 {
            return Err(Error::Contract("roi_align needs out ≥ 1 and stride > 0".into()));
        }
        let plane = h * w;
        let mut taps = Vec::with_capacity(rois.len() * out * out);
        for (ri, roi) in rois.iter().enumerate() {
            let [x1, y1, x2, y2] = roi.map(|v| v / stride);
            if !(x2 > x1 && y2 > y1) {
                return Err(Error::Contract(format!("roi {ri} is not a valid box: {roi:?}")));
            }
            if x2 <= 0.0 || y2 <= 0.0 || x1 >= w as f64 || y1 >= h as f64 {
                return Err(Error::Data(format!(
                    "roi {ri} {roi:?} lies entirely outside the {h}x{w} feature map"
                )));
            }
            let (bw, bh) = ((x2 - x1) / out as f64, (y2 - y1) / out as f64);
            for by in 0..out {
                // Cell centres sit at integer + 0.5 in feature coordinates.
                let y = y1 + (by as f64 + 0.5) * bh - 0.5;
                for bx in 0..out {
                    let x = x1 + (bx as f64 + 0.5) * bw - 0.5;
                    taps.push(bilinear_taps::<T>(y, x, h, w));
                }
            }
        }
        let src = self.data(features);
        let bins = out * out;
        let mut data = vec![T::zero(); rois.len() * c * bins];
        for r in 0..rois.len() {
            for ch in 0..c {
                let fplane = &src[ch * plane..(ch + 1) * plane];
                for b in 0..bins {
                    let t = &taps[r * bins + b];
                    data[(r * c + ch) * bins + b] = t.iter().map(|&(i, wt)| wt * fplane[i]).sum();
                }
            }
        }
        let out_t = Tensor::new(vec![rois.len(), c, out, out], data)?;
        Ok(self.push(
            out_t,
            Op::RoiAlign {
                features,
                plane,
                taps,
                bins,
            },
            &[features],
        ))
    }

    /// Fills `grad` on every node that requires one with `∂loss/∂node`.
    ///
    /// Gradients from a previous call are replaced, not accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                let n = node.value.len();
                *node.value.grad_mut() = Some(g.unwrap_or_else(|| vec![T::zero(); n]));
            } else {
                *node.value.grad_mut() = None;
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.req(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a).to_vec(), self.data(*b).to_vec());
                if let Some(s) = self.slot(grads, *a) {
                    for k in 0..s.len() {
                        s[k] = s[k] + g[k] * bd[k];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for k in 0..s.len() {
                        s[k] = s[k] + g[k] * ad[k];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g * *f);
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s = *s + g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, &g)| *s = *s + g);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[off..off + n]).for_each(|(s, &g)| *s = *s + g);
                    }
                    off += n;
                }
            }
            Op::Gather { x, idx } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&j, &gv) in idx.iter().zip(g) {
                        s[j] = s[j] + gv;
                    }
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for k in 0..s.len() {
                        if xd[k] > T::zero() {
                            s[k] = s[k] + g[k];
                        }
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                if let Some(s) = self.slot(grads, *x) {
                    for (&j, &gv) in argmax.iter().zip(g) {
                        s[j] = s[j] + gv;
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::Linear { x, w, b } => {
                let (n, d) = row_split(self.shape(*x));
                let m = self.shape(*w)[0];
                if let Some(bv) = b {
                    if let Some(s) = self.slot(grads, *bv) {
                        for r in 0..n {
                            for j in 0..m {
                                s[j] = s[j] + g[r * m + j];
                            }
                        }
                    }
                }
                let xd = self.data(*x).to_vec();
                let wd = self.data(*w).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..n {
                        for j in 0..m {
                            let gv = g[r * m + j];
                            if gv == T::zero() {
                                continue;
                            }
                            let wr = &wd[j * d..(j + 1) * d];
                            for (sv, &wv) in s[r * d..(r + 1) * d].iter_mut().zip(wr) {
                                *sv = *sv + gv * wv;
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    for r in 0..n {
                        let xr = &xd[r * d..(r + 1) * d];
                        for j in 0..m {
                            let gv = g[r * m + j];
                            if gv == T::zero() {
                                continue;
                            }
                            for (sv, &xv) in s[j * d..(j + 1) * d].iter_mut().zip(xr) {
                                *sv = *sv + gv * xv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                let (_, d) = row_split(self.shape(*x));
                let y = self.nodes[i].value.data().to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let rg = &g[r * d..(r + 1) * d];
                        let ry = &y[r * d..(r + 1) * d];
                        let rs = &mut s[r * d..(r + 1) * d];
                        if norm >= *eps {
                            let dot: T = rg.iter().zip(ry).map(|(&a, &b)| a * b).sum();
                            for k in 0..d {
                                rs[k] = rs[k] + (rg[k] - ry[k] * dot) / norm;
                            }
                        } else {
                            for k in 0..d {
                                rs[k] = rs[k] + rg[k] / *eps;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let (rows, c) = row_split(self.shape(*logits));
                let scale = g[0] / T::from_usize(rows).unwrap();
                if let Some(s) = self.slot(grads, *logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            s[r * c + j] = s[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let n = self.value(*pred).len();
                if n == 0 {
                    return;
                }
                let scale = g[0] / T::from_usize(n).unwrap();
                let dg: Vec<T> = self
                    .data(*pred)
                    .iter()
                    .zip(self.data(*target))
                    .map(|(&p, &t)| {
                        let d = p - t;
                        let v = if d.abs() < *beta { d / *beta } else { d.signum() };
                        v * scale
                    })
                    .collect();
                if let Some(s) = self.slot(grads, *pred) {
                    s.iter_mut().zip(&dg).for_each(|(s, &d)| *s = *s + d);
                }
                if let Some(s) = self.slot(grads, *target) {
                    s.iter_mut().zip(&dg).for_each(|(s, &d)| *s = *s - d);
                }
            }
            Op::BceWithLogits { x, targets } => {
                let n = targets.len();
                if n == 0 {
                    return;
                }
                let scale = g[0] / T::from_usize(n).unwrap();
                let xd = self.data(*x).to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    for k in 0..n {
                        let sig = T::one() / (T::one() + (-xd[k]).exp());
                        s[k] = s[k] + scale * (sig - targets[k]);
                    }
                }
            }
            Op::RoiAlign {
                features,
                plane,
                taps,
                bins,
            } => {
                let c = self.shape(*features)[0];
                if let Some(s) = self.slot(grads, *features) {
                    let rois = taps.len() / bins;
                    for r in 0..rois {
                        for ch in 0..c {
                            let sp = &mut s[ch * plane..(ch + 1) * plane];
                            for b in 0..*bins {
                                let gv = g[(r * c + ch) * bins + b];
                                for &(idx, wt) in &taps[r * bins + b] {
                                    sp[idx] = sp[idx] + gv * wt;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (cin, h, wd) = {
            let s = self.shape(x);
            (s[0], s[1], s[2])
        };
        let (cout, kh, kw) = {
            let s = self.shape(w);
            (s[0], s[2], s[3])
        };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        if let Some(s) = self.slot(grads, b) {
            for o in 0..cout {
                s[o] = s[o] + g[o * oh * ow..(o + 1) * oh * ow].iter().copied().sum();
            }
        }
        let xd = self.data(x);
        let wdta = self.data(w);
        let need_w = self.req(w);
        let need_x = self.req(x);
        let mut gw = if need_w { vec![T::zero(); wdta.len()] } else { Vec::new() };
        let mut gx = if need_x { vec![T::zero(); xd.len()] } else { Vec::new() };
        for o in 0..cout {
            let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..cin {
                let xin = &xd[c * h * wd..(c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let widx = ((o * cin + c) * kh + ky) * kw + kx;
                        let wv = wdta[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, wd, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let n = ox_hi - ox_lo;
                                let gs = &grow[ox_lo..ox_hi];
                                if need_w {
                                    let xs = &xin[iy * wd + off..iy * wd + off + n];
                                    for (&gv, &xv) in gs.iter().zip(xs) {
                                        acc = acc + gv * xv;
                                    }
                                }
                                if need_x {
                                    let base = c * h * wd + iy * wd + off;
                                    for (xs, &gv) in gx[base..base + n].iter_mut().zip(gs) {
                                        *xs = *xs + wv * gv;
                                    }
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    let gv = grow[ox];
                                    if need_w {
                                        acc = acc + gv * xin[iy * wd + ix];
                                    }
                                    if need_x {
                                        let k = c * h * wd + iy * wd + ix;
                                        gx[k] = gx[k] + wv * gv;
                                    }
                                }
                            }
                        }
                        if need_w {
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
        }
        if let Some(s) = self.slot(grads, w) {
            s.iter_mut().zip(&gw).for_each(|(s, &v)| *s = *s + v);
        }
        if let Some(s) = self.slot(grads, x) {
            s.iter_mut().zip(&gx).for_each(|(s, &v)| *s = *s + v);
        }
    }
}

/// Bilinear taps for sampling point `(y, x)` in cell-index coordinates,
/// following the usual ROI-align border rule: points more than one cell
/// outside the map contribute nothing, points just outside are clamped.
fn bilinear_taps<T: Scalar>(y: f64, x: f64, h: usize, w: usize) -> [Tap<T>; 4] {
    let zero = [(0usize, T::zero()); 4];
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return zero;
    }
    let axis = |v: f64, size: usize| -> (usize, usize, f64) {
        let v = v.max(0.0);
        let lo = v.floor() as usize;
        if lo >= size - 1 {
            (size - 1, size - 1, 0.0)
        } else {
            (lo, lo + 1, v - lo as f64)
        }
    };
    let (y0, y1, ly) = axis(y, h);
    let (x0, x1, lx) = axis(x, w);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let t = |v: f64| T::from_f64_lossy(v);
    [
        (y0 * w + x0, t(hy * hx)),
        (y0 * w + x1, t(hy * lx)),
        (y1 * w + x0, t(ly * hx)),
        (y1 * w + x1, t(ly * lx)),
    ]
}
