//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward evaluation (a single sample) against a
//! borrowed [`ParamSet`]. [`Graph::backward`] replays the tape in reverse and
//! returns parameter gradients plus gradients for inputs created with
//! [`Graph::input_with_grad`]. Frozen parameters get no gradient buffers and
//! their layers only propagate to inputs that need it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Norm product below which the cosine correlation is defined as zero.
const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// How two feature vectors at the same location are correlated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// Cosine similarity; zero vectors correlate to 0.
    #[default]
    Cosine,
    /// Raw inner product.
    Dot,
}

enum Op {
    Input,
    Conv {
        x: usize,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    Selu(usize),
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    Upsample(usize),
    Concat(Vec<usize>),
    Correlation {
        a: usize,
        b: usize,
        mode: CorrelationMode,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    inputs: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable parameter (None for frozen or unused ones).
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].as_deref()
    }

    pub fn input(&self, node: NodeId) -> Option<&Tensor> {
        self.inputs.get(node.0).and_then(|g| g.as_ref())
    }

    pub fn into_param_grads(self) -> Vec<Option<Vec<f64>>> {
        self.params
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    pub fn input_with_grad(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, true)
    }

    /// 2-D convolution with square kernel `k` taken from the weight shape
    /// `[cout, cin, k, k]`, symmetric zero padding and a common stride.
    pub fn conv(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, stride: usize, pad: usize) -> NodeId {
        let wp = self.params.get(w);
        let input = &self.nodes[x.0].value;
        let out = conv_forward(
            input,
            &wp.data,
            &wp.shape,
            b.map(|b| &self.params.get(b).data[..]),
            stride,
            pad,
        );
        let needs = self.nodes[x.0].needs_grad || wp.trainable || b.is_some_and(|b| self.params.get(b).trainable);
        self.push(
            out,
            Op::Conv {
                x: x.0,
                w,
                b,
                stride,
                pad,
            },
            needs,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        v.data_mut().iter_mut().for_each(|a| *a = a.max(0.0));
        let needs = self.nodes[x.0].needs_grad;
        self.push(v, Op::Relu(x.0), needs)
    }

    pub fn selu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        v.data_mut().iter_mut().for_each(|a| *a = selu(*a));
        let needs = self.nodes[x.0].needs_grad;
        self.push(v, Op::Selu(x.0), needs)
    }

    /// 2×2 max pooling with stride 2 (floor mode).
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let src = &self.nodes[x.0].value;
        let (c, h, w) = src.dims();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(c, ho, wo);
        let mut argmax = vec![0u32; c * ho * wo];
        for ch in 0..c {
            let plane = src.plane(ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[i] > plane[best] {
                            best = i;
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out.data_mut()[o] = plane[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::MaxPool2 { x: x.0, argmax }, needs)
    }

    /// Nearest-neighbour resampling to an explicit spatial size.
    pub fn upsample_to(&mut self, x: NodeId, height: usize, width: usize) -> NodeId {
        let src = &self.nodes[x.0].value;
        let (c, h, w) = src.dims();
        let mut out = Tensor::zeros(c, height, width);
        let ys: Vec<usize> = (0..height).map(|y| y * h / height).collect();
        let xs: Vec<usize> = (0..width).map(|x| x * w / width).collect();
        for ch in 0..c {
            let plane = src.plane(ch);
            let dst = out.plane_mut(ch);
            for (y, &sy) in ys.iter().enumerate() {
                for (xx, &sx) in xs.iter().enumerate() {
                    dst[y * width + xx] = plane[sy * w + sx];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Upsample(x.0), needs)
    }

    /// Channel concatenation; all parts must share the spatial size.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let first = &self.nodes[parts[0].0].value;
        let (h, w) = (first.height(), first.width());
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.channels()).sum();
        let mut data = Vec::with_capacity(total * h * w);
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert!(v.height() == h && v.width() == w, "concat spatial mismatch");
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(total, h, w, data).expect("sized");
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect()), needs)
    }

    /// Per-location correlation of two equally shaped feature maps (1 channel out).
    pub fn correlation(&mut self, a: NodeId, b: NodeId, mode: CorrelationMode) -> NodeId {
        let out = correlation_forward(&self.nodes[a.0].value, &self.nodes[b.0].value, mode);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(out, Op::Correlation { a: a.0, b: b.0, mode }, needs)
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        let src = &self.nodes[x.0].value;
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..src.data().len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mut out = src.clone();
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Dropout { x: x.0, mask }, needs)
    }

    /// Back-propagate `seed` (dL/d`out`) through the tape.
    pub fn backward(&self, out: NodeId, seed: Tensor) -> Gradients {
        assert_eq!(seed.dims(), self.nodes[out.0].value.dims(), "seed shape");
        let n = out.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut pgrads: Vec<Option<Vec<f64>>> = (0..self.params.len()).map(|_| None).collect();
        let mut inputs: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => inputs[i] = Some(g),
                Op::Conv { x, w, b, stride, pad } => {
                    let wp = self.params.get(*w);
                    let xin = &self.nodes[*x].value;
                    if let Some(b) = b {
                        if self.params.get(*b).trainable {
                            let db = pgrads[b.0].get_or_insert_with(|| vec![0.0; g.channels()]);
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += g.plane(co).iter().sum::<f64>();
                            }
                        }
                    }
                    if wp.trainable {
                        let dw = pgrads[w.0].get_or_insert_with(|| vec![0.0; wp.data.len()]);
                        conv_backward_weight(xin, &g, &wp.shape, *stride, *pad, dw);
                    }
                    if self.nodes[*x].needs_grad {
                        let dx = conv_backward_input(xin.dims(), &g, &wp.data, &wp.shape, *stride, *pad);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    let xv = &self.nodes[*x].value;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Selu(x) => {
                    let mut dx = g;
                    let xv = &self.nodes[*x].value;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= selu_grad(*v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let (c, h, w) = self.nodes[*x].value.dims();
                    let mut dx = Tensor::zeros(c, h, w);
                    let per = g.plane_len();
                    for ch in 0..c {
                        let gp = g.plane(ch);
                        let am = &argmax[ch * per..(ch + 1) * per];
                        let dp = dx.plane_mut(ch);
                        for (gv, &idx) in gp.iter().zip(am) {
                            dp[idx as usize] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample(x) => {
                    let (c, h, w) = self.nodes[*x].value.dims();
                    let (ho, wo) = (g.height(), g.width());
                    let mut dx = Tensor::zeros(c, h, w);
                    for ch in 0..c {
                        let gp = g.plane(ch);
                        let dp = dx.plane_mut(ch);
                        for y in 0..ho {
                            let sy = y * h / ho;
                            for xx in 0..wo {
                                dp[sy * w + xx * w / wo] += gp[y * wo + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let plane = g.plane_len();
                    let mut offset = 0;
                    for &p in parts {
                        let (c, h, w) = self.nodes[p].value.dims();
                        if self.nodes[p].needs_grad {
                            let slice = g.data()[offset * plane..(offset + c) * plane].to_vec();
                            accumulate(&mut grads, p, Tensor::from_vec(c, h, w, slice).expect("sized"));
                        }
                        offset += c;
                    }
                }
                Op::Correlation { a, b, mode } => {
                    let (da, db) = correlation_backward(&self.nodes[*a].value, &self.nodes[*b].value, &g, *mode);
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Dropout { x, mask } => {
                    let mut dx = g;
                    for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Gradients { params: pgrads, inputs }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

#[inline]
fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Output index range `[lo, hi)` along one axis for which the input
/// coordinate `o*stride + tap - pad` lies inside `[0, n)`.
#[inline]
fn valid_range(n: usize, n_out: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    // need o*stride + tap - pad <= n - 1
    let hi = if n + pad < tap + 1 {
        0
    } else {
        ((n + pad - tap - 1) / stride + 1).min(n_out)
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv_forward(
    x: &Tensor,
    w: &[f64],
    wshape: &[usize],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cout, cin, k) = (wshape[0], wshape[1], wshape[2]);
    assert_eq!(x.channels(), cin, "conv input channels");
    let (h, wd) = (x.height(), x.width());
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let mut out = Tensor::zeros(cout, ho, wo);
    for co in 0..cout {
        let dst = out.plane_mut(co);
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..cin {
            let src = x.plane(ci);
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, ho, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(wd, wo, kx, stride, pad);
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let drow = &mut dst[oy * wo..oy * wo + wo];
                        let srow = &src[iy * wd..iy * wd + wd];
                        if stride == 1 {
                            let off = xlo + kx - pad;
                            for (d, s) in drow[xlo..xhi].iter_mut().zip(&srow[off..off + (xhi - xlo)]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] += wv * srow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_weight(x: &Tensor, g: &Tensor, wshape: &[usize], stride: usize, pad: usize, dw: &mut [f64]) {
    let (cout, cin, k) = (wshape[0], wshape[1], wshape[2]);
    let (h, wd) = (x.height(), x.width());
    let (ho, wo) = (g.height(), g.width());
    for co in 0..cout {
        let gp = g.plane(co);
        for ci in 0..cin {
            let src = x.plane(ci);
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, ho, ky, stride, pad);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(wd, wo, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gp[oy * wo..oy * wo + wo];
                        let srow = &src[iy * wd..iy * wd + wd];
                        if stride == 1 {
                            let off = xlo + kx - pad;
                            acc += grow[xlo..xhi]
                                .iter()
                                .zip(&srow[off..off + (xhi - xlo)])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        } else {
                            for ox in xlo..xhi {
                                acc += grow[ox] * srow[ox * stride + kx - pad];
                            }
                        }
                    }
                    dw[((co * cin + ci) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}

fn conv_backward_input(
    xdims: (usize, usize, usize),
    g: &Tensor,
    w: &[f64],
    wshape: &[usize],
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cout, cin, k) = (wshape[0], wshape[1], wshape[2]);
    let (_, h, wd) = xdims;
    let (ho, wo) = (g.height(), g.width());
    let mut dx = Tensor::zeros(cin, h, wd);
    for ci in 0..cin {
        let dst = dx.plane_mut(ci);
        for co in 0..cout {
            let gp = g.plane(co);
            for ky in 0..k {
                let (ylo, yhi) = valid_range(h, ho, ky, stride, pad);
                for kx in 0..k {
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_range(wd, wo, kx, stride, pad);
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - pad;
                        let grow = &gp[oy * wo..oy * wo + wo];
                        let drow = &mut dst[iy * wd..iy * wd + wd];
                        if stride == 1 {
                            let off = xlo + kx - pad;
                            for (d, gv) in drow[off..off + (xhi - xlo)].iter_mut().zip(&grow[xlo..xhi]) {
                                *d += wv * gv;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn correlation_forward(a: &Tensor, b: &Tensor, mode: CorrelationMode) -> Tensor {
    assert_eq!(a.dims(), b.dims(), "correlation shape");
    let (d, h, w) = a.dims();
    let n = h * w;
    let mut dot = vec![0.0; n];
    let mut na = vec![0.0; n];
    let mut nb = vec![0.0; n];
    for c in 0..d {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in 0..n {
            dot[i] += pa[i] * pb[i];
            na[i] += pa[i] * pa[i];
            nb[i] += pb[i] * pb[i];
        }
    }
    let data = match mode {
        CorrelationMode::Dot => dot,
        CorrelationMode::Cosine => (0..n)
            .map(|i| {
                let den = (na[i] * nb[i]).sqrt();
                if den > COSINE_EPS {
                    dot[i] / den
                } else {
                    0.0
                }
            })
            .collect(),
    };
    Tensor::from_vec(1, h, w, data).expect("sized")
}

fn correlation_backward(a: &Tensor, b: &Tensor, g: &Tensor, mode: CorrelationMode) -> (Tensor, Tensor) {
    let (d, h, w) = a.dims();
    let n = h * w;
    let mut da = Tensor::zeros(d, h, w);
    let mut db = Tensor::zeros(d, h, w);
    let gp = g.plane(0);
    match mode {
        CorrelationMode::Dot => {
            for c in 0..d {
                for i in 0..n {
                    da.plane_mut(c)[i] = gp[i] * b.plane(c)[i];
                    db.plane_mut(c)[i] = gp[i] * a.plane(c)[i];
                }
            }
        }
        CorrelationMode::Cosine => {
            let mut dot = vec![0.0; n];
            let mut na2 = vec![0.0; n];
            let mut nb2 = vec![0.0; n];
            for c in 0..d {
                let (pa, pb) = (a.plane(c), b.plane(c));
                for i in 0..n {
                    dot[i] += pa[i] * pb[i];
                    na2[i] += pa[i] * pa[i];
                    nb2[i] += pb[i] * pb[i];
                }
            }
            for i in 0..n {
                let den = (na2[i] * nb2[i]).sqrt();
                if den <= COSINE_EPS {
                    continue;
                }
                let r = dot[i] / den;
                let inv = gp[i] / den;
                for c in 0..d {
                    let (av, bv) = (a.plane(c)[i], b.plane(c)[i]);
                    da.plane_mut(c)[i] = inv * bv - gp[i] * r * av / na2[i];
                    db.plane_mut(c)[i] = inv * av - gp[i] * r * bv / nb2[i];
                }
            }
        }
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..c * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    /// Brute-force convolution straight from the definition.
    fn conv_naive(x: &Tensor, w: &[f64], shape: &[usize], b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (cout, cin, k) = (shape[0], shape[1], shape[2]);
        let ho = (x.height() + 2 * pad - k) / stride + 1;
        let wo = (x.width() + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(cout, ho, wo);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height() as isize || ix >= x.width() as isize {
                                    continue;
                                }
                                acc += w[((co * cin + ci) * k + ky) * k + kx] * x.get(ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(co, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, stride, pad, h, w) in &[(3, 1, 1, 7, 5), (3, 2, 1, 8, 9), (1, 1, 0, 4, 4), (3, 2, 0, 9, 7)] {
            let x = random_tensor(2, h, w, &mut rng);
            let shape = [3, 2, k, k];
            let wv: Vec<f64> = (0..3 * 2 * k * k).map(|_| rng.random::<f64>() - 0.5).collect();
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv_forward(&x, &wv, &shape, Some(&b), stride, pad);
            let slow = conv_naive(&x, &wv, &shape, &b, stride, pad);
            assert_eq!(fast.dims(), slow.dims());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Scalar loss L = <r, out> with a fixed random r; compare all gradients
    /// against central differences.
    fn check_graph<F>(build: F, params: &mut ParamSet, input: Tensor)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out_dims, r) = {
            let mut g = Graph::new(params);
            let x = g.input_with_grad(input.clone());
            let o = build(&mut g, x);
            let d = g.value(o).dims();
            (d, random_tensor(d.0, d.1, d.2, &mut rng))
        };
        let loss = |params: &ParamSet, inp: &Tensor| -> f64 {
            let mut g = Graph::new(params);
            let x = g.input(inp.clone());
            let o = build(&mut g, x);
            g.value(o).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (pg, ig) = {
            let mut g = Graph::new(params);
            let x = g.input_with_grad(input.clone());
            let o = build(&mut g, x);
            assert_eq!(g.value(o).dims(), out_dims);
            let grads = g.backward(o, r.clone());
            let ig = grads.input(x).unwrap().clone();
            (grads.into_param_grads(), ig)
        };
        let eps = 1e-6;
        for i in 0..input.data().len() {
            let mut p = input.clone();
            p.data_mut()[i] += eps;
            let mut m = input.clone();
            m.data_mut()[i] -= eps;
            let fd = (loss(params, &p) - loss(params, &m)) / (2.0 * eps);
            let an = ig.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}: fd {fd} an {an}");
        }
        for pi in 0..params.len() {
            let id = ParamId(pi);
            for j in 0..params.get(id).data.len() {
                let orig = params.get(id).data[j];
                params.get_mut(id).data[j] = orig + eps;
                let lp = loss(params, &input);
                params.get_mut(id).data[j] = orig - eps;
                let lm = loss(params, &input);
                params.get_mut(id).data[j] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = pg[pi].as_ref().map_or(0.0, |g| g[j]);
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi}[{j}]: fd {fd} an {an}"
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let (w1, b1) = ps.add_conv("c1", 2, 3, 3, 2.0, &mut rng);
        let (w2, b2) = ps.add_conv("c2", 2, 2, 3, 1.0, &mut rng);
        let (w3, b3) = ps.add_conv("c3", 6, 2, 1, 1.0, &mut rng);
        for id in [b1, b2, b3] {
            ps.get_mut(id)
                .data
                .iter_mut()
                .for_each(|v| *v = rng.random::<f64>() - 0.5);
        }
        let input = random_tensor(2, 6, 7, &mut rng);
        check_graph(
            |g, x| {
                let a = g.conv(x, w1, Some(b1), 1, 1);
                let a = g.selu(a);
                let p = g.max_pool2(a);
                let s = g.conv(x, w2, Some(b2), 2, 1);
                let s = g.upsample_to(s, 3, 3);
                let q = g_first_two(g, p);
                let corr = g.correlation(p, q, CorrelationMode::Cosine);
                let cat = g.concat(&[p, corr, s]);
                let y = g.conv(cat, w3, Some(b3), 1, 0);
                g.upsample_to(y, 6, 7)
            },
            &mut ps,
            input,
        );
    }

    // a second feature map derived from `p` so the correlation has two
    // distinct differentiable operands
    fn g_first_two(g: &mut Graph, p: NodeId) -> NodeId {
        g.selu(p)
    }

    #[test]
    fn correlation_edge_cases() {
        let a = Tensor::from_vec(2, 1, 3, vec![1.0, 1.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let same = correlation_forward(&a, &a, CorrelationMode::Cosine);
        assert!((same.data()[0] - 1.0).abs() < 1e-15);
        assert!((same.data()[1] - 1.0).abs() < 1e-15);
        assert_eq!(same.data()[2], 0.0, "zero vectors correlate to 0");
        let b = Tensor::from_vec(2, 1, 3, vec![-2.0, 0.0, 0.0, 1.0, 3.0, 0.0]).unwrap();
        let c = correlation_forward(&a, &b, CorrelationMode::Cosine);
        assert!(c.data()[0].abs() < 1e-15, "orthogonal");
        let dot = correlation_forward(&a, &b, CorrelationMode::Dot);
        assert_eq!(dot.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let (w, b) = ps.add_conv("frozen", 1, 1, 3, 1.0, &mut rng);
        ps.set_trainable_prefix("frozen", false);
        let g = {
            let mut g = Graph::new(&ps);
            let x = g.input(random_tensor(1, 4, 4, &mut rng));
            let y = g.conv(x, w, Some(b), 1, 1);
            let seed = Tensor::filled(1, 4, 4, 1.0);
            g.backward(y, seed)
        };
        assert!(g.param(w).is_none());
        assert!(g.param(b).is_none());
    }
}
