//! Layers with hand-written backward passes.
//!
//! Each layer has `infer(&self, ..)` for evaluation (no caches, running BN
//! statistics) and `forward(&mut self, ..)` / `backward(&mut self, ..)` for
//! training. Parameter gradients accumulate into `Param::grad`; per-sample
//! contributions are summed in sample order so the result does not depend on
//! the execution mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self { value, grad }
    }

    fn uniform(len: usize, bound: f32, rng: &mut ChaCha8Rng) -> Self {
        Self::new((0..len).map(|_| rng.random_range(-bound..=bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub enum StateRef<'a> {
    Param(&'a Param),
    /// Non-learnable state (BN running statistics).
    Buffer(&'a [f32]),
}

pub enum StateMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut [f32]),
}

/// Named traversal of all parameters and buffers, in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `C = op(A) op(B) + beta C` for row-major `m x k` and `k x n` operands.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        // need ox*s + kx - pad <= w - 1
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / s + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col(x: &[f32], g: &Geometry, col: &mut [f32]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.oh {
                    let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        d.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..lo].iter_mut().for_each(|v| *v = 0.0);
                    d[hi..].iter_mut().for_each(|v| *v = 0.0);
                    if hi > lo {
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            d[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, v) in d[lo..hi].iter_mut().enumerate() {
                                *v = src[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &Geometry, dx: &mut [f32]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_cols(kx);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    let d = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    for (j, v) in s[lo..hi].iter().enumerate() {
                        d[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param,
    pub bias: Param,
    /// When false, `backward` skips the input gradient (first layer).
    pub input_grad: bool,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Param::uniform(out_c * fan_in, bound, rng),
            bias: Param::uniform(out_c, bound, rng),
            input_grad: true,
            cache: None,
        }
    }

    pub fn pointwise(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(in_c, out_c, 1, 1, 0, rng)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.output_hw(h, w);
        Geometry {
            c: self.in_c,
            h,
            w,
            k: self.kernel,
            stride: self.stride,
            pad: self.pad,
            oh,
            ow,
        }
    }

    pub fn infer(&self, x: &Tensor, exec: Exec) -> Tensor {
        assert_eq!(x.c(), self.in_c, "conv input channels");
        let g = self.geometry(x.h(), x.w());
        let plane = g.oh * g.ow;
        let ckk = self.in_c * self.kernel * self.kernel;
        let mut y = Tensor::zeros([x.n(), self.out_c, g.oh, g.ow]);
        exec.for_each_chunk_mut(y.data_mut(), self.out_c * plane, |n, yn| {
            let xn = x.sample(n);
            let owned;
            let col: &[f32] = if self.is_pointwise() {
                xn
            } else {
                let mut buf = vec![0.0; ckk * plane];
                im2col(xn, &g, &mut buf);
                owned = buf;
                &owned
            };
            sgemm(self.out_c, ckk, plane, &self.weight.value, false, col, false, 0.0, yn);
            for (o, row) in yn.chunks_mut(plane).enumerate() {
                let b = self.bias.value[o];
                row.iter_mut().for_each(|v| *v += b);
            }
        });
        y
    }

    pub fn forward(&mut self, x: &Tensor, exec: Exec) -> Tensor {
        self.cache = Some(x.clone());
        self.infer(x, exec)
    }

    /// Accumulates parameter gradients; returns the input gradient unless
    /// `input_grad` is off.
    pub fn backward(&mut self, dy: &Tensor, exec: Exec) -> Option<Tensor> {
        let x = self.cache.take().expect("conv backward without forward");
        let g = self.geometry(x.h(), x.w());
        let plane = g.oh * g.ow;
        let ckk = self.in_c * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let want_dx = self.input_grad;
        let weight = &self.weight.value;
        let out_c = self.out_c;

        let parts = exec.map_range(x.n(), |n| {
            let xn = x.sample(n);
            let dyn_ = dy.sample(n);
            let owned;
            let col: &[f32] = if pointwise {
                xn
            } else {
                let mut buf = vec![0.0; ckk * plane];
                im2col(xn, &g, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![0.0; out_c * ckk];
            sgemm(out_c, plane, ckk, dyn_, false, col, true, 0.0, &mut dw);
            let db: Vec<f32> = dyn_.chunks(plane).map(|r| r.iter().sum()).collect();
            let dx = want_dx.then(|| {
                let mut dcol = vec![0.0; ckk * plane];
                sgemm(ckk, out_c, plane, weight, true, dyn_, false, 0.0, &mut dcol);
                if pointwise {
                    dcol
                } else {
                    let mut dxn = vec![0.0; g.c * g.h * g.w];
                    col2im(&dcol, &g, &mut dxn);
                    dxn
                }
            });
            (dw, db, dx)
        });

        let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
        for (n, (dw, db, dxn)) in parts.into_iter().enumerate() {
            self.weight.grad.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            self.bias.grad.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            if let (Some(t), Some(v)) = (dx.as_mut(), dxn) {
                t.sample_mut(n).copy_from_slice(&v);
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        f(&join(prefix, "weight"), StateRef::Param(&self.weight));
        f(&join(prefix, "bias"), StateRef::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        f(&join(prefix, "weight"), StateMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), StateMut::Param(&mut self.bias));
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

/// Spatial batch normalisation, optionally followed by a fused ReLU.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    pub relu: bool,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, relu: bool) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            relu,
            cache: None,
        }
    }

    fn apply(&self, x: &Tensor, mean: &[f32], inv_std: &[f32], xhat: Option<&mut Tensor>) -> Tensor {
        let (n, c, plane) = (x.n(), x.c(), x.h() * x.w());
        let mut y = Tensor::zeros(x.shape());
        let mut xhat = xhat;
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (m, s) = (mean[ch], inv_std[ch]);
                let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
                let src = &x.data()[off..off + plane];
                if let Some(xh) = xhat.as_deref_mut() {
                    let xh = &mut xh.data_mut()[off..off + plane];
                    for (d, v) in xh.iter_mut().zip(src) {
                        *d = (v - m) * s;
                    }
                }
                let dst = &mut y.data_mut()[off..off + plane];
                for (d, v) in dst.iter_mut().zip(src) {
                    let o = ga * (v - m) * s + be;
                    *d = if self.relu && o < 0.0 { 0.0 } else { o };
                }
            }
        }
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let inv_std: Vec<f32> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        self.apply(x, &self.running_mean, &inv_std, None)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.channels, "batch norm channels");
        let (n, c, plane) = (x.n(), x.c(), x.h() * x.w());
        let count = (n * plane) as f64;
        let mut mean = vec![0f32; c];
        let mut inv_std = vec![0f32; c];
        for ch in 0..c {
            let (mut s, mut s2) = (0f64, 0f64);
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for &v in &x.data()[off..off + plane] {
                    s += v as f64;
                }
            }
            let m = s / count;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for &v in &x.data()[off..off + plane] {
                    let d = v as f64 - m;
                    s2 += d * d;
                }
            }
            let var = s2 / count;
            mean[ch] = m as f32;
            inv_std[ch] = (1.0 / (var + self.eps as f64).sqrt()) as f32;
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean[ch] = (1.0 - mo) * self.running_mean[ch] + mo * m as f32;
            self.running_var[ch] = (1.0 - mo) * self.running_var[ch] + mo * unbiased as f32;
        }
        let mut xhat = Tensor::zeros(x.shape());
        let y = self.apply(x, &mean, &inv_std, Some(&mut xhat));
        self.cache = Some(BnCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = self.cache.take().expect("bn backward without forward");
        let (n, c, plane) = (dy.n(), dy.c(), dy.h() * dy.w());
        let m = (n * plane) as f64;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
            let gated = |xh: f32, d: f32| -> f32 {
                if self.relu && ga * xh + be < 0.0 {
                    0.0
                } else {
                    d
                }
            };
            let (mut sum_dy, mut sum_dy_xhat) = (0f64, 0f64);
            for i in 0..n {
                let off = (i * c + ch) * plane;
                let xs = &xhat.data()[off..off + plane];
                let ds = &dy.data()[off..off + plane];
                for (&xh, &d) in xs.iter().zip(ds) {
                    let d = gated(xh, d) as f64;
                    sum_dy += d;
                    sum_dy_xhat += d * xh as f64;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat as f32;
            self.beta.grad[ch] += sum_dy as f32;
            let k = ga as f64 * inv_std[ch] as f64 / m;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                let xs = &xhat.data()[off..off + plane];
                let ds = &dy.data()[off..off + plane];
                let out = &mut dx.data_mut()[off..off + plane];
                for ((o, &xh), &d) in out.iter_mut().zip(xs).zip(ds) {
                    let d = gated(xh, d) as f64;
                    *o = (k * (m * d - sum_dy - xh as f64 * sum_dy_xhat)) as f32;
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        f(&join(prefix, "gamma"), StateRef::Param(&self.gamma));
        f(&join(prefix, "beta"), StateRef::Param(&self.beta));
        f(&join(prefix, "running_mean"), StateRef::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), StateRef::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        f(&join(prefix, "gamma"), StateMut::Param(&mut self.gamma));
        f(&join(prefix, "beta"), StateMut::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), StateMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), StateMut::Buffer(&mut self.running_var));
    }
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2 {
    fn run(x: &Tensor, mut argmax: Option<&mut Vec<u32>>) -> Tensor {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        if let Some(a) = argmax.as_deref_mut() {
            a.clear();
            a.reserve(n * c * oh * ow);
        }
        let src = x.data();
        let dst = y.data_mut();
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i0 = base + 2 * oy * w + 2 * ox;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[o] = src[best];
                    if let Some(a) = argmax.as_deref_mut() {
                        a.push(best as u32);
                    }
                    o += 1;
                }
            }
        }
        y
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        Self::run(x, None)
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut idx = Vec::new();
        let y = Self::run(x, Some(&mut idx));
        self.cache = Some((idx, x.shape()));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (idx, shape) = self.cache.take().expect("pool backward without forward");
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for (&i, &g) in idx.iter().zip(dy.data()) {
            d[i as usize] += g;
        }
        dx
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let srow = &src[plane * h * w + (oy / 2) * w..][..w];
            let drow = &mut dst[plane * oh * ow + oy * ow..][..ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / 2];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            let srow = &src[plane * oh * ow + oy * ow..][..ow];
            let drow = &mut dst[plane * h * w + (oy / 2) * w..][..w];
            for (ox, s) in srow.iter().enumerate() {
                drow[ox / 2] += s;
            }
        }
    }
    dx
}

/// Pre-activation bottleneck: BN-ReLU-1x1, BN-ReLU-3x3, BN-ReLU-1x1, plus a
/// 1x1 projection on the skip path when the width changes.
#[derive(Debug, Clone)]
pub struct Residual {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    bn3: BatchNorm2d,
    conv3: Conv2d,
    skip: Option<Conv2d>,
}

impl Residual {
    pub fn new(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = out_c / 2;
        Self {
            bn1: BatchNorm2d::new(in_c, true),
            conv1: Conv2d::pointwise(in_c, mid, rng),
            bn2: BatchNorm2d::new(mid, true),
            conv2: Conv2d::new(mid, mid, 3, 1, 1, rng),
            bn3: BatchNorm2d::new(mid, true),
            conv3: Conv2d::pointwise(mid, out_c, rng),
            skip: (in_c != out_c).then(|| Conv2d::pointwise(in_c, out_c, rng)),
        }
    }

    pub fn infer(&self, x: &Tensor, exec: Exec) -> Tensor {
        let a = self.conv1.infer(&self.bn1.infer(x), exec);
        let b = self.conv2.infer(&self.bn2.infer(&a), exec);
        let mut out = self.conv3.infer(&self.bn3.infer(&b), exec);
        match &self.skip {
            Some(s) => out.add_assign(&s.infer(x, exec)),
            None => out.add_assign(x),
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor, exec: Exec) -> Tensor {
        let a = self.bn1.forward(x);
        let a = self.conv1.forward(&a, exec);
        let b = self.bn2.forward(&a);
        let b = self.conv2.forward(&b, exec);
        let c = self.bn3.forward(&b);
        let mut out = self.conv3.forward(&c, exec);
        match &mut self.skip {
            Some(s) => out.add_assign(&s.forward(x, exec)),
            None => out.add_assign(x),
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor, exec: Exec) -> Tensor {
        let d = self.conv3.backward(dy, exec).expect("input grad");
        let d = self.bn3.backward(&d);
        let d = self.conv2.backward(&d, exec).expect("input grad");
        let d = self.bn2.backward(&d);
        let d = self.conv1.backward(&d, exec).expect("input grad");
        let mut dx = self.bn1.backward(&d);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(dy, exec).expect("input grad")),
            None => dx.add_assign(dy),
        }
        dx
    }
}

impl Module for Residual {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, StateRef<'_>)) {
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, StateMut<'_>)) {
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        if let Some(s) = &mut self.skip {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}
