use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Param, Tensor};

/// `c = a·b + beta·c` with row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `a_t` / `b_t` read the operand as the transpose of a stored row-major
/// `k×m` / `n×k` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_c: usize, out_c: usize, kernel: usize) -> Self {
        Self {
            in_c,
            out_c,
            kernel,
            stride: 1,
            pad: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    /// Dilated kernel with "same" padding.
    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.pad = dilation * (self.kernel - 1) / 2;
        self
    }

    pub fn out_dim(&self, input: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (input + 2 * self.pad - span) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// 2-D convolution lowered to a matrix product over unfolded patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    /// `out_c × (in_c·k·k)`
    pub weight: Param,
    pub bias: Param,
}

/// What the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    /// Unfolded input, `(in_c·k·k) × (out_h·out_w)`; the raw input for 1×1.
    cols: Vec<f32>,
}

impl Conv2d {
    /// He-normal weights for a ReLU successor, zero bias.
    pub fn he<R: Rng + ?Sized>(name: &str, spec: ConvSpec, rng: &mut R) -> Self {
        let fan_in = spec.patch_len() as f32;
        Self::with_std(name, spec, (2.0 / fan_in).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(name: &str, spec: ConvSpec, std: f32, rng: &mut R) -> Self {
        Self {
            spec,
            weight: Param::normal(format!("{name}.weight"), spec.out_c * spec.patch_len(), std, rng),
            bias: Param::zeros(format!("{name}.bias"), spec.out_c),
        }
    }

    pub fn zeroed(name: &str, spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: Param::zeros(format!("{name}.weight"), spec.out_c * spec.patch_len()),
            bias: Param::zeros(format!("{name}.bias"), spec.out_c),
        }
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: &Tensor) -> (Tensor, ConvCache) {
        let s = &self.spec;
        assert_eq!(x.c, s.in_c, "{}: input channels", self.weight.name);
        let (oh, ow) = (s.out_dim(x.h), s.out_dim(x.w));
        let cols = if s.is_pointwise() {
            x.data.clone()
        } else {
            let mut cols = vec![0.0; s.patch_len() * oh * ow];
            im2col(x, s, oh, ow, &mut cols);
            cols
        };
        let p = oh * ow;
        let mut out = Tensor::zeros(s.out_c, oh, ow);
        for (o, b) in self.bias.value.iter().enumerate() {
            out.data[o * p..(o + 1) * p].fill(*b);
        }
        gemm(
            s.out_c,
            s.patch_len(),
            p,
            &self.weight.value,
            false,
            &cols,
            false,
            1.0,
            &mut out.data,
        );
        let cache = ConvCache {
            in_h: x.h,
            in_w: x.w,
            out_h: oh,
            out_w: ow,
            cols,
        };
        (out, cache)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let s = self.spec;
        let p = cache.out_h * cache.out_w;
        assert_eq!((dy.c, dy.h, dy.w), (s.out_c, cache.out_h, cache.out_w));
        let kk = s.patch_len();
        gemm(
            s.out_c,
            p,
            kk,
            &dy.data,
            false,
            &cache.cols,
            true,
            1.0,
            &mut self.weight.grad,
        );
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dy.data[o * p..(o + 1) * p].iter().sum::<f32>();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; kk * p];
        gemm(
            kk,
            s.out_c,
            p,
            &self.weight.value,
            true,
            &dy.data,
            false,
            0.0,
            &mut dcols,
        );
        if s.is_pointwise() {
            return Some(Tensor::from_vec(s.in_c, cache.in_h, cache.in_w, dcols));
        }
        let mut dx = Tensor::zeros(s.in_c, cache.in_h, cache.in_w);
        col2im(&dcols, &s, cache.out_h, cache.out_w, &mut dx);
        Some(dx)
    }
}

fn im2col(x: &Tensor, s: &ConvSpec, oh: usize, ow: usize, cols: &mut [f32]) {
    let p = oh * ow;
    let k = s.kernel;
    for c in 0..s.in_c {
        let plane = x.channel(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= x.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let off = (kx * s.dilation) as isize - s.pad as isize;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s.stride) as isize + off;
                        *d = if ix >= 0 && ix < x.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], s: &ConvSpec, oh: usize, ow: usize, dx: &mut Tensor) {
    let p = oh * ow;
    let k = s.kernel;
    let (h, w) = (dx.h, dx.w);
    for c in 0..s.in_c {
        let plane = dx.channel_mut(c);
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let off = (kx * s.dilation) as isize - s.pad as isize;
                    for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * s.stride) as isize + off;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn reference(conv: &Conv2d, x: &Tensor) -> Tensor {
        let s = conv.spec;
        let (oh, ow) = (s.out_dim(x.h), s.out_dim(x.w));
        let mut y = Tensor::zeros(s.out_c, oh, ow);
        for o in 0..s.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.value[o] as f64;
                    for c in 0..s.in_c {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                let wv =
                                    conv.weight.value[((o * s.in_c + c) * s.kernel + ky) * s.kernel + kx];
                                acc += wv as f64 * x.data[(c * x.h + iy as usize) * x.w + ix as usize] as f64;
                            }
                        }
                    }
                    y.data[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        y
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn specs() -> Vec<ConvSpec> {
        vec![
            ConvSpec::new(3, 4, 3),
            ConvSpec::new(3, 4, 3).stride(2),
            ConvSpec::new(2, 3, 3).dilation(2),
            ConvSpec::new(4, 2, 1),
            ConvSpec::new(2, 3, 5).stride(4).pad(2),
            ConvSpec::new(3, 2, 4).pad(0),
        ]
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in specs() {
            let mut conv = Conv2d::he("c", spec, &mut rng);
            conv.bias = Param::normal("c.bias", spec.out_c, 0.5, &mut rng);
            let x = random_tensor(&mut rng, spec.in_c, 8, 8);
            let y = conv.forward(&x);
            let r = reference(&conv, &x);
            assert!(y.same_shape(&r));
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-5, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in specs() {
            let mut conv = Conv2d::he("c", spec, &mut rng);
            let x = random_tensor(&mut rng, spec.in_c, 8, 8);
            let (y, cache) = conv.forward_train(&x);
            // Loss = Σ r ⊙ y for a fixed random r, so dL/dy = r.
            let r = random_tensor(&mut rng, y.c, y.h, y.w);
            let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
                reference(conv, x)
                    .data
                    .iter()
                    .zip(&r.data)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum()
            };
            conv.weight.zero_grad();
            conv.bias.zero_grad();
            let dx = conv.backward(&cache, &r, true).unwrap();
            let eps = 1e-2f32;
            for i in (0..x.data.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data[i] as f64).abs() < 1e-3, "{spec:?} dx[{i}]");
            }
            for i in (0..conv.weight.len()).step_by(5) {
                let mut cp = conv.clone();
                cp.weight.value[i] += eps;
                let mut cm = conv.clone();
                cm.weight.value[i] -= eps;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps as f64);
                assert!((fd - conv.weight.grad[i] as f64).abs() < 1e-3, "{spec:?} dw[{i}]");
            }
            let db0: f64 = r.channel(0).iter().map(|&v| v as f64).sum();
            assert!((db0 - conv.bias.grad[0] as f64).abs() < 1e-4);
        }
    }
}
