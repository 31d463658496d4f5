use super::tensor::Tensor;

pub fn relu_inplace(x: &mut Tensor) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the ReLU output `y` was clamped.
pub fn relu_backward(y: &Tensor, dy: &mut Tensor) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Source taps for half-pixel-centered bilinear upsampling along one axis.
fn taps(out: usize, input: usize) -> Vec<(usize, usize, f32)> {
    let scale = input as f32 / out as f32;
    (0..out)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f32)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let ty = taps(out_h, x.h);
    let tx = taps(out_w, x.w);
    let mut y = Tensor::zeros(x.c, out_h, out_w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let r0 = &src[y0 * x.w..(y0 + 1) * x.w];
            let r1 = &src[y1 * x.w..(y1 + 1) * x.w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - lx) + r0[x1] * lx;
                let bot = r1[x0] * (1.0 - lx) + r1[x1] * lx;
                dst[oy * out_w + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let ty = taps(dy.h, in_h);
    let tx = taps(dy.w, in_w);
    let mut dx = Tensor::zeros(dy.c, in_h, in_w);
    for c in 0..dy.c {
        let g = dy.channel(c);
        let dst = dx.channel_mut(c);
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = g[oy * dy.w + ox];
                dst[y0 * in_w + x0] += v * (1.0 - ly) * (1.0 - lx);
                dst[y0 * in_w + x1] += v * (1.0 - ly) * lx;
                dst[y1 * in_w + x0] += v * ly * (1.0 - lx);
                dst[y1 * in_w + x1] += v * ly * lx;
            }
        }
    }
    dx
}

/// Per-channel spatial mean as a C×1×1 tensor.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let p = x.plane() as f32;
    Tensor::from_vec(
        x.c,
        1,
        1,
        (0..x.c).map(|c| x.channel(c).iter().sum::<f32>() / p).collect(),
    )
}

/// Repeats a C×1×1 tensor over an H×W plane.
pub fn broadcast(x: &Tensor, h: usize, w: usize) -> Tensor {
    let mut y = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        y.channel_mut(c).fill(x.data[c]);
    }
    y
}

/// Sum over the spatial plane, the adjoint of [`broadcast`].
pub fn broadcast_backward(dy: &Tensor) -> Tensor {
    Tensor::from_vec(
        dy.c,
        1,
        1,
        (0..dy.c).map(|c| dy.channel(c).iter().sum()).collect(),
    )
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
