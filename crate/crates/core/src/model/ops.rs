//! Layer primitives on channel-planar `[channels, height, width]` buffers.

use super::real::{gemm, Mat, Real};

/// Unfolds a zero-padded `k x k` neighbourhood into columns:
/// `col[(ci * k * k + ky * k + kx), y * w + x] = input[ci, y + ky - k/2, x + kx - k/2]`.
pub fn im2col<T: Real>(input: &[T], channels: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    debug_assert_eq!(col.len(), channels * k * k * hw);
    for ci in 0..channels {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // Valid x range where x + dx lies inside the row.
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    dst[..x0.min(w)].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    dst[x1.max(x0).min(w)..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im<T: Real>(col: &[T], channels: usize, h: usize, w: usize, k: usize, out: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    out.fill(T::zero());
    for ci in 0..channels {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x0..x1 {
                        let sx = (x as isize + dx) as usize;
                        dst[sx] = dst[sx] + src[x];
                    }
                }
            }
        }
    }
}

/// Forward convolution. Returns the output `[cout, h*w]` and the column
/// buffer needed by the backward pass.
pub fn conv_forward<T: Real>(
    input: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    weight: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let cout = bias.len();
    let mut col = vec![T::zero(); cin * k * k * hw];
    im2col(input, cin, h, w, k, &mut col);
    let mut out = vec![T::zero(); cout * hw];
    for (co, &b) in bias.iter().enumerate() {
        out[co * hw..(co + 1) * hw].fill(b);
    }
    gemm(Mat::new(weight, cout, cin * k * k), Mat::new(&col, cin * k * k, hw), T::one(), &mut out);
    (out, col)
}

/// Backward convolution. Accumulates nothing: writes weight and bias
/// gradients, and returns the input gradient when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    grad_out: &[T],
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    weight: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    need_input: bool,
) -> Option<Vec<T>> {
    let hw = h * w;
    let cout = grad_bias.len();
    let kk = cin * k * k;
    gemm(Mat::new(grad_out, cout, hw), Mat::new(col, kk, hw).t(), T::zero(), grad_weight);
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        let s: f64 = grad_out[co * hw..(co + 1) * hw].iter().map(|v| v.as_f64()).sum();
        *gb = T::from_f64(s);
    }
    if !need_input {
        return None;
    }
    let mut dcol = vec![T::zero(); kk * hw];
    gemm(Mat::new(weight, cout, kk).t(), Mat::new(grad_out, cout, hw), T::zero(), &mut dcol);
    let mut dinput = vec![T::zero(); cin * hw];
    col2im(&dcol, cin, h, w, k, &mut dinput);
    Some(dinput)
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Masks a gradient by the positive part of a post-ReLU activation.
pub fn relu_backward<T: Real>(activation: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling with stride 2. Returns pooled values and the flat input
/// index of each maximum (first maximum in scan order wins).
pub fn maxpool2<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(grad_out: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut g = vec![T::zero(); input_len];
    for (&go, &i) in grad_out.iter().zip(arg) {
        g[i as usize] = g[i as usize] + go;
    }
    g
}

/// Nearest-neighbour 2x upsampling of `[c, h, w]` to `[c, 2h, 2w]`.
pub fn upsample2<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[ch * h * w + (y / 2) * w..][..w];
            let dst = &mut out[ch * oh * ow + y * ow..][..ow];
            for x in 0..ow {
                dst[x] = src[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut g = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let d = &mut g[ch * h * w + (y / 2) * w + x / 2];
                *d = *d + grad_out[ch * oh * ow + y * ow + x];
            }
        }
    }
    g
}
