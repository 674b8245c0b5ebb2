//! Numeric kernels behind the autograd ops.
//!
//! Convolutions use channels-last layout: inputs `[H, W, Cin]`, weights
//! `[K, K, Cin, Cout]`, outputs `[Ho, Wo, Cout]`. Outputs are partitioned so
//! that each element is accumulated by one task in a fixed order, which keeps
//! results bit-identical between the parallel and sequential builds.

use crate::par;
use crate::tensor::Tensor;

/// Output extent of a strided convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (h, w, cin) = x.dims3();
    let k = weight.shape()[0];
    let cout = weight.shape()[3];
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let xs = x.data();
    let ws = weight.data();
    let mut out = vec![0.0; ho * wo * cout];
    par::for_each_chunk_mut(&mut out, wo * cout, |oy, row| {
        for ox in 0..wo {
            let px = &mut row[ox * cout..(ox + 1) * cout];
            if let Some(b) = bias {
                px.copy_from_slice(b.data());
            }
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xin = &xs[(iy as usize * w + ix as usize) * cin..][..cin];
                    let wk = &ws[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &v) in xin.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &wk[ci * cout..(ci + 1) * cout];
                        for (o, &wv) in px.iter_mut().zip(wrow) {
                            *o += v * wv;
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(vec![ho, wo, cout], out).expect("conv output shape")
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_dims: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Tensor {
    let (h, w, cin) = input_dims;
    let (ho, wo, cout) = grad_out.dims3();
    let k = weight.shape()[0];
    let gs = grad_out.data();
    let ws = weight.data();
    let mut dx = vec![0.0; h * w * cin];
    par::for_each_chunk_mut(&mut dx, w * cin, |iy, row| {
        for ix in 0..w {
            let px = &mut row[ix * cin..(ix + 1) * cin];
            for ky in 0..k {
                let ny = iy as isize + pad as isize - ky as isize;
                if ny < 0 || ny % stride as isize != 0 {
                    continue;
                }
                let oy = ny as usize / stride;
                if oy >= ho {
                    continue;
                }
                for kx in 0..k {
                    let nx = ix as isize + pad as isize - kx as isize;
                    if nx < 0 || nx % stride as isize != 0 {
                        continue;
                    }
                    let ox = nx as usize / stride;
                    if ox >= wo {
                        continue;
                    }
                    let g = &gs[(oy * wo + ox) * cout..][..cout];
                    let wk = &ws[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, d) in px.iter_mut().enumerate() {
                        let wrow = &wk[ci * cout..(ci + 1) * cout];
                        *d += dot(wrow, g);
                    }
                }
            }
        }
    });
    Tensor::from_vec(vec![h, w, cin], dx).expect("conv input grad shape")
}

/// Gradient of a convolution with respect to its weights.
pub fn conv2d_backward_weight(
    grad_out: &Tensor,
    x: &Tensor,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (h, w, cin) = x.dims3();
    let (ho, wo, cout) = grad_out.dims3();
    let gs = grad_out.data();
    let xs = x.data();
    let mut dw = vec![0.0; kernel * kernel * cin * cout];
    // One task per (ky, kx) tap; each tap covers all input channels.
    par::for_each_chunk_mut(&mut dw, cin * cout, |tap, block| {
        let ky = tap / kernel;
        let kx = tap % kernel;
        for oy in 0..ho {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..wo {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let xin = &xs[(iy as usize * w + ix as usize) * cin..][..cin];
                let g = &gs[(oy * wo + ox) * cout..][..cout];
                for (ci, &v) in xin.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let row = &mut block[ci * cout..(ci + 1) * cout];
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d += v * gv;
                    }
                }
            }
        }
    });
    Tensor::from_vec(vec![kernel, kernel, cin, cout], dw).expect("conv weight grad shape")
}

/// Sum of a `[.., C]` tensor over all leading axes.
pub fn sum_channels(t: &Tensor) -> Vec<f64> {
    let c = *t.shape().last().expect("non-scalar");
    let mut acc = vec![0.0; c];
    for px in t.data().chunks(c) {
        for (a, v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    acc
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Source index and interpolation weight pairs for half-pixel-centred
/// bilinear resampling along one axis.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (dst * src_len / dst_len).min(src_len - 1)
}

/// Numerically stable softmax of one logit row, written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Matrix product of `[n, k]` and `[k, m]` row-major buffers.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    par::for_each_chunk_mut(&mut out, m, |i, row| {
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    });
    out
}
