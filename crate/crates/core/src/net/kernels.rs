//! Dense kernels behind the tape ops.

pub(crate) const NORM_EPS: f64 = 1e-5;

/// `c = a·b + beta·c` for row-major `c: [m, n]`; `a` is `[m, k]` and `b` is
/// `[k, n]`, each addressed through `(row_stride, col_stride)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let max_a = (m - 1) * rsa + (k - 1) * csa;
    let max_b = (k - 1) * rsb + (n - 1) * csb;
    assert!(max_a < a.len() && max_b < b.len());
    // SAFETY: the asserts above bound every index the kernel can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `[C, H, W]` image into `[C·9, H·W]` columns for a 3x3 kernel
/// with zero padding 1. Row `c·9 + dr·3 + dc` holds tap `(dr, dc)`.
pub(crate) fn im2col3(img: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let plane = h * w;
    for ch in 0..c {
        let src = &img[ch * plane..(ch + 1) * plane];
        for dr in 0..3 {
            for dc in 0..3 {
                let row =
                    &mut cols[(ch * 9 + dr * 3 + dc) * plane..(ch * 9 + dr * 3 + dc + 1) * plane];
                for r in 0..h {
                    let sr = r as isize + dr as isize - 1;
                    let out = &mut row[r * w..(r + 1) * w];
                    if sr < 0 || sr >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[sr as usize * w..(sr as usize + 1) * w];
                    match dc {
                        0 => {
                            out[0] = 0.0;
                            out[1..].copy_from_slice(&line[..w - 1]);
                        }
                        1 => out.copy_from_slice(line),
                        _ => {
                            out[..w - 1].copy_from_slice(&line[1..]);
                            out[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulates columns back into `img`.
pub(crate) fn col2im3(cols: &[f64], c: usize, h: usize, w: usize, img: &mut [f64]) {
    let plane = h * w;
    for ch in 0..c {
        let dst = &mut img[ch * plane..(ch + 1) * plane];
        for dr in 0..3 {
            for dc in 0..3 {
                let row = &cols[(ch * 9 + dr * 3 + dc) * plane..(ch * 9 + dr * 3 + dc + 1) * plane];
                for r in 0..h {
                    let sr = r as isize + dr as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let src = &row[r * w..(r + 1) * w];
                    let line = &mut dst[sr as usize * w..(sr as usize + 1) * w];
                    match dc {
                        0 => {
                            for (d, s) in line[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in line.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in line[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Writes `(x - mean) / sqrt(var + eps)` into `out`, returns the inverse std.
pub(crate) fn normalize_plane(x: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + NORM_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

/// `dx = inv · (dy - mean(dy) - y · mean(dy·y))`.
pub(crate) fn normalize_plane_backward(dy: &[f64], y: &[f64], inv: f64, dx: &mut [f64]) {
    let n = dy.len() as f64;
    let mean_dy = dy.iter().sum::<f64>() / n;
    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
    for ((d, g), yv) in dx.iter_mut().zip(dy).zip(y) {
        *d = inv * (g - mean_dy - yv * mean_dyy);
    }
}

/// 2x2 stride-2 max pooling over `planes` maps of `h × w`; returns values
/// and the flat input index of each maximum.
pub(crate) fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut value = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for r in 0..oh {
            for c in 0..ow {
                let mut best = base + 2 * r * w + 2 * c;
                for idx in [
                    base + 2 * r * w + 2 * c + 1,
                    base + (2 * r + 1) * w + 2 * c,
                    base + (2 * r + 1) * w + 2 * c + 1,
                ] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                value.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (value, argmax)
}

/// Bin `i` of `out` over a length-`n` axis spans `[⌊i·n/out⌋, ⌈(i+1)·n/out⌉)`.
fn bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    (i * n / out, ((i + 1) * n).div_ceil(out))
}

pub(crate) fn adaptive_avg_pool(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out: usize,
) -> Vec<f64> {
    let mut value = Vec::with_capacity(planes * out * out);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..out {
            let (r0, r1) = bin(i, h, out);
            for j in 0..out {
                let (c0, c1) = bin(j, w, out);
                let mut acc = 0.0;
                for r in r0..r1 {
                    acc += src[r * w + c0..r * w + c1].iter().sum::<f64>();
                }
                value.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    value
}

pub(crate) fn adaptive_avg_pool_backward(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..out {
            let (r0, r1) = bin(i, h, out);
            for j in 0..out {
                let (c0, c1) = bin(j, w, out);
                let share = g[(p * out + i) * out + j] / ((r1 - r0) * (c1 - c0)) as f64;
                for r in r0..r1 {
                    for v in dst[r * w + c0..r * w + c1].iter_mut() {
                        *v += share;
                    }
                }
            }
        }
    }
    gx
}
