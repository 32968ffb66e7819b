//! Raw loops behind the spatial tape operations. Fields are `H×W×C` row-major.

use super::Scalar;

/// Marks an argmax that landed on zero padding.
pub(crate) const PAD: u32 = u32::MAX;

/// Depthwise cross-correlation with a shared `k×k` kernel and zero padding.
pub(crate) fn conv_depthwise<T: Scalar>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    kernel: &[T],
    k: usize,
) -> Vec<T> {
    let r = (k / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            for i in 0..k {
                let sy = y as isize + i as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let kv = kernel[i * k + j];
                    let sx = xx as isize + j as isize - r;
                    if kv == T::zero() || sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (sy as usize * w + sx as usize) * c;
                    for (d, &s) in dst.iter_mut().zip(&x[base..base + c]) {
                        *d += kv * s;
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv_depthwise`] with respect to its input.
pub(crate) fn conv_depthwise_backward<T: Scalar>(
    grad: &[T],
    (h, w, c): (usize, usize, usize),
    kernel: &[T],
    k: usize,
) -> Vec<T> {
    let r = (k / 2) as isize;
    let mut dx = vec![T::zero(); grad.len()];
    for y in 0..h {
        for xx in 0..w {
            let g = &grad[(y * w + xx) * c..(y * w + xx + 1) * c];
            for i in 0..k {
                let sy = y as isize + i as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let kv = kernel[i * k + j];
                    let sx = xx as isize + j as isize - r;
                    if kv == T::zero() || sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (sy as usize * w + sx as usize) * c;
                    for (d, &gv) in dx[base..base + c].iter_mut().zip(g) {
                        *d += kv * gv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel `win×win` maximum with zero padding. Returns the maxima and,
/// for each output element, the flat input index it came from (first
/// occurrence in row-major window order, [`PAD`] for a padding cell).
pub(crate) fn local_max<T: Scalar>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    win: usize,
) -> (Vec<T>, Vec<u32>) {
    let r = (win / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    let mut arg = vec![PAD; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_idx = PAD;
                for i in 0..win {
                    let sy = y as isize + i as isize - r;
                    for j in 0..win {
                        let sx = xx as isize + j as isize - r;
                        let (v, idx) = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            (T::zero(), PAD)
                        } else {
                            let idx = (sy as usize * w + sx as usize) * c + ch;
                            (x[idx], idx as u32)
                        };
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out[o + ch] = best;
                arg[o + ch] = best_idx;
            }
        }
    }
    (out, arg)
}

pub(crate) fn im2col_shape(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    (
        (h + 2 * pad - k) / stride + 1,
        (w + 2 * pad - k) / stride + 1,
    )
}

/// Unfolds `k×k` patches (stride, zero padding) into rows ordered `(ky, kx, c)`.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (ho, wo) = im2col_shape(h, w, k, stride, pad);
    let row = k * k * c;
    let mut out = vec![T::zero(); ho * wo * row];
    for oy in 0..ho {
        for ox in 0..wo {
            let dst = &mut out[(oy * wo + ox) * row..(oy * wo + ox + 1) * row];
            for i in 0..k {
                let sy = (oy * stride + i) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let sx = (ox * stride + j) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let d = (i * k + j) * c;
                    dst[d..d + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

pub(crate) fn im2col_backward<T: Scalar>(
    grad: &[T],
    (h, w, c): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (ho, wo) = im2col_shape(h, w, k, stride, pad);
    let row = k * k * c;
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let g = &grad[(oy * wo + ox) * row..(oy * wo + ox + 1) * row];
            for i in 0..k {
                let sy = (oy * stride + i) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let sx = (ox * stride + j) as isize - pad as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let s = (i * k + j) * c;
                    for (d, &gv) in dx[dst..dst + c].iter_mut().zip(&g[s..s + c]) {
                        *d += gv;
                    }
                }
            }
        }
    }
    dx
}
