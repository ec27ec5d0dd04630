//! Raw 1-D convolution kernels over row-major `[B, C, T]` buffers.

use super::Real;

pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub fn conv_transpose1d_out_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if stride == 0 || len == 0 {
        return None;
    }
    ((len - 1) * stride + kernel).checked_sub(2 * padding)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Output positions `o` for which `o * stride + k - padding` lands in `[0, len_in)`.
#[inline]
fn valid_outputs(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = if k >= g.padding {
        0
    } else {
        (g.padding - k).div_ceil(g.stride)
    };
    if g.len_in + g.padding <= k {
        return (0, 0);
    }
    let hi = ((g.len_in - 1 + g.padding - k) / g.stride + 1).min(g.len_out);
    (lo.min(hi), hi)
}

#[inline]
fn axpy<T: Real>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `w` is `[cout, cin, kernel]`.
pub(crate) fn conv1d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.cout * g.len_out];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * g.len_out..][..g.len_out];
            o.fill(bias[co]);
            for ci in 0..g.cin {
                let xr = &x[(b * g.cin + ci) * g.len_in..][..g.len_in];
                let wr = &w[(co * g.cin + ci) * g.kernel..][..g.kernel];
                for (k, &wv) in wr.iter().enumerate() {
                    let (lo, hi) = valid_outputs(g, k);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + k - g.padding;
                        axpy(&mut o[lo..hi], wv, &xr[start..start + (hi - lo)]);
                    } else {
                        for (t, ov) in o.iter_mut().enumerate().take(hi).skip(lo) {
                            *ov = *ov + wv * xr[t * g.stride + k - g.padding];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates gradients for `x`, `w` and `bias` given the output gradient.
pub(crate) fn conv1d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * g.len_out..][..g.len_out];
            if let Some(gb) = gb.as_deref_mut() {
                gb[co] = gb[co] + go.iter().copied().sum::<T>();
            }
            for ci in 0..g.cin {
                let xr = &x[(b * g.cin + ci) * g.len_in..][..g.len_in];
                let woff = (co * g.cin + ci) * g.kernel;
                for k in 0..g.kernel {
                    let (lo, hi) = valid_outputs(g, k);
                    if lo >= hi {
                        continue;
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let acc = if g.stride == 1 {
                            let start = lo + k - g.padding;
                            dot(&go[lo..hi], &xr[start..start + (hi - lo)])
                        } else {
                            (lo..hi).fold(T::zero(), |acc, t| {
                                acc + go[t] * xr[t * g.stride + k - g.padding]
                            })
                        };
                        gw[woff + k] = gw[woff + k] + acc;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[woff + k];
                        let gxr = &mut gx[(b * g.cin + ci) * g.len_in..][..g.len_in];
                        if g.stride == 1 {
                            let start = lo + k - g.padding;
                            axpy(&mut gxr[start..start + (hi - lo)], wv, &go[lo..hi]);
                        } else {
                            for t in lo..hi {
                                let idx = t * g.stride + k - g.padding;
                                gxr[idx] = gxr[idx] + wv * go[t];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Input positions `t` for which `t * stride + k - padding` lands in `[0, len_out)`.
#[inline]
fn valid_inputs(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = if k >= g.padding {
        0
    } else {
        (g.padding - k).div_ceil(g.stride)
    };
    if g.len_out + g.padding <= k {
        return (0, 0);
    }
    let hi = ((g.len_out - 1 + g.padding - k) / g.stride + 1).min(g.len_in);
    (lo.min(hi), hi)
}

/// `w` is `[cin, cout, kernel]`.
pub(crate) fn conv_transpose1d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.cout * g.len_out];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * g.len_out..][..g.len_out];
            o.fill(bias[co]);
            for ci in 0..g.cin {
                let xr = &x[(b * g.cin + ci) * g.len_in..][..g.len_in];
                let wr = &w[(ci * g.cout + co) * g.kernel..][..g.kernel];
                for (k, &wv) in wr.iter().enumerate() {
                    let (lo, hi) = valid_inputs(g, k);
                    for t in lo..hi {
                        let idx = t * g.stride + k - g.padding;
                        o[idx] = o[idx] + wv * xr[t];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose1d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go = &gout[(b * g.cout + co) * g.len_out..][..g.len_out];
            if let Some(gb) = gb.as_deref_mut() {
                gb[co] = gb[co] + go.iter().copied().sum::<T>();
            }
            for ci in 0..g.cin {
                let xr = &x[(b * g.cin + ci) * g.len_in..][..g.len_in];
                let woff = (ci * g.cout + co) * g.kernel;
                for k in 0..g.kernel {
                    let (lo, hi) = valid_inputs(g, k);
                    if lo >= hi {
                        continue;
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let acc = (lo..hi).fold(T::zero(), |acc, t| {
                            acc + go[t * g.stride + k - g.padding] * xr[t]
                        });
                        gw[woff + k] = gw[woff + k] + acc;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = w[woff + k];
                        let gxr = &mut gx[(b * g.cin + ci) * g.len_in..][..g.len_in];
                        for t in lo..hi {
                            gxr[t] = gxr[t] + wv * go[t * g.stride + k - g.padding];
                        }
                    }
                }
            }
        }
    }
}
