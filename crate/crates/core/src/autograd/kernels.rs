//! Raw forward/backward loops for the layer set.
//!
//! Accumulation order is part of the contract: for every output element the
//! convolution forward starts from the bias and adds input×weight products in
//! lexicographic `(in_channel, kernel_row, kernel_col)` order, skipping padded
//! taps. Reference implementations in tests rely on that order for bitwise
//! comparisons.

/// Geometry of a 2-D (transposed) convolution over NCHW tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a cross-correlation, or `None` when the arithmetic is not integral.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a fractionally-strided convolution.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * pad {
        return None;
    }
    Some(full - 2 * pad)
}

/// Range of output positions `o` such that `o * stride + k - pad` lands in `[0, input)`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // lo = ceil((pad - k) / stride) clamped at 0
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // hi = floor((input - 1 + pad - k) / stride) + 1, clamped to out
    let top = input as isize - 1 + pad as isize - k as isize;
    let hi = if top < 0 {
        0
    } else {
        (top as usize / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + o) * out_plane..][..out_plane];
            dst.fill(b[o]);
            for c in 0..g.in_channels {
                let src = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
                let wk = &w[(o * g.in_channels + c) * ksize..][..ksize];
                for kh in 0..g.kernel_h {
                    let (oh_lo, oh_hi) = valid_range(g.out_h, g.in_h, kh, g.stride, g.pad);
                    for kw in 0..g.kernel_w {
                        let wv = wk[kh * g.kernel_w + kw];
                        let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, kw, g.stride, g.pad);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let row = &src[ih * g.in_w..][..g.in_w];
                            let drow = &mut dst[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * g.stride + kw - g.pad;
                                drow[ow] += row[iw] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates into `dx` (when given), `dw` and `db`.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    if let Some(db) = db {
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                let gy = &dy[(n * g.out_channels + o) * out_plane..][..out_plane];
                db[o] += gy.iter().sum::<f64>();
            }
        }
    }
    let mut dw = dw;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let gy = &dy[(n * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let src = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
                let wbase = (o * g.in_channels + c) * ksize;
                for kh in 0..g.kernel_h {
                    let (oh_lo, oh_hi) = valid_range(g.out_h, g.in_h, kh, g.stride, g.pad);
                    for kw in 0..g.kernel_w {
                        let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, kw, g.stride, g.pad);
                        let wv = w[wbase + kh * g.kernel_w + kw];
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.pad;
                            let row = &src[ih * g.in_w..][..g.in_w];
                            let grow = &gy[oh * g.out_w..][..g.out_w];
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxrow =
                                    &mut dx[(n * g.in_channels + c) * in_plane + ih * g.in_w..]
                                        [..g.in_w];
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kw - g.pad;
                                    acc += grow[ow] * row[iw];
                                    dxrow[iw] += grow[ow] * wv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kw - g.pad;
                                    acc += grow[ow] * row[iw];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wbase + kh * g.kernel_w + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution; weight layout is `[in_channels, out_channels, kh, kw]`.
pub fn conv_transpose2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let dst = &mut out[(n * g.out_channels + o) * out_plane..][..out_plane];
            dst.fill(b[o]);
            for c in 0..g.in_channels {
                let src = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
                let wk = &w[(c * g.out_channels + o) * ksize..][..ksize];
                for kh in 0..g.kernel_h {
                    // output row oh = ih * stride + kh - pad; valid ih are those mapping into [0, out_h)
                    let (ih_lo, ih_hi) = valid_range(g.in_h, g.out_h, kh, g.stride, g.pad);
                    for kw in 0..g.kernel_w {
                        let wv = wk[kh * g.kernel_w + kw];
                        let (iw_lo, iw_hi) = valid_range(g.in_w, g.out_w, kw, g.stride, g.pad);
                        for ih in ih_lo..ih_hi {
                            let oh = ih * g.stride + kh - g.pad;
                            let row = &src[ih * g.in_w..][..g.in_w];
                            let drow = &mut dst[oh * g.out_w..][..g.out_w];
                            for iw in iw_lo..iw_hi {
                                let ow = iw * g.stride + kw - g.pad;
                                drow[ow] += row[iw] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_transpose2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let ksize = g.kernel_h * g.kernel_w;
    if let Some(db) = db {
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                let gy = &dy[(n * g.out_channels + o) * out_plane..][..out_plane];
                db[o] += gy.iter().sum::<f64>();
            }
        }
    }
    let mut dw = dw;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            let gy = &dy[(n * g.out_channels + o) * out_plane..][..out_plane];
            for c in 0..g.in_channels {
                let src = &x[(n * g.in_channels + c) * in_plane..][..in_plane];
                let wbase = (c * g.out_channels + o) * ksize;
                for kh in 0..g.kernel_h {
                    let (ih_lo, ih_hi) = valid_range(g.in_h, g.out_h, kh, g.stride, g.pad);
                    for kw in 0..g.kernel_w {
                        let (iw_lo, iw_hi) = valid_range(g.in_w, g.out_w, kw, g.stride, g.pad);
                        let wv = w[wbase + kh * g.kernel_w + kw];
                        let mut acc = 0.0;
                        for ih in ih_lo..ih_hi {
                            let oh = ih * g.stride + kh - g.pad;
                            let row = &src[ih * g.in_w..][..g.in_w];
                            let grow = &gy[oh * g.out_w..][..g.out_w];
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxrow =
                                    &mut dx[(n * g.in_channels + c) * in_plane + ih * g.in_w..]
                                        [..g.in_w];
                                for iw in iw_lo..iw_hi {
                                    let ow = iw * g.stride + kw - g.pad;
                                    acc += grow[ow] * row[iw];
                                    dxrow[iw] += grow[ow] * wv;
                                }
                            } else {
                                for iw in iw_lo..iw_hi {
                                    let ow = iw * g.stride + kw - g.pad;
                                    acc += grow[ow] * row[iw];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[wbase + kh * g.kernel_w + kw] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// `y[n, o] = b[o] + Σ_i x[n, i] · w[o, i]`, summed in increasing `i`.
pub fn dense_forward(batch: usize, inp: usize, outp: usize, x: &[f64], w: &[f64], b: &[f64], y: &mut [f64]) {
    for n in 0..batch {
        let xr = &x[n * inp..][..inp];
        for o in 0..outp {
            let wr = &w[o * inp..][..inp];
            let mut acc = b[o];
            for i in 0..inp {
                acc += xr[i] * wr[i];
            }
            y[n * outp + o] = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    batch: usize,
    inp: usize,
    outp: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    for n in 0..batch {
        let xr = &x[n * inp..][..inp];
        for o in 0..outp {
            let g = dy[n * outp + o];
            let wr = &w[o * inp..][..inp];
            if let Some(db) = db.as_deref_mut() {
                db[o] += g;
            }
            if let Some(dw) = dw.as_deref_mut() {
                let dwr = &mut dw[o * inp..][..inp];
                for i in 0..inp {
                    dwr[i] += g * xr[i];
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxr = &mut dx[n * inp..][..inp];
                for i in 0..inp {
                    dxr[i] += g * wr[i];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(conv_out_extent(28, 4, 2, 1), Some(14));
        assert_eq!(conv_out_extent(14, 4, 2, 1), Some(7));
        assert_eq!(conv_out_extent(7, 7, 1, 0), Some(1));
        assert_eq!(conv_out_extent(7, 4, 2, 0), None);
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
        assert_eq!(conv_transpose_out_extent(1, 7, 1, 0), Some(7));
        assert_eq!(conv_transpose_out_extent(7, 4, 2, 1), Some(14));
        assert_eq!(conv_transpose_out_extent(14, 4, 2, 1), Some(28));
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for input in 1..7 {
            for k in 0..5 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        for out in 1..9 {
                            let (lo, hi) = valid_range(out, input, k, stride, pad);
                            let brute: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + k) as isize - pad as isize;
                                    i >= 0 && (i as usize) < input
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "in={input} k={k} s={stride} p={pad} out={out}");
                        }
                    }
                }
            }
        }
    }
}
