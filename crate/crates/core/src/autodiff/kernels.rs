//! Forward and adjoint kernels for the spatial primitives (NCHW layout).

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Output index range `[lo, hi)` along one axis for which
/// `o * stride + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= len - 1
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_ch * out_plane];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let o = &mut out[(n * g.out_ch + co) * out_plane..][..out_plane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.in_ch {
                let xin = &x[(n * g.in_ch + ci) * in_plane..][..in_plane];
                let wk = &w[(co * g.in_ch + ci) * k * k..][..k * k];
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(kh, p, s, g.in_h, g.out_h);
                    for kw in 0..k {
                        let wv = wk[kh * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ow_lo, ow_hi) = valid_range(kw, p, s, g.in_w, g.out_w);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let orow = &mut o[oh * g.out_w..][..g.out_w];
                            let xrow = &xin[ih * g.in_w..][..g.in_w];
                            if s == 1 {
                                let off = kw as isize - p as isize;
                                let src = &xrow[(ow_lo as isize + off) as usize..(ow_hi as isize + off) as usize];
                                for (dst, &xv) in orow[ow_lo..ow_hi].iter_mut().zip(src) {
                                    *dst += wv * xv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    orow[ow] += wv * xrow[ow * s + kw - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)` for upstream gradient `dy`.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = want_bias.then(|| vec![0.0; g.out_ch]);
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let go = &dy[(n * g.out_ch + co) * out_plane..][..out_plane];
            if let Some(db) = db.as_mut() {
                db[co] += go.iter().sum::<f64>();
            }
            for ci in 0..g.in_ch {
                let xoff = (n * g.in_ch + ci) * in_plane;
                let woff = (co * g.in_ch + ci) * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(kh, p, s, g.in_h, g.out_h);
                    for kw in 0..k {
                        let wv = w[woff + kh * k + kw];
                        let (ow_lo, ow_hi) = valid_range(kw, p, s, g.in_w, g.out_w);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kh - p;
                            let grow = &go[oh * g.out_w..][..g.out_w];
                            let xbase = xoff + ih * g.in_w;
                            if s == 1 {
                                let off = kw as isize - p as isize;
                                let lo = (xbase as isize + ow_lo as isize + off) as usize;
                                let hi = (xbase as isize + ow_hi as isize + off) as usize;
                                let xs = &x[lo..hi];
                                let dxs = &mut dx[lo..hi];
                                for ((&gv, &xv), dxv) in grow[ow_lo..ow_hi].iter().zip(xs).zip(dxs) {
                                    acc += gv * xv;
                                    *dxv += wv * gv;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let xi = xbase + ow * s + kw - p;
                                    let gv = grow[ow];
                                    acc += gv * x[xi];
                                    dx[xi] += wv * gv;
                                }
                            }
                        }
                        dw[woff + kh * k + kw] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with `kernel == stride` and no padding, weight
/// layout `[in_ch, out_ch, k, k]`.
pub fn conv_transpose2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let k = g.kernel;
    let s = g.stride;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.out_ch * out_plane];
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let o = &mut out[(n * g.out_ch + co) * out_plane..][..out_plane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..g.in_ch {
                let xin = &x[(n * g.in_ch + ci) * in_plane..][..in_plane];
                let wk = &w[(ci * g.out_ch + co) * k * k..][..k * k];
                for ih in 0..g.in_h {
                    for iw in 0..g.in_w {
                        let xv = xin[ih * g.in_w + iw];
                        for kh in 0..k {
                            let orow = (ih * s + kh) * g.out_w + iw * s;
                            for kw in 0..k {
                                o[orow + kw] += xv * wk[kh * k + kw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_bias: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let k = g.kernel;
    let s = g.stride;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = want_bias.then(|| vec![0.0; g.out_ch]);
    for n in 0..g.batch {
        for co in 0..g.out_ch {
            let go = &dy[(n * g.out_ch + co) * out_plane..][..out_plane];
            if let Some(db) = db.as_mut() {
                db[co] += go.iter().sum::<f64>();
            }
            for ci in 0..g.in_ch {
                let xoff = (n * g.in_ch + ci) * in_plane;
                let woff = (ci * g.out_ch + co) * k * k;
                for ih in 0..g.in_h {
                    for iw in 0..g.in_w {
                        let xi = xoff + ih * g.in_w + iw;
                        let xv = x[xi];
                        let mut acc = 0.0;
                        for kh in 0..k {
                            let orow = (ih * s + kh) * g.out_w + iw * s;
                            for kw in 0..k {
                                let gv = go[orow + kw];
                                acc += gv * w[woff + kh * k + kw];
                                dw[woff + kh * k + kw] += gv * xv;
                            }
                        }
                        dx[xi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-(sample, channel) normalization statistics saved for the adjoint.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; batch * channels];
    for n in 0..batch {
        for c in 0..channels {
            let idx = n * channels + c;
            let xs = &x[idx * plane..][..plane];
            let mean = xs.iter().sum::<f64>() / plane as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[idx] = is;
            let xh = &mut xhat[idx * plane..][..plane];
            let ys = &mut y[idx * plane..][..plane];
            for ((h, o), &v) in xh.iter_mut().zip(ys.iter_mut()).zip(xs) {
                *h = (v - mean) * is;
                *o = gamma[c] * *h + beta[c];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    dy: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let m = plane as f64;
    for n in 0..batch {
        for c in 0..channels {
            let idx = n * channels + c;
            let xh = &cache.xhat[idx * plane..][..plane];
            let g = &dy[idx * plane..][..plane];
            let sum_g: f64 = g.iter().sum();
            let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            dgamma[c] += sum_gx;
            dbeta[c] += sum_g;
            let scale = gamma[c] * cache.inv_std[idx] / m;
            let out = &mut dx[idx * plane..][..plane];
            for ((o, &gv), &h) in out.iter_mut().zip(g).zip(xh) {
                *o = scale * (m * gv - sum_g - h * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}
