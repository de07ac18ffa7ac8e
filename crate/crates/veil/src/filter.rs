//! Convolution and resampling primitives shared by the toy models, the noise
//! layer, and the distortion bank.
//!
//! All spatial filters use reflect padding (mirror about the edge pixel, edge
//! not repeated), which requires `pad <= dim - 1`. Adjoints are exact
//! transposes of the forward operators, implemented by scatter-add; the toy
//! models' hand-written backward passes rely on that exactness.

use ndarray::{Array1, Array2, Array3, Array4};

use crate::error::{Result, VeilError};
use crate::tensor::Tensor;

/// Mirror an out-of-range index back into `[0, n)`. Requires `n >= 1` and
/// `|overshoot| <= n - 1`.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    debug_assert!(r >= 0 && r < n, "reflect pad wider than image");
    r as usize
}

fn check_kernel(k: usize, h: usize, w: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(VeilError::Parameter(format!(
            "kernel size must be odd and >= 1, got {k}"
        )));
    }
    let pad = (k - 1) / 2;
    if pad >= h.max(1) || pad >= w.max(1) {
        return Err(VeilError::Parameter(format!(
            "kernel {k} too large for {h}x{w} image under reflect padding"
        )));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps of odd length `k`.
pub(crate) fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    assert!(k % 2 == 1 && k >= 1);
    if k == 1 {
        return vec![1.0];
    }
    let c = (k - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..k)
        .map(|i| (-0.5 * ((i as f64 - c) / sigma).powi(2)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

pub(crate) fn box_kernel(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Blur sigma used when only a kernel size is given (the OpenCV convention).
pub(crate) fn sigma_for_kernel(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn conv1d_axis(x: &Tensor, taps: &[f64], axis_h: bool) -> Tensor {
    let (c, h, w) = x.dim();
    let k = taps.len();
    let pad = (k - 1) as isize / 2;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as isize - pad;
                    let v = if axis_h {
                        x[[ch, reflect_index(i as isize + off, h), j]]
                    } else {
                        x[[ch, i, reflect_index(j as isize + off, w)]]
                    };
                    acc += tap * v;
                }
                out[[ch, i, j]] = acc;
            }
        }
    }
    out
}

fn conv1d_axis_adjoint(g: &Tensor, taps: &[f64], axis_h: bool) -> Tensor {
    let (c, h, w) = g.dim();
    let k = taps.len();
    let pad = (k - 1) as isize / 2;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let gv = g[[ch, i, j]];
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as isize - pad;
                    if axis_h {
                        out[[ch, reflect_index(i as isize + off, h), j]] += tap * gv;
                    } else {
                        out[[ch, i, reflect_index(j as isize + off, w)]] += tap * gv;
                    }
                }
            }
        }
    }
    out
}

/// Separable per-channel convolution with the same 1-D taps along both axes.
pub(crate) fn conv_separable_reflect(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let (_, h, w) = x.dim();
    check_kernel(taps.len(), h, w)?;
    if taps.len() == 1 {
        return Ok(x.mapv(|v| v * taps[0]));
    }
    Ok(conv1d_axis(&conv1d_axis(x, taps, true), taps, false))
}

/// Exact adjoint of [`conv_separable_reflect`].
pub(crate) fn conv_separable_reflect_adjoint(g: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let (_, h, w) = g.dim();
    check_kernel(taps.len(), h, w)?;
    if taps.len() == 1 {
        return Ok(g.mapv(|v| v * taps[0]));
    }
    Ok(conv1d_axis_adjoint(
        &conv1d_axis_adjoint(g, taps, false),
        taps,
        true,
    ))
}

/// Dense 2-D cross-correlation, reflect padding, stride 1.
/// Weights are `(c_out, c_in, kh, kw)` with odd `kh`, `kw`.
pub(crate) fn conv2d_reflect(x: &Tensor, weights: &Array4<f64>, bias: &Array1<f64>) -> Result<Tensor> {
    let (c_in, h, w) = x.dim();
    let (c_out, wc_in, kh, kw) = weights.dim();
    if wc_in != c_in {
        return Err(VeilError::Parameter(format!(
            "conv weights expect {wc_in} input channels, image has {c_in}"
        )));
    }
    check_kernel(kh, h, w)?;
    check_kernel(kw, h, w)?;
    let (ph, pw) = ((kh as isize - 1) / 2, (kw as isize - 1) / 2);
    let mut out = Array3::zeros((c_out, h, w));
    for o in 0..c_out {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for ci in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let yi = reflect_index(i as isize + dy as isize - ph, h);
                            let xi = reflect_index(j as isize + dx as isize - pw, w);
                            acc += weights[[o, ci, dy, dx]] * x[[ci, yi, xi]];
                        }
                    }
                }
                out[[o, i, j]] = acc;
            }
        }
    }
    Ok(out)
}

/// Input-gradient of [`conv2d_reflect`]: scatters the cotangent back through
/// the taps and the reflect map. `input_channels` names the gradient's
/// channel count (the conv may change channel counts).
pub(crate) fn conv2d_reflect_vjp_input(
    cotangent: &Tensor,
    weights: &Array4<f64>,
) -> Result<Tensor> {
    let (c_out, h, w) = cotangent.dim();
    let (wc_out, c_in, kh, kw) = weights.dim();
    if wc_out != c_out {
        return Err(VeilError::Parameter(format!(
            "conv weights produce {wc_out} channels, cotangent has {c_out}"
        )));
    }
    check_kernel(kh, h, w)?;
    check_kernel(kw, h, w)?;
    let (ph, pw) = ((kh as isize - 1) / 2, (kw as isize - 1) / 2);
    let mut out = Array3::zeros((c_in, h, w));
    for o in 0..c_out {
        for i in 0..h {
            for j in 0..w {
                let gv = cotangent[[o, i, j]];
                for ci in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let yi = reflect_index(i as isize + dy as isize - ph, h);
                            let xi = reflect_index(j as isize + dx as isize - pw, w);
                            out[[ci, yi, xi]] += weights[[o, ci, dy, dx]] * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resize to `(oh, ow)` with pixel-center alignment. Identity when
/// the size is unchanged.
pub(crate) fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = x.dim();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let mut out = Array3::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for ch in 0..c {
        for i in 0..oh {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for j in 0..ow {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let top = x[[ch, y0, x0]] * (1.0 - tx) + x[[ch, y0, x1]] * tx;
                let bot = x[[ch, y1, x0]] * (1.0 - tx) + x[[ch, y1, x1]] * tx;
                out[[ch, i, j]] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

/// Adaptive average pooling to a fixed `bins x bins` grid per channel,
/// flattened in (channel, bin_row, bin_col) order.
pub(crate) fn adaptive_avg_pool(x: &Tensor, bins: usize) -> Array1<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array1::zeros(c * bins * bins);
    for ch in 0..c {
        for by in 0..bins {
            let y0 = by * h / bins;
            let y1 = ((by + 1) * h / bins).max(y0 + 1).min(h);
            for bx in 0..bins {
                let x0 = bx * w / bins;
                let x1 = ((bx + 1) * w / bins).max(x0 + 1).min(w);
                let mut acc = 0.0;
                for i in y0..y1 {
                    for j in x0..x1 {
                        acc += x[[ch, i, j]];
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                out[ch * bins * bins + by * bins + bx] = acc / count;
            }
        }
    }
    out
}

/// Adjoint of [`adaptive_avg_pool`].
pub(crate) fn adaptive_avg_pool_adjoint(
    g: &Array1<f64>,
    shape: (usize, usize, usize),
    bins: usize,
) -> Tensor {
    let (c, h, w) = shape;
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for by in 0..bins {
            let y0 = by * h / bins;
            let y1 = ((by + 1) * h / bins).max(y0 + 1).min(h);
            for bx in 0..bins {
                let x0 = bx * w / bins;
                let x1 = ((bx + 1) * w / bins).max(x0 + 1).min(w);
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let gv = g[ch * bins * bins + by * bins + bx] / count;
                for i in y0..y1 {
                    for j in x0..x1 {
                        out[[ch, i, j]] += gv;
                    }
                }
            }
        }
    }
    out
}

/// Flatten an image into a column vector in standard order.
pub(crate) fn flatten(x: &Tensor) -> Array1<f64> {
    Array1::from_iter(x.iter().copied())
}

pub(crate) fn unflatten(v: &Array1<f64>, shape: (usize, usize, usize)) -> Tensor {
    Array3::from_shape_vec(shape, v.to_vec()).expect("length matches shape")
}

/// Dense matrix-vector product, fixed accumulation order.
pub(crate) fn matvec(m: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let (rows, cols) = m.dim();
    debug_assert_eq!(cols, v.len());
    let mut out = Array1::zeros(rows);
    for r in 0..rows {
        let mut acc = 0.0;
        for c in 0..cols {
            acc += m[[r, c]] * v[c];
        }
        out[r] = acc;
    }
    out
}

/// `m^T v`, fixed accumulation order.
pub(crate) fn matvec_t(m: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let (rows, cols) = m.dim();
    debug_assert_eq!(rows, v.len());
    let mut out = Array1::zeros(cols);
    for r in 0..rows {
        let scale = v[r];
        for c in 0..cols {
            out[c] += m[[r, c]] * scale;
        }
    }
    out
}
