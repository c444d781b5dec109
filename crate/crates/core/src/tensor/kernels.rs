//! Raw numeric kernels over flat NCHW buffers. No shape validation here;
//! callers in `graph` check shapes first.

use matrixmultiply::dgemm;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ohw..(row + 1) * ohw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, col: &[f64], grad_input: &mut [f64]) {
    let ohw = g.out_hw();
    for c in 0..g.c {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ohw..(row + 1) * ohw];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `C[m x n] = alpha * A[m x k] * B[k x n] + beta * C`, all row-major
/// unless custom strides are passed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    // SAFETY: the strides describe matrices that lie entirely within the
    // given slices; every caller derives them from the same ConvGeom.
    unsafe {
        dgemm(
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

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let rows = g.col_rows();
    let ohw = g.out_hw();
    let mut out = vec![0.0; g.n * g.k * ohw];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; rows * ohw]
    };
    for b in 0..g.n {
        let x = &input[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let cols: &[f64] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        let y = &mut out[b * g.k * ohw..(b + 1) * g.k * ohw];
        if let Some(bias) = bias {
            for (kk, chunk) in y.chunks_mut(ohw).enumerate() {
                chunk.fill(bias[kk]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            g.k,
            rows,
            ohw,
            weight,
            (rows as isize, 1),
            cols,
            (ohw as isize, 1),
            beta,
            y,
        );
    }
    out
}

/// Accumulates gradients for input, weight and bias into the given buffers.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let rows = g.col_rows();
    let ohw = g.out_hw();
    let in_per = g.c * g.h * g.w;
    if let Some(gb) = grad_bias {
        for b in 0..g.n {
            let dy = &grad_out[b * g.k * ohw..(b + 1) * g.k * ohw];
            for (kk, chunk) in dy.chunks(ohw).enumerate() {
                gb[kk] += chunk.iter().sum::<f64>();
            }
        }
    }
    if let Some(gw) = grad_weight {
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * ohw]
        };
        for b in 0..g.n {
            let x = &input[b * in_per..(b + 1) * in_per];
            let cols: &[f64] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut col);
                &col
            };
            let dy = &grad_out[b * g.k * ohw..(b + 1) * g.k * ohw];
            // dW[k x rows] += dY[k x ohw] * cols^T
            gemm(
                g.k,
                ohw,
                rows,
                dy,
                (ohw as isize, 1),
                cols,
                (1, ohw as isize),
                1.0,
                gw,
            );
        }
    }
    if let Some(gi) = grad_input {
        let mut dcol = vec![0.0; rows * ohw];
        for b in 0..g.n {
            let dy = &grad_out[b * g.k * ohw..(b + 1) * g.k * ohw];
            let dx = &mut gi[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                // dX[rows x ohw] += W^T * dY
                gemm(
                    rows,
                    g.k,
                    ohw,
                    weight,
                    (1, rows as isize),
                    dy,
                    (ohw as isize, 1),
                    1.0,
                    dx,
                );
            } else {
                gemm(
                    rows,
                    g.k,
                    ohw,
                    weight,
                    (1, rows as isize),
                    dy,
                    (ohw as isize, 1),
                    0.0,
                    &mut dcol,
                );
                col2im_add(g, &dcol, dx);
            }
        }
    }
}

/// Max pooling; returns output values and the flat input index of each max.
pub(crate) fn maxpool_forward(
    (n, c, h, w): (usize, usize, usize, usize),
    size: usize,
    stride: usize,
    input: &[f64],
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + oh * stride * w + ow * stride;
                for i in 0..size {
                    let row = base + (oh * stride + i) * w + ow * stride;
                    for j in 0..size {
                        let v = input[row + j];
                        // strict comparison keeps the first occurrence on ties
                        if v > best {
                            best = v;
                            best_idx = row + j;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, ho, wo)
}

/// Source taps for half-pixel (align_corners = false) bilinear resampling
/// along one axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, scale: usize) -> Vec<Tap> {
    (0..in_len * scale)
        .map(|o| {
            let src = ((o as f64 + 0.5) / scale as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

pub(crate) fn upsample_forward(
    (n, c, h, w): (usize, usize, usize, usize),
    scale: usize,
    input: &[f64],
) -> Vec<f64> {
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let (ho, wo) = (h * scale, w * scale);
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for (oy, ay) in ty.iter().enumerate() {
            let r0 = &src[ay.i0 * w..(ay.i0 + 1) * w];
            let r1 = &src[ay.i1 * w..(ay.i1 + 1) * w];
            for (ox, ax) in tx.iter().enumerate() {
                let top = ax.w0 * r0[ax.i0] + ax.w1 * r0[ax.i1];
                let bot = ax.w0 * r1[ax.i0] + ax.w1 * r1[ax.i1];
                dst[oy * wo + ox] = ay.w0 * top + ay.w1 * bot;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    (n, c, h, w): (usize, usize, usize, usize),
    scale: usize,
    grad_out: &[f64],
    grad_input: &mut [f64],
) {
    let ty = bilinear_taps(h, scale);
    let tx = bilinear_taps(w, scale);
    let (ho, wo) = (h * scale, w * scale);
    for plane in 0..n * c {
        let dy = &grad_out[plane * ho * wo..(plane + 1) * ho * wo];
        let dx = &mut grad_input[plane * h * w..(plane + 1) * h * w];
        for (oy, ay) in ty.iter().enumerate() {
            for (ox, ax) in tx.iter().enumerate() {
                let g = dy[oy * wo + ox];
                dx[ay.i0 * w + ax.i0] += g * ay.w0 * ax.w0;
                dx[ay.i0 * w + ax.i1] += g * ay.w0 * ax.w1;
                dx[ay.i1 * w + ax.i0] += g * ay.w1 * ax.w0;
                dx[ay.i1 * w + ax.i1] += g * ay.w1 * ax.w1;
            }
        }
    }
}
