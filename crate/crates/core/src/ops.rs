//! Forward and backward kernels for the differentiable operations.
//!
//! These are plain functions over [`Tensor`] values; the tape in
//! [`crate::autograd`] wires them together. Convolutions go through
//! im2col and a blocked GEMM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, all row-major
/// unless strides say otherwise.
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
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().take(m * n).for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the callers size `a`, `b` and `c` for the given dimensions
    // and strides; `c` is an exclusive borrow so it cannot alias.
    unsafe {
        matrixmultiply::dgemm(
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

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn out_dim(op: &'static str, size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("kernel {k} larger than padded input {padded}"),
        ));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::shape(
            op,
            format!("output size ({size} + 2*{padding} - {k}) / {stride} + 1 is not integral"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Validates conv2d operands and returns `(n, cout, geometry)`.
pub fn conv2d_geometry(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, ConvGeometry)> {
    let (n, cin, h, w) = input.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = weight.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight {:?} expects {wcin} input channels but input {:?} has {cin}",
                weight.shape(),
                input.shape()
            ),
        ));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::invalid("weight", "kernel dims must be >= 1"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride", "must be >= 1"));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match {cout} output channels", bias.shape()),
        ));
    }
    let out_h = out_dim("conv2d", h, kh, stride, padding)?;
    let out_w = out_dim("conv2d", w, kw, stride, padding)?;
    Ok((
        n,
        cout,
        ConvGeometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        },
    ))
}

fn im2col(image: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.cin {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let p = g.out_len();
    for c in 0..g.cin {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with per-output-channel bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, cout, g) = conv2d_geometry(input, weight, bias, stride, padding)?;
    let in_len = g.cin * g.h * g.w;
    let p = g.out_len();
    let k = g.patch_len();
    let mut out = vec![0.0; n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let image = &input.data()[s * in_len..(s + 1) * in_len];
        let dst = &mut out[s * cout * p..(s + 1) * cout * p];
        for (co, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        let b = if g.is_pointwise() {
            image
        } else {
            im2col(image, &g, &mut cols);
            &cols
        };
        gemm(cout, k, p, weight.data(), (k as isize, 1), b, (p as isize, 1), 1.0, dst);
    }
    Tensor::new([n, cout, g.out_h, g.out_w], out)
}

/// Gradients `(input, weight, bias)`; the input part only when requested.
pub type ConvGrads = (Option<Vec<f64>>, Vec<f64>, Vec<f64>);

/// Gradients of [`conv2d`]. `grad_input` is skipped when `want_input` is false.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
    want_input: bool,
) -> Result<ConvGrads> {
    let (n, cout, g) = conv2d_geometry(input, weight, bias, stride, padding)?;
    let in_len = g.cin * g.h * g.w;
    let p = g.out_len();
    let k = g.patch_len();
    let mut grad_w = vec![0.0; cout * k];
    let mut grad_b = vec![0.0; cout];
    let mut grad_in = want_input.then(|| vec![0.0; n * in_len]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let mut dcols = if want_input && !g.is_pointwise() {
        vec![0.0; k * p]
    } else {
        Vec::new()
    };
    for s in 0..n {
        let image = &input.data()[s * in_len..(s + 1) * in_len];
        let gout = &grad_out[s * cout * p..(s + 1) * cout * p];
        for (co, row) in gout.chunks(p).enumerate() {
            grad_b[co] += row.iter().sum::<f64>();
        }
        let b = if g.is_pointwise() {
            image
        } else {
            im2col(image, &g, &mut cols);
            &cols
        };
        // dW += dY * cols^T
        gemm(cout, p, k, gout, (p as isize, 1), b, (1, p as isize), 1.0, &mut grad_w);
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    k,
                    cout,
                    p,
                    weight.data(),
                    (1, k as isize),
                    gout,
                    (p as isize, 1),
                    1.0,
                    dst,
                );
            } else {
                gemm(
                    k,
                    cout,
                    p,
                    weight.data(),
                    (1, k as isize),
                    gout,
                    (p as isize, 1),
                    0.0,
                    &mut dcols,
                );
                col2im_add(&dcols, &g, dst);
            }
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

fn conv_transpose_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4("conv_transpose2d")?;
    let (wcin, cout, kh, kw) = weight.dims4("conv_transpose2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv_transpose2d",
            format!(
                "weight {:?} expects {wcin} input channels but input {:?} has {cin}",
                weight.shape(),
                input.shape()
            ),
        ));
    }
    if (kh, kw) != (2, 2) {
        return Err(Error::invalid(
            "weight",
            format!("transposed convolution supports 2x2 kernels with stride 2, got {kh}x{kw}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("bias {:?} does not match {cout} output channels", bias.shape()),
        ));
    }
    Ok((n, cin, cout, h, w))
}

/// Stride-2, 2x2 transposed convolution; weight layout `[cin, cout, 2, 2]`.
pub fn conv_transpose2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, cin, cout, h, w) = conv_transpose_dims(input, weight, bias)?;
    let p = h * w;
    let rows = cout * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * cout * oh * ow];
    let mut taps = vec![0.0; rows * p];
    for s in 0..n {
        let x = &input.data()[s * cin * p..(s + 1) * cin * p];
        // taps[(co, a, b), pixel] = sum_ci w[ci, co, a, b] * x[ci, pixel]
        gemm(
            rows,
            cin,
            p,
            weight.data(),
            (1, rows as isize),
            x,
            (p as isize, 1),
            0.0,
            &mut taps,
        );
        let dst = &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow];
        for co in 0..cout {
            let bias_v = bias.data()[co];
            let plane = &mut dst[co * oh * ow..(co + 1) * oh * ow];
            for a in 0..2 {
                for b in 0..2 {
                    let tap = &taps[(co * 4 + a * 2 + b) * p..(co * 4 + a * 2 + b + 1) * p];
                    for i in 0..h {
                        let line = &mut plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..w {
                            line[2 * j + b] = tap[i * w + j] + bias_v;
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, cout, oh, ow], out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    grad_out: &[f64],
    want_input: bool,
) -> Result<ConvGrads> {
    let (n, cin, cout, h, w) = conv_transpose_dims(input, weight, bias)?;
    let p = h * w;
    let rows = cout * 4;
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad_w = vec![0.0; cin * rows];
    let mut grad_b = vec![0.0; cout];
    let mut grad_in = want_input.then(|| vec![0.0; n * cin * p]);
    let mut dtaps = vec![0.0; rows * p];
    for s in 0..n {
        let gout = &grad_out[s * cout * oh * ow..(s + 1) * cout * oh * ow];
        for co in 0..cout {
            let plane = &gout[co * oh * ow..(co + 1) * oh * ow];
            grad_b[co] += plane.iter().sum::<f64>();
            for a in 0..2 {
                for b in 0..2 {
                    let tap = &mut dtaps[(co * 4 + a * 2 + b) * p..(co * 4 + a * 2 + b + 1) * p];
                    for i in 0..h {
                        let line = &plane[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                        for j in 0..w {
                            tap[i * w + j] = line[2 * j + b];
                        }
                    }
                }
            }
        }
        let x = &input.data()[s * cin * p..(s + 1) * cin * p];
        // dW[ci, r] += sum_pixel x[ci, pixel] * dtaps[r, pixel]
        gemm(
            cin,
            p,
            rows,
            x,
            (p as isize, 1),
            &dtaps,
            (1, p as isize),
            1.0,
            &mut grad_w,
        );
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[s * cin * p..(s + 1) * cin * p];
            gemm(
                cin,
                rows,
                p,
                weight.data(),
                (rows as isize, 1),
                &dtaps,
                (p as isize, 1),
                0.0,
                dst,
            );
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

/// 2x2 max pooling with stride 2. Returns the output and, per output
/// element, the flat input index of the selected maximum (first in scan
/// order on ties).
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2d", format!("spatial dims {h}x{w} must be even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} and {:?} differ outside the channel axis", a.shape(), b.shape()),
        ));
    }
    let (la, lb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (la + lb));
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * la..(s + 1) * la]);
        out.extend_from_slice(&b.data()[s * lb..(s + 1) * lb]);
    }
    Tensor::new([n, ca + cb, h, w], out)
}

/// Whether `b` broadcasts over the channels of `a` (`b` has one channel).
pub fn mul_broadcasts(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.shape() == b.shape() {
        return Ok(false);
    }
    match (a.shape(), b.shape()) {
        ([n, _, h, w], [nb, 1, hb, wb]) if (n, h, w) == (nb, hb, wb) => Ok(true),
        _ => Err(Error::shape(
            "elementwise_mul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        )),
    }
}

/// Hadamard product, broadcasting a single-channel `b` across the channels of `a`.
pub fn elementwise_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !mul_broadcasts(a, b)? {
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        return Tensor::new(a.shape(), data);
    }
    let (n, c, h, w) = a.dims4("elementwise_mul")?;
    let hw = h * w;
    let mut out = Vec::with_capacity(a.len());
    for s in 0..n {
        let gate = &b.data()[s * hw..(s + 1) * hw];
        for ch in 0..c {
            let plane = &a.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            out.extend(plane.iter().zip(gate).map(|(x, y)| x * y));
        }
    }
    Tensor::new(a.shape(), out)
}
