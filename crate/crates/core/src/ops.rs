//! Numeric primitives with exact forward and backward semantics.
//!
//! Layout is channels-first `[N, C, H, W]` everywhere. Every reduction runs
//! in a fixed order per output element, so results are bit-reproducible
//! regardless of how many rayon workers evaluate the batch.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;

/// `c += a · b` for row-major `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
///
/// Each `c[i,j]` accumulates over `t = 0..k` in ascending order.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` for `a: [k,m]`, `b: [k,n]`, `c: [m,n]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for t in 0..k {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = a[t * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = a · bᵀ` for `a: [m,k]`, `b: [n,k]`, `c: [m,n]`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
}

pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
        _ => return Err(Error::dim("matmul", a.shape(), b.shape())),
    };
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::Shape {
            op: "conv2d_valid",
            shape: input.shape().to_vec(),
            reason: "input must be [N,C,H,W]",
        });
    };
    if h < KERNEL || w < KERNEL {
        return Err(Error::Shape {
            op: "conv2d_valid",
            shape: input.shape().to_vec(),
            reason: "spatial extent below 3",
        });
    }
    match kernels.shape() {
        &[k, kc, KERNEL, KERNEL] if kc == c => Ok((n, c, h, w, k)),
        _ => Err(Error::dim("conv2d_valid", input.shape(), kernels.shape())),
    }
}

/// Unfolds one `[C,H,W]` sample into `[C·9, Ho·Wo]` patch columns.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let (ho, wo) = (h - 2, w - 2);
    let plane = ho * wo;
    for ch in 0..c {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = (ch * 9 + dy * 3 + dx) * plane;
                for y in 0..ho {
                    let src = ch * h * w + (y + dy) * w + dx;
                    cols[row + y * wo..row + (y + 1) * wo].copy_from_slice(&x[src..src + wo]);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx_out: &mut [T]) {
    let (ho, wo) = (h - 2, w - 2);
    let plane = ho * wo;
    for ch in 0..c {
        for dy in 0..KERNEL {
            for dx in 0..KERNEL {
                let row = (ch * 9 + dy * 3 + dx) * plane;
                for y in 0..ho {
                    let dst = ch * h * w + (y + dy) * w + dx;
                    let src = &cols[row + y * wo..row + (y + 1) * wo];
                    for (d, &s) in dx_out[dst..dst + wo].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Valid (unpadded), stride-1 3×3 convolution.
pub fn conv2d_valid<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w, k) = conv_dims(input, kernels)?;
    if bias.shape() != [k] {
        return Err(Error::dim("conv2d_valid bias", kernels.shape(), bias.shape()));
    }
    let (ho, wo) = (h - 2, w - 2);
    let plane = ho * wo;
    let in_sz = c * h * w;
    let mut out = vec![T::zero(); n * k * plane];
    out.par_chunks_mut(k * plane)
        .enumerate()
        .for_each(|(i, out_n)| {
            let mut cols = vec![T::zero(); c * 9 * plane];
            im2col(&input.data()[i * in_sz..(i + 1) * in_sz], c, h, w, &mut cols);
            for (kk, row) in out_n.chunks_mut(plane).enumerate() {
                row.fill(bias.data()[kk]);
            }
            gemm_acc(kernels.data(), &cols, out_n, k, c * 9, plane);
        });
    Tensor::new(&[n, k, ho, wo], out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of `Σ(conv2d_valid(input, kernels, ·) ⊙ grad_out)`.
pub fn conv2d_valid_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_backward_impl(input, kernels, grad_out, true)?;
    Ok((g.input.expect("requested"), g.kernels, g.bias))
}

pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w, k) = conv_dims(input, kernels)?;
    let (ho, wo) = (h - 2, w - 2);
    if grad_out.shape() != [n, k, ho, wo] {
        return Err(Error::dim(
            "conv2d_valid_backward",
            &[n, k, ho, wo],
            grad_out.shape(),
        ));
    }
    let plane = ho * wo;
    let in_sz = c * h * w;
    let ck = c * 9;

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &input.data()[i * in_sz..(i + 1) * in_sz];
            let go = &grad_out.data()[i * k * plane..(i + 1) * k * plane];

            let mut cols = vec![T::zero(); ck * plane];
            im2col(x, c, h, w, &mut cols);
            let cols_t = transpose(&cols, ck, plane);
            let mut dk = vec![T::zero(); k * ck];
            gemm_acc(go, &cols_t, &mut dk, k, plane, ck);

            let db: Vec<T> = go.chunks(plane).map(|r| r.iter().copied().sum()).collect();

            let mut dx = Vec::new();
            if need_input {
                let mut dcols = vec![T::zero(); ck * plane];
                gemm_tn_acc(kernels.data(), go, &mut dcols, k, ck, plane);
                dx = vec![T::zero(); in_sz];
                col2im(&dcols, c, h, w, &mut dx);
            }
            (dk, db, dx)
        })
        .collect();

    let mut dk = vec![T::zero(); k * ck];
    let mut db = vec![T::zero(); k];
    let mut dx = Vec::with_capacity(if need_input { n * in_sz } else { 0 });
    for (sk, sb, sx) in per_sample {
        for (a, b) in dk.iter_mut().zip(sk) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(sb) {
            *a += b;
        }
        dx.extend(sx);
    }
    Ok(ConvGrads {
        input: if need_input {
            Some(Tensor::new(input.shape(), dx)?)
        } else {
            None
        },
        kernels: Tensor::new(kernels.shape(), dk)?,
        bias: Tensor::new(&[k], db)?,
    })
}

/// Winning input position of every 2×2 pooling window.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolMask {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    /// Flat row-major index into the input, one per output element.
    argmax: Vec<usize>,
}

impl PoolMask {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// 2×2 max pooling with stride 2; an odd trailing row or column is dropped.
/// Ties resolve to the first position in row-major scan order.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolMask)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::Shape {
            op: "maxpool2",
            shape: input.shape().to_vec(),
            reason: "input must be [N,C,H,W]",
        });
    };
    if h < 2 || w < 2 {
        return Err(Error::Shape {
            op: "maxpool2",
            shape: input.shape().to_vec(),
            reason: "spatial extent below 2",
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = base + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let output_shape = vec![n, c, ho, wo];
    Ok((
        Tensor::new(&output_shape, out)?,
        PoolMask {
            input_shape: input.shape().to_vec(),
            output_shape,
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(mask: &PoolMask, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != mask.output_shape.as_slice() {
        return Err(Error::dim("maxpool2_backward", &mask.output_shape, grad_out.shape()));
    }
    let mut grad = Tensor::zeros(&mask.input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in mask.argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::dim("relu_backward", x.shape(), grad_out.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Row-wise softmax over two logits, shifted by the row max.
pub fn softmax2<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, 2] = logits.shape() else {
        return Err(Error::Shape {
            op: "softmax2",
            shape: logits.shape().to_vec(),
            reason: "logits must be [N,2]",
        });
    };
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax2"));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(2) {
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let s = e0 + e1;
        out.push(e0 / s);
        out.push(e1 / s);
    }
    Tensor::new(logits.shape(), out)
}

/// Align-corners bilinear resize of a 2-D map.
pub fn bilinear_resize<T: Scalar>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let &[h, w] = map.shape() else {
        return Err(Error::Shape {
            op: "bilinear_resize",
            shape: map.shape().to_vec(),
            reason: "map must be 2-D",
        });
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "bilinear_resize output extent must be positive, got {out_h}x{out_w}"
        )));
    }
    let data = resize_plane(map.data(), h, w, out_h, out_w);
    Tensor::new(&[out_h, out_w], data)
}

/// Resizes each channel of a `[C,H,W]` tensor.
pub fn bilinear_resize_channels<T: Scalar>(
    img: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Shape {
            op: "bilinear_resize_channels",
            shape: img.shape().to_vec(),
            reason: "image must be [C,H,W]",
        });
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "bilinear_resize output extent must be positive, got {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for plane in img.data().chunks(h * w) {
        data.extend(resize_plane(plane, h, w, out_h, out_w));
    }
    Tensor::new(&[c, out_h, out_w], data)
}

fn axis_samples(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst > 1 && src > 1 {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn resize_plane<T: Scalar>(src: &[T], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let ys = axis_samples(h, out_h);
    let xs = axis_samples(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let p = |y: usize, x: usize| src[y * w + x].as_f64();
            let top = if fx == 0.0 { p(y0, x0) } else { p(y0, x0) + fx * (p(y0, x1) - p(y0, x0)) };
            let v = if fy == 0.0 {
                top
            } else {
                let bot = if fx == 0.0 { p(y1, x0) } else { p(y1, x0) + fx * (p(y1, x1) - p(y1, x0)) };
                top + fy * (bot - top)
            };
            out.push(T::from_f64(v));
        }
    }
    out
}
