//! Numeric kernels: forward and backward math for every primitive, batched
//! over a leading sample axis. Dense matmul is delegated to `matrixmultiply`;
//! convolution is im2col + gemm, chunked over samples to bound scratch memory.
//!
//! Every kernel is deterministic: summation orders are fixed and independent
//! of which other samples share the batch, so a value computed for a sample is
//! bit-identical whether the batch holds 1 row or 512.

use crate::tensor::Tensor;
use crate::{AntError, Result};

/// Scratch budget for im2col buffers. Only affects chunking, never values.
const IM2COL_SCRATCH_BYTES: usize = 128 << 20;

// ---------------------------------------------------------------------------
// gemm wrappers (row-major)
// ---------------------------------------------------------------------------

fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
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

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    dgemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c);
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
pub fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    dgemm(m, k, n, a, k as isize, 1, b, 1, k as isize, 0.0, &mut c);
    c
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    dgemm(m, k, n, a, 1, m as isize, b, n as isize, 1, 0.0, &mut c);
    c
}

/// C[m,n] += A[m,k] * B[n,k]^T
fn matmul_nt_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    dgemm(m, k, n, a, k as isize, 1, b, 1, k as isize, 1.0, c);
}

// ---------------------------------------------------------------------------
// affine
// ---------------------------------------------------------------------------

/// y[B,n] = x[B,m] * w[n,m]^T + b[n]
pub fn affine_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, m) = x.as_matrix(1);
    let n = w.shape[0];
    if w.shape.len() != 2 || w.shape[1] != m || b.shape != [n] {
        return Err(AntError::shape(
            "affine",
            format!("x {:?} w {:?} b {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let mut y = matmul_nt(&x.data, bs, m, &w.data, n);
    for r in 0..bs {
        let row = &mut y[r * n..(r + 1) * n];
        for (yv, bv) in row.iter_mut().zip(&b.data) {
            *yv += bv;
        }
    }
    Tensor::new(vec![bs, n], y)
}

/// Returns (dx, dw, db).
pub fn affine_bwd(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, m) = x.as_matrix(1);
    let n = w.shape[0];
    let dx = matmul_nn(&dy.data, bs, n, &w.data, m);
    let dw = matmul_tn(&dy.data, bs, n, &x.data, m);
    let mut db = vec![0.0; n];
    for r in 0..bs {
        for c in 0..n {
            db[c] += dy.data[r * n + c];
        }
    }
    (
        Tensor { shape: vec![bs, m], data: dx },
        Tensor { shape: vec![n, m], data: dw },
        Tensor { shape: vec![n], data: db },
    )
}

// ---------------------------------------------------------------------------
// conv2d, stride 1, same padding, odd kernel
// ---------------------------------------------------------------------------

fn conv_chunk(k: usize, c_in: usize, hw: usize) -> usize {
    let per_sample = c_in * k * k * hw * 8;
    (IM2COL_SCRATCH_BYTES / per_sample.max(1)).max(1)
}

/// cols[K, cb*H*W] for samples bs..bs+cb of x[B,C,H,W]; K = C*k*k.
fn im2col(x: &Tensor, bs: usize, cb: usize, k: usize, cols: &mut [f64]) {
    let (c_in, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
    let pad = (k - 1) / 2;
    let hw = h * w;
    let ncols = cb * hw;
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for bi in 0..cb {
                    let plane = &x.data[((bs + bi) * c_in + ci) * hw..((bs + bi) * c_in + ci + 1) * hw];
                    let base = bi * hw;
                    for y in 0..h {
                        let sy = y + ki;
                        let dst = &mut out[base + y * w..base + (y + 1) * w];
                        if sy < pad || sy >= h + pad {
                            dst.fill(0.0);
                            continue;
                        }
                        let sy = sy - pad;
                        // source x-range shifted by kj - pad, zero outside
                        for xo in 0..w {
                            let sx = xo + kj;
                            dst[xo] = if sx < pad || sx >= w + pad {
                                0.0
                            } else {
                                plane[sy * w + sx - pad]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of cols gradients back into dx for samples bs..bs+cb.
fn col2im(dcols: &[f64], dx: &mut Tensor, bs: usize, cb: usize, k: usize) {
    let (c_in, h, w) = (dx.shape[1], dx.shape[2], dx.shape[3]);
    let pad = (k - 1) / 2;
    let hw = h * w;
    let ncols = cb * hw;
    for ci in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                for bi in 0..cb {
                    let plane_off = ((bs + bi) * c_in + ci) * hw;
                    let base = bi * hw;
                    for y in 0..h {
                        let sy = y + ki;
                        if sy < pad || sy >= h + pad {
                            continue;
                        }
                        let sy = sy - pad;
                        for xo in 0..w {
                            let sx = xo + kj;
                            if sx < pad || sx >= w + pad {
                                continue;
                            }
                            dx.data[plane_off + sy * w + sx - pad] += src[base + y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

/// y[B,O,H,W] = conv(x[B,C,H,W], w[O,C,k,k]) + b[O]; stride 1, same padding.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, c_in, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    if w.shape.len() != 4 || w.shape[1] != c_in || w.shape[3] != k || k % 2 == 0 || b.shape != [o] {
        return Err(AntError::shape(
            "conv2d",
            format!("x {:?} w {:?} b {:?} (kernel must be odd, square)", x.shape, w.shape, b.shape),
        ));
    }
    let hw = h * ww;
    let kk = c_in * k * k;
    let cb_max = conv_chunk(k, c_in, hw).min(bs);
    let mut cols = vec![0.0; kk * cb_max * hw];
    let mut out = Tensor::zeros(&[bs, o, h, ww]);
    let mut start = 0;
    while start < bs {
        let cb = cb_max.min(bs - start);
        let ncols = cb * hw;
        im2col(x, start, cb, k, &mut cols[..kk * ncols]);
        let y = matmul_nn(&w.data, o, kk, &cols[..kk * ncols], ncols);
        // y[o, bi*hw + p] -> out[start+bi, o, p], plus bias
        for oi in 0..o {
            let bias = b.data[oi];
            for bi in 0..cb {
                let src = &y[oi * ncols + bi * hw..oi * ncols + (bi + 1) * hw];
                let doff = ((start + bi) * o + oi) * hw;
                for (p, v) in src.iter().enumerate() {
                    out.data[doff + p] = v + bias;
                }
            }
        }
        start += cb;
    }
    Ok(out)
}

/// Returns (dx, dw, db).
pub fn conv2d_bwd(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, c_in, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (o, k) = (w.shape[0], w.shape[2]);
    let hw = h * ww;
    let kk = c_in * k * k;
    let cb_max = conv_chunk(k, c_in, hw).min(bs);
    let mut cols = vec![0.0; kk * cb_max * hw];
    let mut dyc = vec![0.0; o * cb_max * hw];
    let mut dx = Tensor::zeros(&x.shape);
    let mut dw = Tensor::zeros(&w.shape);
    let mut db = Tensor::zeros(&[o]);
    let mut start = 0;
    while start < bs {
        let cb = cb_max.min(bs - start);
        let ncols = cb * hw;
        im2col(x, start, cb, k, &mut cols[..kk * ncols]);
        // gather dy chunk into [o, cb*hw]
        for oi in 0..o {
            for bi in 0..cb {
                let soff = ((start + bi) * o + oi) * hw;
                dyc[oi * ncols + bi * hw..oi * ncols + (bi + 1) * hw]
                    .copy_from_slice(&dy.data[soff..soff + hw]);
            }
        }
        matmul_nt_acc(&dyc[..o * ncols], o, ncols, &cols[..kk * ncols], kk, &mut dw.data);
        for oi in 0..o {
            let mut s = 0.0;
            for v in &dyc[oi * ncols..(oi + 1) * ncols] {
                s += v;
            }
            db.data[oi] += s;
        }
        let dcols = matmul_tn(&w.data, o, kk, &dyc[..o * ncols], ncols);
        col2im(&dcols, &mut dx, start, cb, k);
        start += cb;
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn relu_fwd(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

/// Subgradient at 0 is 0.
pub fn relu_bwd(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x.data.iter().zip(&dy.data).map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 }).collect();
    Tensor { shape: x.shape.clone(), data }
}

pub fn tanh_fwd(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|v| v.tanh()).collect() }
}

pub fn tanh_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data.iter().zip(&dy.data).map(|(&yv, &g)| g * (1.0 - yv * yv)).collect();
    Tensor { shape: y.shape.clone(), data }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_fwd(x: &Tensor) -> Tensor {
    Tensor { shape: x.shape.clone(), data: x.data.iter().map(|&v| sigmoid_scalar(v)).collect() }
}

pub fn sigmoid_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data.iter().zip(&dy.data).map(|(&yv, &g)| g * yv * (1.0 - yv)).collect();
    Tensor { shape: y.shape.clone(), data }
}

pub fn add_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(AntError::shape("add", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn sub_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(AntError::shape("sub", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub fn mul_fwd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(AntError::shape("mul", format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// 2x2 max pool with stride 2; odd trailing rows/columns are dropped.
/// Returns the pooled tensor and, per output element, the flat index into the
/// input of its maximum (first occurrence wins ties).
pub fn maxpool_fwd(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (bs, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(AntError::shape("maxpool2x2", format!("input {:?} too small", x.shape)));
    }
    debug_assert!(x.len() <= u32::MAX as usize);
    let mut out = Tensor::zeros(&[bs, c, h2, w2]);
    let mut arg = vec![0u32; out.len()];
    let mut oi = 0;
    for b in 0..bs {
        for ci in 0..c {
            let plane = ((b * c) + ci) * h * w;
            for y in 0..h2 {
                for xo in 0..w2 {
                    let i00 = plane + (2 * y) * w + 2 * xo;
                    let idxs = [i00, i00 + 1, i00 + w, i00 + w + 1];
                    let mut best = idxs[0];
                    for &i in &idxs[1..] {
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    out.data[oi] = x.data[best];
                    arg[oi] = best as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool_bwd(arg: &[u32], dy: &Tensor, x_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Global average pool: [B,C,H,W] -> [B,C].
pub fn gap_fwd(x: &Tensor) -> Result<Tensor> {
    if x.shape.len() != 4 {
        return Err(AntError::shape("gap", format!("need rank-4 input, got {:?}", x.shape)));
    }
    let (bs, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros(&[bs, c]);
    for i in 0..bs * c {
        let mut s = 0.0;
        for v in &x.data[i * h * w..(i + 1) * h * w] {
            s += v;
        }
        out.data[i] = s / hw;
    }
    Ok(out)
}

pub fn gap_bwd(dy: &Tensor, x_shape: &[usize]) -> Tensor {
    let (h, w) = (x_shape[2], x_shape[3]);
    let hw = (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape);
    for i in 0..dy.len() {
        let g = dy.data[i] / hw;
        dx.data[i * h * w..(i + 1) * h * w].fill(g);
    }
    dx
}

// ---------------------------------------------------------------------------
// row-wise log-domain reductions
// ---------------------------------------------------------------------------

/// Row-wise log-softmax over the last axis of [R,K].
pub fn logsoftmax_fwd(x: &Tensor) -> Result<Tensor> {
    let (r, k) = x.as_matrix(x.rank() - 1);
    if k == 0 {
        return Err(AntError::shape("logsoftmax", "empty rows"));
    }
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter() {
            s += (v - m).exp();
        }
        let lse = m + s.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

pub fn logsoftmax_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let (r, k) = y.as_matrix(y.rank() - 1);
    let mut dx = Tensor::zeros(&y.shape);
    for i in 0..r {
        let yr = &y.data[i * k..(i + 1) * k];
        let gr = &dy.data[i * k..(i + 1) * k];
        let gsum: f64 = gr.iter().sum();
        let out = &mut dx.data[i * k..(i + 1) * k];
        for j in 0..k {
            out[j] = gr[j] - yr[j].exp() * gsum;
        }
    }
    dx
}

/// Row-wise log(sum(exp(x))) over [R,K] -> [R].
pub fn lse_rows_fwd(x: &Tensor) -> Result<Tensor> {
    let (r, k) = x.as_matrix(x.rank() - 1);
    if k == 0 {
        return Err(AntError::shape("lse-rows", "empty rows"));
    }
    let mut out = Tensor::zeros(&[r]);
    for i in 0..r {
        let row = &x.data[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row {
            s += (v - m).exp();
        }
        out.data[i] = m + s.ln();
    }
    Ok(out)
}

pub fn lse_rows_bwd(x: &Tensor, out: &Tensor, dy: &Tensor) -> Tensor {
    let (r, k) = x.as_matrix(x.rank() - 1);
    let mut dx = Tensor::zeros(&x.shape);
    for i in 0..r {
        let g = dy.data[i];
        let o = out.data[i];
        for j in 0..k {
            dx.data[i * k + j] = g * (x.data[i * k + j] - o).exp();
        }
    }
    dx
}

/// Row-wise softmax; forward-only (inference paths).
pub fn softmax_fwd(x: &Tensor) -> Result<Tensor> {
    let mut y = logsoftmax_fwd(x)?;
    for v in y.data.iter_mut() {
        *v = v.exp();
    }
    Ok(y)
}
