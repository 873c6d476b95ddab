//! Scalar-generic compute kernels shared by the f32 production path and the
//! f64 shadow path. Keeping one implementation per operation guarantees the
//! two precisions compute the same function.
//!
//! Reductions (sums, means, normalizer statistics) accumulate in f64 even on
//! the f32 path; everything else stays in the element type.

use num_traits::Float;

/// Element type the kernels are generic over. The associated constants are
/// the tanh-GELU coefficients.
pub(crate) trait El: Float + From<f32> + Copy + std::fmt::Debug + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl El for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl El for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

pub(crate) fn add<T: El>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub(crate) fn mul<T: El>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

pub(crate) fn div<T: El>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x / y).collect()
}

pub(crate) fn scale<T: El>(a: &[T], c: f64) -> Vec<T> {
    let c = T::from_f64(c);
    a.iter().map(|&x| x * c).collect()
}

pub(crate) fn add_const<T: El>(a: &[T], c: f64) -> Vec<T> {
    let c = T::from_f64(c);
    a.iter().map(|&x| x + c).collect()
}

/// C[m,n] = A[m,k] * B[k,n], row-major. The i-k-j loop order keeps the inner
/// loop contiguous over both B and C.
pub(crate) fn matmul<T: El>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] = c_row[j] + a_ip * b_row[j];
            }
        }
    }
    c
}

/// y[n,dout] = x[n,din] * w[dout,din]^T (+ bias), the layout used by all
/// projection layers: one weight row per output feature.
pub(crate) fn linear<T: El>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * dout];
    for i in 0..n {
        let x_row = &x[i * din..(i + 1) * din];
        let y_row = &mut y[i * dout..(i + 1) * dout];
        for o in 0..dout {
            let w_row = &w[o * din..(o + 1) * din];
            let mut acc = T::zero();
            for d in 0..din {
                acc = acc + x_row[d] * w_row[d];
            }
            y_row[o] = acc;
        }
        if let Some(bias) = b {
            for o in 0..dout {
                y_row[o] = y_row[o] + bias[o];
            }
        }
    }
    y
}

pub(crate) fn transpose2d<T: El>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax over the last axis with max subtraction, so large logits
/// cannot overflow. The normalizer accumulates in f64.
pub(crate) fn softmax_rows<T: El>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = 0.0f64;
        let o = &mut out[r * cols..(r + 1) * cols];
        for (i, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            o[i] = e;
            denom += e.to_f64();
        }
        let inv = T::from_f64(1.0 / denom);
        for v in o.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

pub(crate) fn ln<T: El>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.ln()).collect()
}

pub(crate) fn sigmoid<T: El>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| sigmoid_one(v)).collect()
}

pub(crate) fn sigmoid_one<T: El>(v: T) -> T {
    let one = T::one();
    if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximate GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
pub(crate) fn gelu<T: El>(x: &[T]) -> Vec<T> {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    x.iter()
        .map(|&v| {
            let u = c * (v + a * v * v * v);
            half * v * (T::one() + u.tanh())
        })
        .collect()
}

pub(crate) fn gelu_grad(x: &[f32]) -> Vec<f32> {
    let c = GELU_C as f32;
    let a = GELU_A as f32;
    x.iter()
        .map(|&v| {
            let u = c * (v + a * v * v * v);
            let t = u.tanh();
            let du = c * (1.0 + 3.0 * a * v * v);
            0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du
        })
        .collect()
}

pub(crate) fn relu<T: El>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Layer norm over the last axis with affine parameters. Statistics use the
/// biased variance and accumulate in f64.
pub(crate) fn layernorm<T: El>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
    rows: usize,
    d: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * d];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let (mu, var) = row_stats(row);
        let inv = T::from_f64(1.0 / (var + eps).sqrt());
        let mu_t = T::from_f64(mu);
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            o[i] = (row[i] - mu_t) * inv * gamma[i] + beta[i];
        }
    }
    out
}

pub(crate) fn row_stats<T: El>(row: &[T]) -> (f64, f64) {
    let n = row.len() as f64;
    let mut s = 0.0f64;
    for &v in row {
        s += v.to_f64();
    }
    let mu = s / n;
    let mut sq = 0.0f64;
    for &v in row {
        let d = v.to_f64() - mu;
        sq += d * d;
    }
    (mu, sq / n)
}

/// Single-image conv2d: x[cin,h,w] * k[cout,cin,kh,kw] -> [cout,oh,ow].
pub(crate) fn conv2d<T: El>(
    x: &[T],
    ker: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![T::zero(); cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xv = x[(ci * h + iy as usize) * w + ix as usize];
                            let kv = ker[((co * cin + ci) * kh + ky) * kw + kx];
                            acc = acc + xv * kv;
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Transposed conv with kernel size equal to stride (the non-overlapping
/// upsampling case): x[cin,h,w] * k[cin,cout,s,s] -> [cout,h*s,w*s].
pub(crate) fn conv_transpose2d<T: El>(
    x: &[T],
    ker: &[T],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    s: usize,
) -> Vec<T> {
    let oh = h * s;
    let ow = w * s;
    let mut out = vec![T::zero(); cout * oh * ow];
    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..w {
                let xv = x[(ci * h + iy) * w + ix];
                if xv == T::zero() {
                    continue;
                }
                for co in 0..cout {
                    for dy in 0..s {
                        for dx in 0..s {
                            let kv = ker[((ci * cout + co) * s + dy) * s + dx];
                            let oi = (co * oh + iy * s + dy) * ow + ix * s + dx;
                            out[oi] = out[oi] + xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Sampling geometry for bilinear resize with the half-pixel (align_corners
/// = false) convention: returns (left index, right index, right weight).
pub(crate) fn bilinear_axis(dst: usize, src_extent: usize, out_extent: usize) -> (usize, usize, f64) {
    let scale = src_extent as f64 / out_extent as f64;
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let s0 = s.floor();
    let t = s - s0;
    let i0 = (s0 as isize).clamp(0, src_extent as isize - 1) as usize;
    let i1 = (s0 as isize + 1).clamp(0, src_extent as isize - 1) as usize;
    (i0, i1, t)
}

pub(crate) fn bilinear_resize<T: El>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); c * oh * ow];
    for oy in 0..oh {
        let (y0, y1, ty) = bilinear_axis(oy, h, oh);
        let ty = T::from_f64(ty);
        for ox in 0..ow {
            let (x0, x1, tx) = bilinear_axis(ox, w, ow);
            let tx = T::from_f64(tx);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = x[base + y0 * w + x0];
                let v01 = x[base + y0 * w + x1];
                let v10 = x[base + y1 * w + x0];
                let v11 = x[base + y1 * w + x1];
                let one = T::one();
                let top = v00 * (one - tx) + v01 * tx;
                let bot = v10 * (one - tx) + v11 * tx;
                out[(ch * oh + oy) * ow + ox] = top * (one - ty) + bot * ty;
            }
        }
    }
    out
}

pub(crate) fn sum_f64<T: El>(x: &[T]) -> f64 {
    let mut s = 0.0f64;
    for &v in x {
        s += v.to_f64();
    }
    s
}

/// Mean of the stable elementwise BCE-with-logits:
/// max(x,0) - x*t + ln(1 + exp(-|x|)). Accumulates in f64.
pub(crate) fn bce_with_logits_mean<T: El>(logits: &[T], target: &[T]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &t) in logits.iter().zip(target) {
        let x = x.to_f64();
        let t = t.to_f64();
        s += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    }
    s / logits.len() as f64
}

pub(crate) fn gather_rows<T: El>(x: &[T], d: usize, index: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); index.len() * d];
    for (r, &src) in index.iter().enumerate() {
        out[r * d..(r + 1) * d].copy_from_slice(&x[src * d..(src + 1) * d]);
    }
    out
}
