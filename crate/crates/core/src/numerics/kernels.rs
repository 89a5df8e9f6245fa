//! Slice-level kernels shared by the tape and the value-level ops.

use super::Real;

/// `[n,k] x [k,m] -> [n,m]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

/// `a [n,m] x b^T` where `b` is `[k,m]`, giving `[n,k]`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], n: usize, m: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            c[i * k + j] = dot(arow, brow);
        }
    }
    c
}

/// `a^T x b` where `a` is `[n,k]` and `b` is `[n,m]`, giving `[k,m]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

pub fn transpose<T: Real>(a: &[T], n: usize, m: usize) -> Vec<T> {
    let mut t = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            t[j * n + i] = a[i * m + j];
        }
    }
    t
}

/// Row softmax with max subtraction. Entries with `mask[k] == false` are
/// excluded and produce exact zeros. A row with no permitted entry yields
/// all zeros.
pub fn softmax_rows<T: Real>(x: &[T], n: usize, m: usize, mask: Option<&[bool]>) -> Vec<T> {
    let mut y = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let out = &mut y[i * m..(i + 1) * m];
        let allowed = |j: usize| mask.map_or(true, |mk| mk[i * m + j]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        let mut z = T::zero();
        for (j, (&v, o)) in row.iter().zip(out.iter_mut()).enumerate() {
            if allowed(j) {
                *o = (v - mx).exp();
                z += *o;
            }
        }
        for o in out.iter_mut() {
            *o /= z;
        }
    }
    y
}

/// VJP of a row softmax given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &[T], g: &[T], n: usize, m: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); n * m];
    for i in 0..n {
        let yr = &y[i * m..(i + 1) * m];
        let gr = &g[i * m..(i + 1) * m];
        let s = dot(yr, gr);
        for j in 0..m {
            dx[i * m + j] = yr[j] * (gr[j] - s);
        }
    }
    dx
}

pub struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Per-row normalization over the trailing dimension `d`.
pub fn layer_norm<T: Real>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> LayerNormOut<T> {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let df = T::from_usize(d).unwrap();
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let rs = T::one() / (var + eps).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    g: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = g.len() / d;
    let df = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for i in 0..n {
        let gr = &g[i * d..(i + 1) * d];
        let hr = &xhat[i * d..(i + 1) * d];
        let mut sum_gg = T::zero();
        let mut sum_ggh = T::zero();
        for j in 0..d {
            let gg = gr[j] * gamma[j];
            sum_gg += gg;
            sum_ggh += gg * hr[j];
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
        }
        for j in 0..d {
            let gg = gr[j] * gamma[j];
            dx[i * d + j] = rstd[i] / df * (df * gg - sum_gg - hr[j] * sum_ggh);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        let out = |n: usize| {
            let span = n + 2 * pad;
            if stride == 0 || span < k {
                None
            } else {
                Some((span - k) / stride + 1)
            }
        };
        let (h_out, w_out) = (out(h)?, out(w)?);
        if h_out == 0 || w_out == 0 {
            return None;
        }
        Some(ConvGeom { h, w, c, k, stride, pad, h_out, w_out })
    }

    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }
}

/// im2col with zero padding. Output is `[h_out*w_out, k*k*c]`, columns
/// ordered `(ky, kx, channel)`.
pub fn unfold<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); g.h_out * g.w_out * pl];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let base = (oy * g.w_out + ox) * pl;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.c;
                    let dst = base + (ky * g.k + kx) * g.c;
                    cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`unfold`].
pub fn fold_add<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let mut x = vec![T::zero(); g.h * g.w * g.c];
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let base = (oy * g.w_out + ox) * pl;
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.c;
                    let src = base + (ky * g.k + kx) * g.c;
                    for ch in 0..g.c {
                        x[dst + ch] += cols[src + ch];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
    }

    #[test]
    fn masked_row_without_entries_is_zero() {
        let y = softmax_rows(&[1.0f64, 2.0], 1, 2, Some(&[false, false]));
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn conv_output_size() {
        let g = ConvGeom::new(7, 6, 1, 3, 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (4, 3));
        assert!(ConvGeom::new(2, 2, 1, 5, 1, 0).is_none());
    }
}
