//! Row-major dense kernels shared by the forward and backward passes.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point type the model can run in. Checkpoints and inference use
/// `f32`; `f64` exists for gradient checking.
pub trait Real:
    Float + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; callers go through [`gemm`], which checks the extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// `tanh`, possibly through a faster approximation. The activation and
    /// its gradient both go through this.
    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

/// `exp` for `|x| <= 87`: range reduction by `ln 2` and a degree-7 polynomial
/// with Cephes coefficients. Branch-free so slices vectorize.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23: adding it rounds to an integer
    let t = x * std::f32::consts::LOG2_E + MAGIC;
    let n = t - MAGIC;
    let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
    let p = ((((1.987_569_2e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 0.166_666_65) * r
        + 0.5;
    let scale = f32::from_bits(t.to_bits().wrapping_sub(0x4B40_0000).wrapping_add(127) << 23);
    (1.0 + r + r * r * p) * scale
}

#[inline(always)]
fn tanh_f32(x: f32) -> f32 {
    let x = x.clamp(-9.0, 9.0);
    let e = exp_f32(2.0 * x);
    let large = (e - 1.0) / (e + 1.0);
    let x2 = x * x;
    let small = x * (1.0 + x2 * (-1.0 / 3.0 + x2 * (2.0 / 15.0 + x2 * (-17.0 / 315.0))));
    if x.abs() < 0.125 {
        small
    } else {
        large
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    #[inline(always)]
    fn tanh_fast(self) -> f32 {
        tanh_f32(self)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub struct View {
    pub rs: usize,
    pub cs: usize,
}

pub const ROW: fn(usize) -> View = |cols| View { rs: cols, cs: 1 };
pub const COL: fn(usize) -> View = |cols| View { rs: 1, cs: cols };

fn extent(rows: usize, cols: usize, v: View) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * v.rs + (cols - 1) * v.cs + 1
    }
}

/// `c = alpha * a * b + beta * c` for an `m x k` times `k x n` product.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    assert!(extent(m, k, va) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, vb) <= b.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, vc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr(),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr(),
            vc.rs as isize,
            vc.cs as isize,
        )
    }
}

/// `out[m x n] = x[m x k] * w[k x n] + bias`.
pub fn linear<T: Real>(m: usize, k: usize, n: usize, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    for row in out[..m * n].chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(m, k, n, T::one(), x, ROW(k), w, ROW(n), T::one(), out, ROW(n));
}

/// Accumulates the gradients of [`linear`]: `dw += x^T dy`, `db += colsum(dy)`,
/// and writes or accumulates `dx = dy w^T` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<(&mut [T], T)>,
) {
    // dw[k x n] += x^T[k x m] dy[m x n]
    gemm(k, m, n, T::one(), x, COL(k), dy, ROW(n), T::one(), dw, ROW(n));
    for row in dy[..m * n].chunks_exact(n) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    if let Some((dx, beta)) = dx {
        // dx[m x k] = dy[m x n] w^T[n x k]
        gemm(m, n, k, T::one(), dy, ROW(n), w, COL(n), beta, dx, ROW(k));
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Writes the normalized rows to `xhat`, the affine
/// output to `y` and the reciprocal standard deviations to `rstd`.
pub fn layer_norm<T: Real>(
    d: usize,
    x: &[T],
    gain: &[T],
    bias: &[T],
    xhat: &mut [T],
    y: &mut [T],
    rstd: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for (i, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        let xh = &mut xhat[i * d..(i + 1) * d];
        let yy = &mut y[i * d..(i + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
            yy[j] = xh[j] * gain[j] + bias[j];
        }
    }
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgain`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    d: usize,
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    dy: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let inv_d = T::of(1.0 / d as f64);
    let mut dxh = vec![T::zero(); d];
    for (i, (xh, g)) in xhat.chunks_exact(d).zip(dy.chunks_exact(d)).enumerate() {
        let mut mean_dxh = T::zero();
        let mut mean_dxh_xh = T::zero();
        for j in 0..d {
            dgain[j] += g[j] * xh[j];
            dbias[j] += g[j];
            dxh[j] = g[j] * gain[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xh[j];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let out = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            out[j] += rstd[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh_fast())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh_fast();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// In-place softmax over the visible entries of each row; hidden entries
/// become exactly zero.
pub fn masked_softmax_rows<T: Real>(cols: usize, scores: &mut [T], visible: &[bool]) {
    for (row, vis) in scores.chunks_exact_mut(cols).zip(visible.chunks_exact(cols)) {
        let mut max = T::neg_infinity();
        for (&s, &v) in row.iter().zip(vis) {
            if v && s > max {
                max = s;
            }
        }
        let mut sum = T::zero();
        for (s, &v) in row.iter_mut().zip(vis) {
            if v {
                *s = (*s - max).exp();
                sum += *s;
            } else {
                *s = T::zero();
            }
        }
        let inv = T::one() / sum;
        for s in row.iter_mut() {
            *s *= inv;
        }
    }
}
