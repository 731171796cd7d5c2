//! Dense kernels shared by the forward and backward passes. Matrices are
//! row-major slices; shapes are passed explicitly.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

/// Floating-point element type of the network.
pub trait Scalar: Float + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// # Safety
    /// The strides must address memory inside the slices handed to [`gemm`].
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

    /// `c += a b` for short row-major `a`; false if not handled.
    fn gemm_small(_m: usize, _n: usize, _k: usize, _a: &[Self], _b: &[Self], _c: &mut [Self]) -> bool {
        false
    }

    /// `tanh`, possibly through a faster approximation.
    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    #[inline]
    fn of(v: f64) -> Self {
        Self::from(v).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
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

    fn gemm_small(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) -> bool {
        super::small::sgemm_nn_acc(m, n, k, a, b, c)
    }

    /// Rational minimax fit, absolute error below 1e-6; branch-free so it
    /// vectorizes.
    #[inline]
    fn tanh_fast(self) -> f32 {
        const LIM: f32 = 7.905_311;
        let x = if self > LIM {
            LIM
        } else if self < -LIM {
            -LIM
        } else {
            self
        };
        let x2 = x * x;
        let mut p = -2.760_768_5e-16f32;
        p = p * x2 + 2.000_188e-13;
        p = p * x2 - 8.604_672e-11;
        p = p * x2 + 5.122_297e-8;
        p = p * x2 + 1.485_722_4e-5;
        p = p * x2 + 6.372_619_3e-4;
        p = p * x2 + 4.893_524_6e-3;
        let mut q = 1.198_258_4e-6f32;
        q = q * x2 + 1.185_347_1e-4;
        q = q * x2 + 2.268_434_6e-3;
        q = q * x2 + 4.893_525e-3;
        x * p / q
    }
}

impl Scalar for f64 {
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

const SMALL_ROWS: usize = 64;

/// `c (m×n) = op(a) op(b) + beta c`, where `op(a)` is m×k and `op(b)` is k×n.
/// `ta` means `a` is stored k×m, `tb` means `b` is stored n×k.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[T], b: &[T], mut beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if !ta && !tb && m <= SMALL_ROWS {
        if beta == T::zero() {
            c[..m * n].fill(T::zero());
        } else if beta != T::one() {
            c[..m * n].iter_mut().for_each(|v| *v = *v * beta);
        }
        if T::gemm_small(m, n, k, a, b, c) {
            return;
        }
        beta = T::one();
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// `y = x w + b` for `rows` rows; `w` is `din×dout`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, din: usize, w: &[T], b: &[T], dout: usize, y: &mut [T]) {
    for row in y[..rows * dout].chunks_exact_mut(dout) {
        row.copy_from_slice(b);
    }
    gemm(false, false, rows, dout, din, x, w, T::one(), y);
}

/// Backward of [`linear`]: accumulates `dw`, `db` and (if given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    gemm(true, false, din, dout, rows, x, dy, T::one(), dw);
    for row in dy[..rows * dout].chunks_exact(dout) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g = *g + v;
        }
    }
    if let Some(dx) = dx {
        gemm(false, true, rows, din, dout, dy, w, T::one(), dx);
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Per-row layer norm without affine. Writes `xhat` and the reciprocal
/// standard deviations.
pub fn layer_norm<T: Scalar>(x: &[T], d: usize, xhat: &mut [T], rstd: &mut [T]) {
    let inv_d = T::of(1.0 / d as f64);
    let eps = T::of(LN_EPS);
    for ((row, out), r) in x.chunks_exact(d).zip(xhat.chunks_exact_mut(d)).zip(rstd.iter_mut()) {
        let mean = sum(row) * inv_d;
        let var = sum_sq_dev(row, mean) * inv_d;
        *r = (var + eps).sqrt().recip();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * *r;
        }
    }
}

/// Backward of [`layer_norm`]: accumulates into `dx`.
pub fn layer_norm_backward<T: Scalar>(xhat: &[T], rstd: &[T], dxhat: &[T], d: usize, dx: &mut [T]) {
    let inv_d = T::of(1.0 / d as f64);
    for (((xh, g), &r), out) in xhat
        .chunks_exact(d)
        .zip(dxhat.chunks_exact(d))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(d))
    {
        let mean_g = sum(g) * inv_d;
        let mean_gx = dot(g, xh) * inv_d;
        for ((o, &gi), &xi) in out.iter_mut().zip(g).zip(xh) {
            *o = *o + r * (gi - mean_g - xi * mean_gx);
        }
    }
}

/// `h = xhat (1 + scale) + shift`, with one (scale, shift) pair per sample
/// of `n` rows. `modv` holds each sample's modulation vector and
/// `shift_at`/`scale_at` are offsets into it.
#[allow(clippy::too_many_arguments)]
pub fn modulate<T: Scalar>(
    xhat: &[T],
    n: usize,
    d: usize,
    modv: &[T],
    mod_dim: usize,
    shift_at: usize,
    scale_at: usize,
    h: &mut [T],
) {
    for ((xs, hs), m) in xhat.chunks_exact(n * d).zip(h.chunks_exact_mut(n * d)).zip(modv.chunks_exact(mod_dim)) {
        let shift = &m[shift_at..shift_at + d];
        let scale = &m[scale_at..scale_at + d];
        for (xr, hr) in xs.chunks_exact(d).zip(hs.chunks_exact_mut(d)) {
            for j in 0..d {
                hr[j] = xr[j] * (T::one() + scale[j]) + shift[j];
            }
        }
    }
}

/// Backward of [`modulate`]: overwrites `dxhat`, accumulates into `dmod`.
#[allow(clippy::too_many_arguments)]
pub fn modulate_backward<T: Scalar>(
    xhat: &[T],
    dh: &[T],
    n: usize,
    d: usize,
    modv: &[T],
    dmod: &mut [T],
    mod_dim: usize,
    shift_at: usize,
    scale_at: usize,
    dxhat: &mut [T],
) {
    for ((((xs, gs), m), dm), dx) in xhat
        .chunks_exact(n * d)
        .zip(dh.chunks_exact(n * d))
        .zip(modv.chunks_exact(mod_dim))
        .zip(dmod.chunks_exact_mut(mod_dim))
        .zip(dxhat.chunks_exact_mut(n * d))
    {
        let scale = &m[scale_at..scale_at + d];
        for ((xr, gr), dr) in xs.chunks_exact(d).zip(gs.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
            for j in 0..d {
                dr[j] = gr[j] * (T::one() + scale[j]);
                dm[shift_at + j] = dm[shift_at + j] + gr[j];
                dm[scale_at + j] = dm[scale_at + j] + gr[j] * xr[j];
            }
        }
    }
}

/// `x += gate * branch`, one gate vector per sample.
pub fn gated_add<T: Scalar>(x: &mut [T], branch: &[T], n: usize, d: usize, modv: &[T], mod_dim: usize, gate_at: usize) {
    for ((xs, bs), m) in x.chunks_exact_mut(n * d).zip(branch.chunks_exact(n * d)).zip(modv.chunks_exact(mod_dim)) {
        let gate = &m[gate_at..gate_at + d];
        for (xr, br) in xs.chunks_exact_mut(d).zip(bs.chunks_exact(d)) {
            for j in 0..d {
                xr[j] = xr[j] + gate[j] * br[j];
            }
        }
    }
}

/// Backward of [`gated_add`] for the branch and the gate; the residual
/// path passes `dx` through unchanged.
#[allow(clippy::too_many_arguments)]
pub fn gated_add_backward<T: Scalar>(
    dx: &[T],
    branch: &[T],
    n: usize,
    d: usize,
    modv: &[T],
    dmod: &mut [T],
    mod_dim: usize,
    gate_at: usize,
    dbranch: &mut [T],
) {
    for ((((gs, bs), m), dm), db) in dx
        .chunks_exact(n * d)
        .zip(branch.chunks_exact(n * d))
        .zip(modv.chunks_exact(mod_dim))
        .zip(dmod.chunks_exact_mut(mod_dim))
        .zip(dbranch.chunks_exact_mut(n * d))
    {
        let gate = &m[gate_at..gate_at + d];
        for ((gr, br), dr) in gs.chunks_exact(d).zip(bs.chunks_exact(d)).zip(db.chunks_exact_mut(d)) {
            for j in 0..d {
                dr[j] = gr[j] * gate[j];
                dm[gate_at + j] = dm[gate_at + j] + gr[j] * br[j];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let mut out = [T::zero()];
    gelu_slice(&[x], &mut out);
    out[0]
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let mut g = [T::one()];
    gelu_backward(&[x], &mut g);
    g[0]
}

/// `out = gelu(x)` elementwise.
pub fn gelu_slice<T: Scalar>(x: &[T], out: &mut [T]) {
    let (c, a, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
    for (o, &v) in out.iter_mut().zip(x) {
        let u = c * (v + a * v * v * v);
        *o = half * v * (T::one() + u.tanh_fast());
    }
}

/// `g *= gelu'(x)` elementwise.
pub fn gelu_backward<T: Scalar>(x: &[T], g: &mut [T]) {
    let (c, a, a3, half) = (T::of(GELU_C), T::of(GELU_A), T::of(3.0 * GELU_A), T::of(0.5));
    for (gv, &v) in g.iter_mut().zip(x) {
        let u = c * (v + a * v * v * v);
        let th = u.tanh_fast();
        let du = c * (T::one() + a3 * v * v);
        *gv = *gv * (half * (T::one() + th) + half * v * (T::one() - th * th) * du);
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Dot product with split accumulators, which lets it vectorize.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[T; 8], &[T; 8]) = (x.try_into().unwrap(), y.try_into().unwrap());
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Four dot products against the same left operand.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: [&[T]; 4]) -> [T; 4] {
    let mut acc = [[T::zero(); 4]; 4];
    let ca = a.chunks_exact(4);
    let tail = ca.remainder().len();
    for (c, x) in ca.enumerate() {
        let x: &[T; 4] = x.try_into().unwrap();
        for (r, row) in b.iter().enumerate() {
            let y: &[T; 4] = row[c * 4..c * 4 + 4].try_into().unwrap();
            for l in 0..4 {
                acc[r][l] = acc[r][l] + x[l] * y[l];
            }
        }
    }
    let mut out = [T::zero(); 4];
    for (r, row) in b.iter().enumerate() {
        let n = a.len();
        out[r] = acc[r].iter().copied().sum::<T>() + dot(&a[n - tail..], &row[n - tail..]);
    }
    out
}

/// Sum with split accumulators.
#[inline]
pub fn sum<T: Scalar>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let tail: T = ca.remainder().iter().copied().sum();
    for x in ca {
        let x: &[T; 8] = x.try_into().unwrap();
        for l in 0..8 {
            acc[l] = acc[l] + x[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `sum((a - c)^2)` with split accumulators.
#[inline]
fn sum_sq_dev<T: Scalar>(a: &[T], c: T) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let tail: T = ca.remainder().iter().map(|&v| (v - c) * (v - c)).sum();
    for x in ca {
        let x: &[T; 8] = x.try_into().unwrap();
        for l in 0..8 {
            acc[l] = acc[l] + (x[l] - c) * (x[l] - c);
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// Which key positions each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    All,
    Band(usize),
}

impl Span {
    /// Unmasked key range `lo..hi` for query `i` over `m` keys.
    pub fn keys(self, i: usize, m: usize) -> (usize, usize) {
        match self {
            Span::All => (0, m),
            Span::Band(u) => (i.saturating_sub(u), (i + u + 1).min(m)),
        }
    }
}

/// Shapes of one multi-head attention call for a single sample. Q rows
/// live in `q` with stride `q_stride`, K and V rows in `k`/`v` with
/// stride `kv_stride`; the output is written `n×(h·dh)` contiguous.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub n: usize,
    pub m: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub q_stride: usize,
    pub kv_stride: usize,
    pub span: Span,
}

/// Multi-head scaled dot-product attention. `probs` receives the
/// `heads×n×m` attention weights; masked entries are exactly zero.
pub fn attention<T: Scalar>(s: AttnShape, q: &[T], k: &[T], v: &[T], probs: &mut [T], out: &mut [T]) {
    let dm = s.heads * s.head_dim;
    let scale = T::of(1.0 / (s.head_dim as f64).sqrt());
    probs[..s.heads * s.n * s.m].fill(T::zero());
    out[..s.n * dm].fill(T::zero());
    for hd in 0..s.heads {
        let off = hd * s.head_dim;
        for i in 0..s.n {
            let qi = &q[i * s.q_stride + off..i * s.q_stride + off + s.head_dim];
            let (lo, hi) = s.span.keys(i, s.m);
            let p = &mut probs[(hd * s.n + i) * s.m..(hd * s.n + i + 1) * s.m];
            let mut max = T::neg_infinity();
            let key = |j: usize| &k[j * s.kv_stride + off..j * s.kv_stride + off + s.head_dim];
            let mut j = lo;
            while j + 4 <= hi {
                let sc = dot4(qi, [key(j), key(j + 1), key(j + 2), key(j + 3)]);
                for (pj, sc) in p[j..j + 4].iter_mut().zip(sc) {
                    *pj = sc * scale;
                    max = max.max(*pj);
                }
                j += 4;
            }
            for j in j..hi {
                p[j] = dot(qi, key(j)) * scale;
                max = max.max(p[j]);
            }
            let mut total = T::zero();
            for pj in &mut p[lo..hi] {
                *pj = (*pj - max).exp();
                total = total + *pj;
            }
            let o = &mut out[i * dm + off..i * dm + off + s.head_dim];
            for j in lo..hi {
                p[j] = p[j] / total;
                let vj = &v[j * s.kv_stride + off..j * s.kv_stride + off + s.head_dim];
                for (oe, &ve) in o.iter_mut().zip(vj) {
                    *oe = *oe + p[j] * ve;
                }
            }
        }
    }
}

/// Backward of [`attention`]. Accumulates into `dq` (stride `q_stride`)
/// and into the packed `dkv` (stride `kv_stride`), whose K and V columns
/// start at `k_off` and `v_off`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    s: AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dkv: &mut [T],
    k_off: usize,
    v_off: usize,
) {
    let dm = s.heads * s.head_dim;
    let scale = T::of(1.0 / (s.head_dim as f64).sqrt());
    let mut dp = vec![T::zero(); s.m];
    for hd in 0..s.heads {
        let off = hd * s.head_dim;
        for i in 0..s.n {
            let (lo, hi) = s.span.keys(i, s.m);
            let p = &probs[(hd * s.n + i) * s.m..(hd * s.n + i + 1) * s.m];
            let go = &dout[i * dm + off..i * dm + off + s.head_dim];
            let mut dot_pp = T::zero();
            for j in lo..hi {
                let vj = &v[j * s.kv_stride + off..j * s.kv_stride + off + s.head_dim];
                dp[j] = dot(go, vj);
                dot_pp = dot_pp + dp[j] * p[j];
                let at = j * s.kv_stride + v_off + off;
                for (d, &g) in dkv[at..at + s.head_dim].iter_mut().zip(go) {
                    *d = *d + p[j] * g;
                }
            }
            let qi = &q[i * s.q_stride + off..i * s.q_stride + off + s.head_dim];
            for j in lo..hi {
                let ds = p[j] * (dp[j] - dot_pp) * scale;
                let kj = &k[j * s.kv_stride + off..j * s.kv_stride + off + s.head_dim];
                let dqi = &mut dq[i * s.q_stride + off..i * s.q_stride + off + s.head_dim];
                for (d, &kv) in dqi.iter_mut().zip(kj) {
                    *d = *d + ds * kv;
                }
                let at = j * s.kv_stride + k_off + off;
                for (d, &qv) in dkv[at..at + s.head_dim].iter_mut().zip(qi) {
                    *d = *d + ds * qv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn activations_match_central_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let g = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((g - gelu_grad(x)).abs() < 1e-8);
            let s = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((s - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn fast_tanh_tracks_std() {
        let mut worst = 0.0f32;
        for i in -20_000..=20_000 {
            let x = i as f32 * 1e-3;
            worst = worst.max((x.tanh_fast() - x.tanh()).abs());
        }
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(0.3f64.tanh_fast(), 0.3f64.tanh());
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0, -1.0, -1.0, 5.0, 5.0];
        let mut xh = [0.0; 8];
        let mut r = [0.0; 2];
        layer_norm(&x, 4, &mut xh, &mut r);
        for row in xh.chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|a| a * a).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }
}
