//! Register-blocked `C += A B` for few rows of `A`, reading the row-major
//! weight matrix `B` in place. Packing dominates library GEMMs at these
//! shapes.

/// `c (m×n) += a (m×k) b (k×n)`, all row-major. Returns false when no
/// vector unit is available and nothing was computed.
pub fn sgemm_nn_acc(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) -> bool {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature checked above.
            unsafe { avx512(m, n, k, a, b, c) };
            return true;
        }
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: features checked above.
            unsafe { avx2(m, n, k, a, b, c) };
            return true;
        }
    }
    false
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn avx512(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    const NV: usize = 2;
    let mut j0 = 0;
    while j0 + 16 * NV <= n {
        let mut i0 = 0;
        while i0 + 10 <= m {
            avx512_tile::<10, NV>(i0, j0, n, k, a, b, c);
            i0 += 10;
        }
        while i0 + 4 <= m {
            avx512_tile::<4, NV>(i0, j0, n, k, a, b, c);
            i0 += 4;
        }
        while i0 < m {
            avx512_tile::<1, NV>(i0, j0, n, k, a, b, c);
            i0 += 1;
        }
        j0 += 16 * NV;
    }
    tail(m, n, k, j0, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[inline]
unsafe fn avx512_tile<const MR: usize, const NV: usize>(
    i0: usize,
    j0: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
) {
    use std::arch::x86_64::*;
    let (ap, bp, cp) = (a.as_ptr().add(i0 * k), b.as_ptr().add(j0), c.as_mut_ptr().add(i0 * n + j0));
    let mut acc = [[_mm512_setzero_ps(); NV]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        for (v, x) in row.iter_mut().enumerate() {
            *x = _mm512_loadu_ps(cp.add(r * n + 16 * v));
        }
    }
    for p in 0..k {
        let mut bv = [_mm512_setzero_ps(); NV];
        for (v, x) in bv.iter_mut().enumerate() {
            *x = _mm512_loadu_ps(bp.add(p * n + 16 * v));
        }
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_ps(*ap.add(r * k + p));
            for v in 0..NV {
                row[v] = _mm512_fmadd_ps(av, bv[v], row[v]);
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        for (v, x) in row.iter().enumerate() {
            _mm512_storeu_ps(cp.add(r * n + 16 * v), *x);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn avx2(m: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let mut j0 = 0;
    while j0 + 16 <= n {
        let mut i0 = 0;
        while i0 + 6 <= m {
            avx2_tile::<6>(i0, j0, n, k, a, b, c);
            i0 += 6;
        }
        while i0 < m {
            avx2_tile::<1>(i0, j0, n, k, a, b, c);
            i0 += 1;
        }
        j0 += 16;
    }
    tail(m, n, k, j0, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[inline]
unsafe fn avx2_tile<const MR: usize>(i0: usize, j0: usize, n: usize, k: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    use std::arch::x86_64::*;
    let (ap, bp, cp) = (a.as_ptr().add(i0 * k), b.as_ptr().add(j0), c.as_mut_ptr().add(i0 * n + j0));
    let mut acc = [[_mm256_setzero_ps(); 2]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row[0] = _mm256_loadu_ps(cp.add(r * n));
        row[1] = _mm256_loadu_ps(cp.add(r * n + 8));
    }
    for p in 0..k {
        let b0 = _mm256_loadu_ps(bp.add(p * n));
        let b1 = _mm256_loadu_ps(bp.add(p * n + 8));
        for (r, row) in acc.iter_mut().enumerate() {
            let av = _mm256_set1_ps(*ap.add(r * k + p));
            row[0] = _mm256_fmadd_ps(av, b0, row[0]);
            row[1] = _mm256_fmadd_ps(av, b1, row[1]);
        }
    }
    for (r, row) in acc.iter().enumerate() {
        _mm256_storeu_ps(cp.add(r * n), row[0]);
        _mm256_storeu_ps(cp.add(r * n + 8), row[1]);
    }
}

/// Columns `j0..n` left over by the vector tiles.
fn tail(m: usize, n: usize, k: usize, j0: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    if j0 >= n {
        return;
    }
    for i in 0..m {
        let crow = &mut c[i * n + j0..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}
