/// `c = a·b + beta·c` for a logical `m×k` by `k×n` product.
///
/// `a_t` / `b_t` mean the operand is stored transposed (`k×m` / `n×k`
/// row-major). Single-threaded, so results are reproducible bit for bit on
/// a given machine.
///
/// Products whose width is a multiple of 16 (every hidden-layer product of
/// the model) go through a register-tiled kernel that skips operand packing;
/// for tall, 64-wide operands packing costs more than the arithmetic.
/// Everything else goes to `matrixmultiply`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    #[cfg(target_arch = "x86_64")]
    if n % tiled::NR == 0 && tiled::available() {
        let b_rows: std::borrow::Cow<[f32]> = if b_t {
            let mut t = vec![0.0; k * n];
            for j in 0..n {
                for p in 0..k {
                    t[p * n + j] = b[j * k + p];
                }
            }
            t.into()
        } else {
            b.into()
        };
        // SAFETY: the CPU supports AVX2 and FMA, n is a multiple of NR and
        // the slice lengths were checked above.
        unsafe { tiled::gemm(m, k, n, a, rsa, csa, &b_rows, c, beta) };
        return;
    }
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
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

#[cfg(target_arch = "x86_64")]
mod tiled {
    pub(super) const MR: usize = 6;
    pub(super) const NR: usize = 16;
    const KC: usize = 256;

    pub(super) fn available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    /// `R×NR` block of `c` from `kc` steps. `a` addresses element `(i, p)`
    /// at `i*rsa + p*csa`; `b` rows are `ldb` apart.
    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn tile<const R: usize>(
        a: *const f32,
        rsa: usize,
        csa: usize,
        b: *const f32,
        ldb: usize,
        kc: usize,
        c: *mut f32,
        ldc: usize,
        overwrite: bool,
    ) {
        // pointers advance incrementally with wrapping arithmetic so the
        // loop carries no overflow or bounds checks in any build profile
        let row_offset: [usize; R] = std::array::from_fn(|r| r.wrapping_mul(rsa));
        let mut acc = [[0.0f32; NR]; R];
        let (mut ap, mut bp) = (a, b);
        for _ in 0..kc {
            let brow = (bp as *const [f32; NR]).read_unaligned();
            for (row, &off) in acc.iter_mut().zip(&row_offset) {
                let av = *ap.wrapping_add(off);
                for (x, &bv) in row.iter_mut().zip(&brow) {
                    *x = av.mul_add(bv, *x);
                }
            }
            ap = ap.wrapping_add(csa);
            bp = bp.wrapping_add(ldb);
        }
        let mut cp = c;
        for row in &acc {
            let dst = cp as *mut [f32; NR];
            let mut out = if overwrite { [0.0; NR] } else { dst.read_unaligned() };
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
            dst.write_unaligned(out);
            cp = cp.wrapping_add(ldc);
        }
    }

    /// Caller guarantees AVX2+FMA, `n % NR == 0`, `b` row-major `k×n`, `c`
    /// row-major `m×n` and `a` covering every `(i, p)` through its strides.
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub(super) unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: usize,
        csa: usize,
        b: &[f32],
        c: &mut [f32],
        beta: f32,
    ) {
        if beta != 0.0 && beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        let (ap, bp, cp) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        let mut p0 = 0;
        while p0 < k {
            let kc = KC.min(k - p0);
            let overwrite = p0 == 0 && beta == 0.0;
            let mut i0 = 0;
            while i0 < m {
                let rows = MR.min(m - i0);
                let a0 = ap.add(i0 * rsa + p0 * csa);
                for j0 in (0..n).step_by(NR) {
                    let b0 = bp.add(p0 * n + j0);
                    let c0 = cp.add(i0 * n + j0);
                    match rows {
                        6 => tile::<6>(a0, rsa, csa, b0, n, kc, c0, n, overwrite),
                        5 => tile::<5>(a0, rsa, csa, b0, n, kc, c0, n, overwrite),
                        4 => tile::<4>(a0, rsa, csa, b0, n, kc, c0, n, overwrite),
                        3 => tile::<3>(a0, rsa, csa, b0, n, kc, c0, n, overwrite),
                        2 => tile::<2>(a0, rsa, csa, b0, n, kc, c0, n, overwrite),
                        _ => tile::<1>(a0, rsa, csa, b0, n, kc, c0, n, overwrite),
                    }
                }
                i0 += MR;
            }
            p0 += kc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    fn transpose(rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = x[i * cols + j];
            }
        }
        out
    }

    #[test]
    fn transposed_operands_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|v| v as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|v| 1.0 - v as f32 * 0.25).collect();
        let expected = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &transpose(m, k, &a), true, &b, false, &mut c, 0.0);
        assert_eq!(c, expected);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &transpose(k, n, &b), true, &mut c, 0.0);
        assert_eq!(c, expected);
    }

    #[test]
    fn wide_products_match_naive() {
        // widths that take the tiled path, odd row counts, inner sizes past
        // one cache block, every operand layout and both beta modes
        for &(m, k, n) in &[(13, 5, 16), (7, 300, 32), (1, 64, 64), (20, 513, 48)] {
            let a: Vec<f32> = (0..m * k).map(|v| ((v * 37 % 101) as f32 - 50.0) * 0.01).collect();
            let b: Vec<f32> = (0..k * n).map(|v| ((v * 53 % 97) as f32 - 48.0) * 0.02).collect();
            let expected = naive(m, k, n, &a, &b);
            let at = transpose(m, k, &a);
            let bt = transpose(k, n, &b);
            for (a_t, b_t) in [(false, false), (true, false), (false, true), (true, true)] {
                let lhs = if a_t { &at } else { &a };
                let rhs = if b_t { &bt } else { &b };
                let mut c = vec![0.5; m * n];
                gemm(m, k, n, lhs, a_t, rhs, b_t, &mut c, 0.0);
                for (x, e) in c.iter().zip(&expected) {
                    assert!((x - e).abs() <= 1e-4 * (1.0 + e.abs()), "{m}x{k}x{n}: {x} vs {e}");
                }
                gemm(m, k, n, lhs, a_t, rhs, b_t, &mut c, 1.0);
                for (x, e) in c.iter().zip(&expected) {
                    assert!((x - 2.0 * e).abs() <= 2e-4 * (1.0 + e.abs()));
                }
            }
        }
    }

    #[test]
    fn beta_accumulates() {
        let mut c = vec![1.0, 1.0];
        gemm(1, 1, 2, &[2.0], false, &[3.0, 4.0], false, &mut c, 1.0);
        assert_eq!(c, vec![7.0, 9.0]);
        let mut c = vec![1.0; 16];
        gemm(1, 1, 16, &[2.0], false, &[1.0; 16], false, &mut c, 0.5);
        assert_eq!(c, vec![2.5; 16]);
        let mut c = vec![5.0];
        gemm(1, 0, 1, &[], false, &[], false, &mut c, 0.0);
        assert_eq!(c, vec![0.0]);
    }
}
