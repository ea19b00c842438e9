// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-threaded `f32` GEMM with `f64` accumulation.
//!
//! `B` is packed into column panels of width [`NR`]; a 4x8 register tile of
//! `f64` accumulators is swept over the full inner dimension, so every
//! output element is the in-order sum over `p = 0..k`.

const MR: usize = 4;
const NR: usize = 8;

pub(crate) fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { gemm_avx2(a, b, m, k, n, &mut out) };
            return out;
        }
    }
    gemm_portable(a, b, m, k, n, &mut out);
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_avx2(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    gemm_body::<true>(a, b, m, k, n, out);
}

fn gemm_portable(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    gemm_body::<false>(a, b, m, k, n, out);
}

#[inline(always)]
fn gemm_body<const FMA: bool>(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    let zeros = vec![0.0f32; k];
    let mut panel = vec![0.0f32; k * NR];
    for j0 in (0..n).step_by(NR) {
        let nr = NR.min(n - j0);
        for p in 0..k {
            let src = &b[p * n + j0..p * n + j0 + nr];
            let dst = &mut panel[p * NR..p * NR + NR];
            dst[..nr].copy_from_slice(src);
            dst[nr..].fill(0.0);
        }
        for i0 in (0..m).step_by(MR) {
            let mr = MR.min(m - i0);
            let row = |r: usize| -> &[f32] {
                if r < mr {
                    &a[(i0 + r) * k..(i0 + r + 1) * k]
                } else {
                    &zeros
                }
            };
            let tile = micro_kernel::<FMA>([row(0), row(1), row(2), row(3)], &panel, k);
            for (r, acc) in tile.iter().enumerate().take(mr) {
                let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + nr];
                for (dst, v) in o.iter_mut().zip(acc) {
                    *dst = *v as f32;
                }
            }
        }
    }
}

#[inline(always)]
fn micro_kernel<const FMA: bool>(rows: [&[f32]; MR], panel: &[f32], k: usize) -> [[f64; NR]; MR] {
    let mut c = [[0.0f64; NR]; MR];
    let [r0, r1, r2, r3] = rows;
    let (r0, r1, r2, r3) = (&r0[..k], &r1[..k], &r2[..k], &r3[..k]);
    for p in 0..k {
        let bp = &panel[p * NR..p * NR + NR];
        let mut bv = [0.0f64; NR];
        for q in 0..NR {
            bv[q] = f64::from(bp[q]);
        }
        let av = [
            f64::from(r0[p]),
            f64::from(r1[p]),
            f64::from(r2[p]),
            f64::from(r3[p]),
        ];
        for r in 0..MR {
            for q in 0..NR {
                c[r][q] = if FMA {
                    av[r].mul_add(bv[q], c[r][q])
                } else {
                    c[r][q] + av[r] * bv[q]
                };
            }
        }
    }
    c
}
