//! The O(N²) attention kernel.
//!
//! Each row `i` needs `m_i = Σ_j w_ij V x_j` and `W_i = Σ_j w_ij` with
//! `w_ij = exp(β<Qx_i, Kx_j> - max_j β<Qx_i, Kx_j>)`. The sums are carried
//! in two-level fixed point (`i64` high part plus a 40-bit refinement of
//! each term's truncation remainder), so integer addition makes them exact
//! and independent of the order of `j`. That gives bitwise permutation
//! equivariance and thread-count independence. The tangent projection
//! `m - <x,m>x/|x|²` is then evaluated in double-double, which keeps the
//! result accurate even when the self-interaction dominates `m`.

use super::{ModelParams, ParticleState};
use rayon::prelude::*;

/// What a row evaluation returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RowOutput {
    /// `P_x(m/W)`, the attention field.
    Tangent,
    /// `m/W`, the unprojected attention average.
    Mean,
}

const LO_SCALE: f64 = 1099511627776.0; // 2^40
const LO_UNSCALE: f64 = 1.0 / 1099511627776.0;
const BLOCK: usize = 512;

/// Particle data laid out for the kernel: `β Q x_i` row-major, `K x_j` and
/// `V x_j` as structure-of-arrays.
pub(crate) struct Prepared {
    pub n: usize,
    pub d: usize,
    qx: Vec<f64>,
    kt: Vec<f64>,
    vt: Vec<f64>,
    v_unscale: f64,
    w_scale: f64,
    w_unscale: f64,
}

/// `2^{61 - ceil(log2(n·bound))}` so that `n` terms of size `≤ bound`
/// stay below `2^61`.
fn fixed_scale(n: usize, bound: f64) -> (f64, f64) {
    let bound = if bound > 0.0 { bound } else { 1.0 };
    let e = ((n as f64) * bound).log2().ceil() as i32;
    let s = 61 - e;
    (2f64.powi(s), 2f64.powi(-s))
}

impl Prepared {
    pub fn new(state: &ParticleState, p: &ModelParams) -> Self {
        let n = state.len();
        let d = state.dim();
        let mut qx = vec![0.0; n * d];
        let mut kt = vec![0.0; n * d];
        let mut vt = vec![0.0; n * d];
        let mut kbuf = vec![0.0; d];
        let mut vbuf = vec![0.0; d];
        let mut vmax = 0.0f64;
        let bq = p.q.scale(p.beta);
        for j in 0..n {
            let x = state.point(j);
            bq.apply_into(x, &mut qx[j * d..(j + 1) * d]);
            p.k.apply_into(x, &mut kbuf);
            p.v.apply_into(x, &mut vbuf);
            for c in 0..d {
                kt[c * n + j] = kbuf[c];
                vt[c * n + j] = vbuf[c];
                vmax = vmax.max(vbuf[c].abs());
            }
        }
        let (v_scale, v_unscale) = fixed_scale(n, vmax);
        // Power of two: exact.
        vt.iter_mut().for_each(|v| *v *= v_scale);
        let (w_scale, w_unscale) = fixed_scale(n, 1.0);
        Prepared {
            n,
            d,
            qx,
            kt,
            vt,
            v_unscale,
            w_scale,
            w_unscale,
        }
    }
}

/// `e^x` for `x ≤ 0`, accurate to a couple of ulps, written so the
/// compiler can vectorize it; returns 0 below `-708`. Only fused
/// multiply-adds and plain IEEE operations, so every instruction set
/// produces the same bits.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const MAGIC: f64 = 6755399441055744.0; // 1.5·2^52
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.93147180369123816490e-01;
    const LN2_LO: f64 = 1.90821492927058770002e-10;
    let xc = if x < -708.0 { -708.0 } else { x };
    let t = xc.mul_add(LOG2E, MAGIC);
    let k = t - MAGIC;
    let r = (-k).mul_add(LN2_LO, (-k).mul_add(LN2_HI, xc));
    let mut p: f64 = 1.0 / 479001600.0;
    p = p.mul_add(r, 1.0 / 39916800.0);
    p = p.mul_add(r, 1.0 / 3628800.0);
    p = p.mul_add(r, 1.0 / 362880.0);
    p = p.mul_add(r, 1.0 / 40320.0);
    p = p.mul_add(r, 1.0 / 5040.0);
    p = p.mul_add(r, 1.0 / 720.0);
    p = p.mul_add(r, 1.0 / 120.0);
    p = p.mul_add(r, 1.0 / 24.0);
    p = p.mul_add(r, 1.0 / 6.0);
    p = p.mul_add(r, 0.5);
    p = p.mul_add(r, 1.0);
    p = p.mul_add(r, 1.0);
    let ki = (t.to_bits() as i64).wrapping_sub(MAGIC.to_bits() as i64);
    let scale = f64::from_bits(((ki + 1023) << 52) as u64);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

// Double-double helpers.

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[inline]
fn dd_add(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (s, e) = two_sum(a.0, b.0);
    let e = e + a.1 + b.1;
    two_sum(s, e)
}

#[inline]
fn dd_mul_f(a: (f64, f64), f: f64) -> (f64, f64) {
    let (p, e) = two_prod(a.0, f);
    two_sum(p, e + a.1 * f)
}

#[inline]
fn dd_div(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let q1 = a.0 / b.0;
    let r = dd_add(a, dd_mul_f(b, -q1));
    let q2 = r.0 / b.0;
    two_sum(q1, q2)
}

/// Exact value of a two-level accumulator as a double-double.
#[inline]
fn fixed_to_dd(hi: i64, lo: i64, unscale: f64) -> (f64, f64) {
    let h = hi as f64;
    let h_err = (hi - h as i64) as f64;
    let l = h_err + lo as f64 * LO_UNSCALE;
    let (s, e) = two_sum(h, l);
    (s * unscale, e * unscale)
}

#[inline(always)]
/// `v` is already multiplied by the fixed-point scale.
fn accumulate(w: &[f64], v: &[f64], hi: &mut i64, lo: &mut i64) {
    let mut h = 0i64;
    let mut l = 0i64;
    for (wj, vj) in w.iter().zip(v) {
        let t = wj * vj;
        // SAFETY: the scale keeps |t| < 2^61 and t is finite.
        let a: i64 = unsafe { t.to_int_unchecked() };
        let rem = (t - a as f64) * LO_SCALE;
        let b: i64 = unsafe { rem.to_int_unchecked() };
        h = h.wrapping_add(a);
        l = l.wrapping_add(b);
    }
    *hi = hi.wrapping_add(h);
    *lo = lo.wrapping_add(l);
}

#[inline(always)]
fn accumulate_weights(w: &[f64], scale: f64, hi: &mut i64, lo: &mut i64) {
    let mut h = 0i64;
    let mut l = 0i64;
    for wj in w {
        let t = wj * scale;
        let a: i64 = unsafe { t.to_int_unchecked() };
        let rem = (t - a as f64) * LO_SCALE;
        let b: i64 = unsafe { rem.to_int_unchecked() };
        h = h.wrapping_add(a);
        l = l.wrapping_add(b);
    }
    *hi = hi.wrapping_add(h);
    *lo = lo.wrapping_add(l);
}

pub(crate) struct Scratch {
    scores: Vec<f64>,
    acc_hi: Vec<i64>,
    acc_lo: Vec<i64>,
}

impl Scratch {
    pub fn new(n: usize, d: usize) -> Self {
        Scratch {
            scores: vec![0.0; n],
            acc_hi: vec![0; d],
            acc_lo: vec![0; d],
        }
    }
}

#[inline(always)]
fn row_body(
    prep: &Prepared,
    i: usize,
    x: &[f64],
    mode: RowOutput,
    scr: &mut Scratch,
    out: &mut [f64],
) {
    let n = prep.n;
    let d = prep.d;
    let q = &prep.qx[i * d..(i + 1) * d];
    let s = &mut scr.scores[..n];

    let k0 = &prep.kt[..n];
    for (sj, kj) in s.iter_mut().zip(k0) {
        *sj = q[0] * kj;
    }
    for c in 1..d {
        let kc = &prep.kt[c * n..(c + 1) * n];
        let qc = q[c];
        for (sj, kj) in s.iter_mut().zip(kc) {
            *sj += qc * kj;
        }
    }
    // Eight independent lanes so the reduction vectorizes; max is exact, so
    // the lane split does not change the result.
    let mut lanes = [f64::NEG_INFINITY; 8];
    let mut chunks = s.chunks_exact(8);
    for ch in &mut chunks {
        for k in 0..8 {
            lanes[k] = if ch[k] > lanes[k] { ch[k] } else { lanes[k] };
        }
    }
    let mut mx = f64::NEG_INFINITY;
    for &v in lanes.iter().chain(chunks.remainder()) {
        mx = if v > mx { v } else { mx };
    }

    let mut w_hi = 0i64;
    let mut w_lo = 0i64;
    scr.acc_hi.iter_mut().for_each(|a| *a = 0);
    scr.acc_lo.iter_mut().for_each(|a| *a = 0);
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let blk = &mut s[start..end];
        for v in blk.iter_mut() {
            *v = exp_nonpositive(*v - mx);
        }
        accumulate_weights(blk, prep.w_scale, &mut w_hi, &mut w_lo);
        for c in 0..d {
            let vc = &prep.vt[c * n + start..c * n + end];
            accumulate(
                blk,
                vc,
                &mut scr.acc_hi[c],
                &mut scr.acc_lo[c],
            );
        }
        start = end;
    }

    let wsum = {
        let (h, l) = fixed_to_dd(w_hi, w_lo, prep.w_unscale);
        h + l
    };
    match mode {
        RowOutput::Mean => {
            for c in 0..d {
                let (h, l) = fixed_to_dd(scr.acc_hi[c], scr.acc_lo[c], prep.v_unscale);
                out[c] = (h + l) / wsum;
            }
        }
        RowOutput::Tangent => {
            let mut xx = (0.0, 0.0);
            let mut dotp = (0.0, 0.0);
            for c in 0..d {
                let m = fixed_to_dd(scr.acc_hi[c], scr.acc_lo[c], prep.v_unscale);
                xx = dd_add(xx, two_prod(x[c], x[c]));
                dotp = dd_add(dotp, dd_mul_f(m, x[c]));
            }
            let ratio = dd_div(dotp, xx);
            for c in 0..d {
                let m = fixed_to_dd(scr.acc_hi[c], scr.acc_lo[c], prep.v_unscale);
                let t = dd_add(m, dd_mul_f(ratio, -x[c]));
                out[c] = (t.0 + t.1) / wsum;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma,avx512f,avx512dq,avx512vl")]
unsafe fn row_avx512(
    prep: &Prepared,
    i: usize,
    x: &[f64],
    mode: RowOutput,
    scr: &mut Scratch,
    out: &mut [f64],
) {
    row_body(prep, i, x, mode, scr, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn row_avx2(
    prep: &Prepared,
    i: usize,
    x: &[f64],
    mode: RowOutput,
    scr: &mut Scratch,
    out: &mut [f64],
) {
    row_body(prep, i, x, mode, scr, out)
}

#[derive(Clone, Copy)]
enum Isa {
    #[cfg(target_arch = "x86_64")]
    Avx512,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    Generic,
}

fn detect_isa() -> Isa {
    #[cfg(target_arch = "x86_64")]
    {
        if std::env::var_os("SPHEREFLOW_GENERIC_KERNEL").is_none() {
            if is_x86_feature_detected!("avx512f")
                && is_x86_feature_detected!("avx512dq")
                && is_x86_feature_detected!("avx512vl")
                && is_x86_feature_detected!("avx2")
                && is_x86_feature_detected!("fma")
            {
                return Isa::Avx512;
            }
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                return Isa::Avx2;
            }
        }
    }
    Isa::Generic
}

/// One row of the kernel. Every instruction-set variant runs the same
/// IEEE operations in the same order, so results are identical across them.
fn row(
    isa: Isa,
    prep: &Prepared,
    i: usize,
    x: &[f64],
    mode: RowOutput,
    scr: &mut Scratch,
    out: &mut [f64],
) {
    match isa {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: features checked in `detect_isa`.
        Isa::Avx512 => unsafe { row_avx512(prep, i, x, mode, scr, out) },
        #[cfg(target_arch = "x86_64")]
        Isa::Avx2 => unsafe { row_avx2(prep, i, x, mode, scr, out) },
        Isa::Generic => row_body(prep, i, x, mode, scr, out),
    }
}

/// Evaluates all rows into `out` (`N × d`, row-major).
pub(crate) fn eval_all(state: &ParticleState, p: &ModelParams, mode: RowOutput, out: &mut [f64]) {
    let prep = Prepared::new(state, p);
    let d = prep.d;
    let n = prep.n;
    debug_assert_eq!(out.len(), n * d);
    let isa = detect_isa();
    let rows_per_chunk = 64usize;
    out.par_chunks_mut(rows_per_chunk * d)
        .enumerate()
        .for_each_init(
            || Scratch::new(n, d),
            |scr, (ci, chunk)| {
                for (r, o) in chunk.chunks_mut(d).enumerate() {
                    let i = ci * rows_per_chunk + r;
                    row(isa, &prep, i, state.point(i), mode, scr, o);
                }
            },
        );
}

/// Evaluates a single row.
pub(crate) fn eval_row(
    state: &ParticleState,
    p: &ModelParams,
    i: usize,
    mode: RowOutput,
) -> Vec<f64> {
    let prep = Prepared::new(state, p);
    let mut scr = Scratch::new(prep.n, prep.d);
    let mut out = vec![0.0; prep.d];
    row(
        detect_isa(),
        &prep,
        i,
        state.point(i),
        mode,
        &mut scr,
        &mut out,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_accurate() {
        let mut worst = 0.0f64;
        let mut x = 0.0;
        while x > -708.0 {
            let a = exp_nonpositive(x);
            let b = x.exp();
            worst = worst.max(((a - b) / b).abs());
            x -= 0.0137;
        }
        assert!(worst < 4.0 * f64::EPSILON, "relative error {worst:e}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-800.0), 0.0);
    }

    #[test]
    fn fixed_point_is_exact_for_dyadics() {
        let w = vec![0.5, 0.25, 1.0, 0.125];
        let (s, u) = fixed_scale(4, 8.0);
        let v: Vec<f64> = [1.0, -2.0, 3.0, 8.0].iter().map(|x| x * s).collect();
        let (mut h, mut l) = (0, 0);
        accumulate(&w, &v, &mut h, &mut l);
        let (a, b) = fixed_to_dd(h, l, u);
        assert_eq!(a + b, 0.5 - 0.5 + 3.0 + 1.0);
    }

    #[test]
    fn accumulation_is_order_independent() {
        let w: Vec<f64> = (0..1000)
            .map(|i| ((i * 7919) % 1000) as f64 / 997.0)
            .collect();
        let (s, _) = fixed_scale(1000, 1.0);
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * s).collect();
        let (mut h1, mut l1) = (0, 0);
        accumulate(&w, &v, &mut h1, &mut l1);
        let mut wr = w.clone();
        let mut vr = v.clone();
        wr.reverse();
        vr.reverse();
        let (mut h2, mut l2) = (0, 0);
        accumulate(&wr, &vr, &mut h2, &mut l2);
        assert_eq!((h1, l1), (h2, l2));
    }

    #[test]
    fn instruction_set_variants_agree_bitwise() {
        use crate::matrix::Matrix;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<_> = (0..300)
            .map(|_| crate::sphere::sample_uniform(&mut rng, 5))
            .collect();
        let s = ParticleState::from_points(&pts).unwrap();
        let a = Matrix::from_row_major(
            5,
            5,
            (0..25)
                .map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0)
                .collect(),
        )
        .unwrap();
        let p = ModelParams::new(a.clone(), a.transpose(), a, 13.0).unwrap();
        let prep = Prepared::new(&s, &p);
        let mut isas = vec![Isa::Generic];
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
                isas.push(Isa::Avx2);
            }
            if is_x86_feature_detected!("avx512f")
                && is_x86_feature_detected!("avx512dq")
                && is_x86_feature_detected!("avx512vl")
                && is_x86_feature_detected!("avx2")
                && is_x86_feature_detected!("fma")
            {
                isas.push(Isa::Avx512);
            }
        }
        for mode in [RowOutput::Tangent, RowOutput::Mean] {
            let mut reference: Option<Vec<u64>> = None;
            for &isa in &isas {
                let mut scr = Scratch::new(prep.n, prep.d);
                let mut out = vec![0.0; s.flat().len()];
                for (i, o) in out.chunks_mut(5).enumerate() {
                    row(isa, &prep, i, s.point(i), mode, &mut scr, o);
                }
                let bits: Vec<u64> = out.iter().map(|v| v.to_bits()).collect();
                match &reference {
                    None => reference = Some(bits),
                    Some(r) => assert_eq!(r, &bits),
                }
            }
        }
    }
}
