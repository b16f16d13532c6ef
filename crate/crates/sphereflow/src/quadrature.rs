//! Gauss–Legendre rules and composite integration with panel doubling.

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi's initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() <= 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        GaussLegendre { nodes, weights }
    }

    /// `∫_a^b f` with this rule mapped onto `[a, b]`.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut s = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            s += w * f(mid + half * x);
        }
        s * half
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite rule over the given panel breakpoints.
pub fn composite<F: FnMut(f64) -> f64>(rule: &GaussLegendre, breaks: &[f64], mut f: F) -> f64 {
    breaks
        .windows(2)
        .map(|w| rule.integrate(w[0], w[1], &mut f))
        .sum()
}

/// Splits every panel of `breaks` in half.
pub fn refine(breaks: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * breaks.len());
    for w in breaks.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    out.extend(breaks.last());
    out
}

/// Integrates over `breaks`, halving every panel until two successive
/// levels agree to `rel_tol` (relative to `scale` when the integral itself
/// is near zero).
pub fn integrate_doubling<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    breaks: &[f64],
    rel_tol: f64,
    max_level: usize,
    scale: f64,
    mut f: F,
) -> Result<f64> {
    let mut b = breaks.to_vec();
    let mut prev = composite(rule, &b, &mut f);
    let mut change = f64::INFINITY;
    for level in 1..=max_level {
        b = refine(&b);
        let cur = composite(rule, &b, &mut f);
        change = (cur - prev).abs() / cur.abs().max(scale).max(f64::MIN_POSITIVE);
        if change <= rel_tol {
            return Ok(cur);
        }
        prev = cur;
        if level == max_level {
            break;
        }
    }
    Err(Error::QuadratureNoConvergence {
        level: max_level,
        change,
    })
}

/// Vector-valued [`integrate_doubling`]: `f(x, out)` fills `out` with
/// `dim` integrands; convergence is judged on the largest component.
pub fn integrate_doubling_vec<F: FnMut(f64, &mut [f64])>(
    rule: &GaussLegendre,
    breaks: &[f64],
    rel_tol: f64,
    max_level: usize,
    dim: usize,
    mut f: F,
) -> Result<Vec<f64>> {
    let mut buf = vec![0.0; dim];
    let mut eval = |b: &[f64]| {
        let mut acc = vec![0.0; dim];
        for w in b.windows(2) {
            let half = 0.5 * (w[1] - w[0]);
            let mid = 0.5 * (w[0] + w[1]);
            for (x, wt) in rule.nodes.iter().zip(&rule.weights) {
                f(mid + half * x, &mut buf);
                for (a, v) in acc.iter_mut().zip(&buf) {
                    *a += wt * half * v;
                }
            }
        }
        acc
    };
    let mut b = breaks.to_vec();
    let mut prev = eval(&b);
    let mut change = f64::INFINITY;
    for _ in 0..max_level {
        b = refine(&b);
        let cur = eval(&b);
        let scale = cur.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        change = cur.iter().zip(&prev).fold(0.0f64, |m, (c, p)| m.max((c - p).abs())) / scale;
        if change <= rel_tol {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::QuadratureNoConvergence {
        level: max_level,
        change,
    })
}

/// Breakpoints on `[0, L]` graded geometrically towards 0: `0, w, 2w, 4w, …`.
pub fn graded_breaks(length: f64, first: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut x = first.min(length);
    while x < length {
        out.push(x);
        x *= 2.0;
    }
    out.push(length);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_polynomials() {
        let gl = GaussLegendre::new(10);
        // degree 19 is integrated exactly
        let v = gl.integrate(-1.0, 1.0, |x| x.powi(18));
        assert!((v - 2.0 / 19.0).abs() < 1e-15);
        let w: f64 = gl.weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn large_rules_are_accurate() {
        for n in [64, 128, 257] {
            let gl = GaussLegendre::new(n);
            let v = gl.integrate(0.0, std::f64::consts::PI, f64::sin);
            assert!((v - 2.0).abs() < 1e-13, "n={n}: {v}");
        }
    }

    #[test]
    fn doubling_converges_on_peaked_integrand() {
        let gl = GaussLegendre::new(16);
        let beta = 800.0;
        let v = integrate_doubling(&gl, &graded_breaks(1.0, 0.01), 1e-12, 12, 0.0, |s| {
            (-beta * s * s).exp()
        })
        .unwrap();
        let exact = 0.5 * (std::f64::consts::PI / beta).sqrt();
        assert!((v - exact).abs() < 1e-13);
    }
}
