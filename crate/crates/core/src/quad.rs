//! Adaptive quadrature, Gauss–Legendre rules and bracketed root finding.

use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const WG: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

#[derive(Debug, Clone, Copy)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let hl = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = hl * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kron += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kron * hl, ((kron - gauss) * hl).abs())
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive Gauss–Kronrod (7/15) integration of `f` over `[a, b]`.
///
/// Panels with the largest error estimate are bisected until the summed
/// estimate drops below `max(abs_tol, rel_tol·|I|)` or the panel budget is spent.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Estimate {
    if a == b {
        return Estimate { value: 0.0, error: 0.0 };
    }
    let (value, error) = gk15(&mut f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value, error });
    let mut total = value;
    let mut err = error;
    let mut panels = 1usize;
    while err > abs_tol.max(rel_tol * total.abs()) && panels < 4000 {
        let worst = match heap.pop() {
            Some(p) => p,
            None => break,
        };
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) {
            heap.push(worst);
            break;
        }
        let (v1, e1) = gk15(&mut f, worst.a, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.b);
        total += v1 + v2 - worst.value;
        err += e1 + e2 - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
        panels += 1;
    }
    // re-sum to shed the drift of incremental updates
    let value: f64 = heap.iter().map(|p| p.value).sum();
    let error: f64 = heap.iter().map(|p| p.error).sum();
    Estimate { value, error }
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Root {
    pub x: f64,
    pub iterations: usize,
}

/// Root of a monotone function on a sign-changing bracket.
///
/// Secant (regula falsi, Illinois variant) steps are taken while they shrink
/// the bracket fast enough; otherwise the step falls back to bisection.
/// Requires `f(lo)` and `f(hi)` of opposite sign (or one of them zero).
pub fn bracketed_root<F: FnMut(f64) -> f64>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_iter: usize,
) -> Option<Root> {
    let mut flo = f(lo);
    let mut fhi = f(hi);
    if flo == 0.0 {
        return Some(Root { x: lo, iterations: 0 });
    }
    if fhi == 0.0 {
        return Some(Root { x: hi, iterations: 0 });
    }
    if flo.signum() == fhi.signum() || flo.is_nan() || fhi.is_nan() {
        return None;
    }
    let mut side = 0i8;
    for it in 1..=max_iter {
        let width = hi - lo;
        if width.abs() <= abs_tol + rel_tol * lo.abs().max(hi.abs()) {
            return Some(Root { x: 0.5 * (lo + hi), iterations: it });
        }
        let mut x = (lo * fhi - hi * flo) / (fhi - flo);
        if !(x > lo.min(hi) && x < lo.max(hi)) || it % 4 == 0 {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x);
        if fx == 0.0 {
            return Some(Root { x, iterations: it });
        }
        if fx.signum() == flo.signum() {
            lo = x;
            flo = fx;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            fhi = fx;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    Some(Root { x: 0.5 * (lo + hi), iterations: max_iter })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gk_integrates_smooth_and_peaked_functions() {
        let e = integrate(|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-14, 1e-14);
        assert!((e.value - 2.0).abs() < 1e-13);
        let e = integrate(|x: f64| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-12, 1e-12);
        let exact = 2.0 / 1e-2 * (1.0f64 / 1e-2).atan();
        assert!((e.value - exact).abs() < 1e-8 * exact);
    }

    #[test]
    fn gauss_legendre_is_exact_to_degree_2n_minus_1() {
        let (x, w) = gauss_legendre(8);
        for k in 0..16 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "degree {k}: {q} vs {exact}");
        }
    }

    #[test]
    fn root_of_cubic() {
        let r = bracketed_root(|x| x * x * x - 2.0, 0.0, 2.0, 1e-15, 0.0, 200).unwrap();
        assert!((r.x - 2f64.cbrt()).abs() < 1e-14);
        assert!(bracketed_root(|x| x * x + 1.0, -1.0, 1.0, 1e-12, 0.0, 50).is_none());
    }
}
