//! Small numerical helpers: adaptive quadrature, modified Bessel functions,
//! the normal tail and polynomial least squares.

use std::f64::consts::PI;

use statrs::function::erf::erfc;

fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let h = b - a;
    let left = h / 12.0 * (fa + 4.0 * flm + fm);
    let right = h / 12.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    let floor = 1e-14 * (left + right).abs();
    if depth == 0 || delta.abs() <= 15.0 * tol.max(floor) {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    // start from a few panels so that narrow peaks at interior points are seen
    let panels = 8;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (x0, x1) = (a + h * i as f64, a + h * (i + 1) as f64);
            let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            let whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
            simpson_step(&f, x0, x1, f0, fm, f1, whole, tol / panels as f64, 30)
        })
        .sum()
}

/// `exp(-x) * I_k(x)` from the integral `1/pi * int_0^pi cos(k t) exp(x cos t) dt`.
pub fn bessel_i_scaled(k: u32, x: f64) -> f64 {
    let kf = k as f64;
    // cos t - 1 <= -2 t^2 / pi^2, so past this point the integrand is below e^-40
    let upper = if x > 20.0 { PI * (20.0 / x).sqrt() } else { PI };
    integrate(|t| (kf * t).cos() * (x * (t.cos() - 1.0)).exp(), 0.0, upper, 1e-14) / PI
}

/// Modified Bessel function of the first kind, integer order.
pub fn bessel_i(k: u32, x: f64) -> f64 {
    bessel_i_scaled(k, x) * x.exp()
}

/// `I_k(x) / I_0(x)`.
pub fn bessel_ratio(k: u32, x: f64) -> f64 {
    if x == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    bessel_i_scaled(k, x) / bessel_i_scaled(0, x)
}

/// Solve `I_1(eta) / I_0(eta) = r` for `eta >= 0`. Returns infinity for `r`
/// at (numerically) 1.
///
/// Newton on `A(eta) = I_1/I_0` with `A' = 1 - A/eta - A^2`, started from the
/// usual von Mises concentration approximation and kept inside a bisection
/// bracket.
pub fn inverse_bessel_ratio(r: f64, tol: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    if r >= 1.0 - 1e-12 {
        return f64::INFINITY;
    }
    let mut x = if r < 0.53 {
        2.0 * r + r.powi(3) + 5.0 * r.powi(5) / 6.0
    } else if r < 0.85 {
        -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    } else {
        1.0 / (r.powi(3) - 4.0 * r * r + 3.0 * r)
    };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    for _ in 0..200 {
        let a = bessel_ratio(1, x);
        let err = a - r;
        if err.abs() < tol {
            return x;
        }
        if err < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let slope = 1.0 - a / x - a * a;
        let mut next = x - err / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if hi.is_finite() && hi - lo <= 1e-15 * hi {
            return 0.5 * (lo + hi);
        }
        x = next;
    }
    x
}

/// Standard normal tail probability.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Least-squares polynomial coefficients (lowest order first) via Householder QR.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Vec<f64> {
    let m = x.len();
    let n = degree + 1;
    assert!(m == y.len() && m >= n, "polyfit needs at least degree + 1 points");
    let mut a: Vec<Vec<f64>> = x.iter().map(|&xi| (0..n).map(|j| xi.powi(j as i32)).collect()).collect();
    let mut b = y.to_vec();
    for k in 0..n {
        let norm = (k..m).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..m).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vn = v.iter().map(|t| t * t).sum::<f64>();
        if vn == 0.0 {
            continue;
        }
        for j in k..n {
            let s = (k..m).map(|i| v[i - k] * a[i][j]).sum::<f64>() * 2.0 / vn;
            for i in k..m {
                a[i][j] -= s * v[i - k];
            }
        }
        let s = (k..m).map(|i| v[i - k] * b[i]).sum::<f64>() * 2.0 / vn;
        for i in k..m {
            b[i] -= s * v[i - k];
        }
    }
    let mut c = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = ((k + 1)..n).map(|j| a[k][j] * c[j]).sum();
        c[k] = (b[k] - s) / a[k][k];
    }
    c
}

pub fn polyval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from the power series sum (x/2)^(2m+k) / (m! (m+k)!).
    fn series(k: u32, x: f64) -> f64 {
        let mut term = (x / 2.0).powi(k as i32) / (1..=k).map(|v| v as f64).product::<f64>();
        let mut sum = term;
        for m in 1..200 {
            term *= (x / 2.0).powi(2) / (m as f64 * (m + k as i32) as f64);
            sum += term;
        }
        sum
    }

    #[test]
    fn bessel_matches_series() {
        for &x in &[0.1, 1.0, 2.5, 7.0, 20.0] {
            for k in 0..3 {
                let a = bessel_i(k, x);
                let b = series(k, x);
                assert!((a - b).abs() < 1e-10 * b, "k={k} x={x} {a} {b}");
            }
        }
    }

    #[test]
    fn large_argument_ratio_asymptotics() {
        // I1/I0 ~ 1 - 1/(2x) - 1/(8x^2)
        let x = 1e4;
        let r = bessel_ratio(1, x);
        let approx = 1.0 - 1.0 / (2.0 * x) - 1.0 / (8.0 * x * x);
        assert!((r - approx).abs() < 1e-9);
    }

    #[test]
    fn inverse_ratio_round_trips() {
        for &eta in &[0.01, 0.5, 3.0, 40.0, 900.0] {
            let r = bessel_ratio(1, eta);
            let back = inverse_bessel_ratio(r, 1e-12);
            assert!((back - eta).abs() < 1e-5 * eta.max(1.0), "{eta} {back}");
        }
        assert_eq!(inverse_bessel_ratio(0.0, 1e-10), 0.0);
        assert!(inverse_bessel_ratio(1.0, 1e-10).is_infinite());
    }

    #[test]
    fn normal_tail() {
        assert!((normal_sf(0.0) - 0.5).abs() < 1e-15);
        let v = normal_sf(1.959963984540054);
        assert!((v - 0.025).abs() < 1e-10, "{v}");
    }

    #[test]
    fn polyfit_recovers_cubic() {
        let x: Vec<f64> = (0..50).map(|i| -1.0 + 2.0 * i as f64 / 49.0).collect();
        let y: Vec<f64> = x.iter().map(|t| 1.0 - 2.0 * t + 0.5 * t.powi(3)).collect();
        let c = polyfit(&x, &y, 7);
        for (i, want) in [1.0, -2.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0].iter().enumerate() {
            assert!((c[i] - want).abs() < 1e-9, "{c:?}");
        }
        assert!((polyval(&c, 0.3) - (1.0 - 0.6 + 0.5 * 0.027)).abs() < 1e-12);
    }
}
