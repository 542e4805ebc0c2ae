//! Deterministic composite Gauss-Legendre quadrature and tail bounds used by
//! the spectral-density Fourier-pair check.

use std::sync::OnceLock;

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
///
/// Computed by Newton iteration on the Legendre polynomial; accurate to a few
/// ulps for the orders used here.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Bonnet recurrence for P_n(x) and P_n'(x).
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl64() -> &'static (Vec<f64>, Vec<f64>) {
    static CACHE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    CACHE.get_or_init(|| gauss_legendre(64))
}

/// Integrates `f` over `[lo, hi]` with composite 64-point Gauss-Legendre
/// panels of width at most `panel_width`.
pub fn integrate_panels<F: Fn(f64) -> f64>(lo: f64, hi: f64, panel_width: f64, f: F) -> f64 {
    assert!(hi > lo && panel_width > 0.0);
    let n_panels = ((hi - lo) / panel_width).ceil().max(1.0) as usize;
    let w = (hi - lo) / n_panels as f64;
    let (nodes, weights) = gl64();
    let mut total = 0.0;
    for p in 0..n_panels {
        let a = lo + p as f64 * w;
        let c = a + 0.5 * w;
        let h = 0.5 * w;
        let mut panel = 0.0;
        for (x, wt) in nodes.iter().zip(weights.iter()) {
            panel += wt * f(c + h * x);
        }
        total += panel * h;
    }
    total
}

/// Survival function of the standard Student-t distribution with 5 degrees of
/// freedom, in closed form.
pub fn student_t5_survival(x: f64) -> f64 {
    // With t = sqrt(5) tan(theta) the t5 density integrates to
    // (8/3pi) * int cos^4(theta) dtheta.
    let theta = (x / 5f64.sqrt()).atan();
    0.5 - theta / std::f64::consts::PI
        - 2.0 * (2.0 * theta).sin() / (3.0 * std::f64::consts::PI)
        - (4.0 * theta).sin() / (12.0 * std::f64::consts::PI)
}

/// Chernoff upper bound on the standard normal survival function.
pub fn normal_survival_bound(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        0.5 * (-0.5 * x * x).exp()
    }
}
