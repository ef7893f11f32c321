//! Closed-form probability machinery for Binomial summary edges and their
//! Gaussian proxy.
//!
//! A summary edge is `ℬ(n, λ)` with `n → ∞`, `λ → 0` and `nλ = m` held finite.
//! Training never touches `n` or `λ`: sampling goes through the proxy
//! `𝒩(m, m(1−m))` and the KL between posterior and prior edges is replaced by
//! the closed-form upper bound [`binomial_kl_bound`]. Everything here is a
//! pure `f64` function; [`oracle`] holds the independent numerical routes used
//! to check them.

use crate::error::{domain, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianParams {
    pub mu: f64,
    pub var: f64,
}

impl GaussianParams {
    pub fn new(mu: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) || !var.is_finite() || !mu.is_finite() {
            return Err(domain(format!("gaussian needs finite mean and positive variance, got ({mu}, {var})")));
        }
        Ok(Self { mu, var })
    }
}

/// A Binomial edge described by its finite product `m = nλ`. With a finite
/// `n` it is a concrete `ℬ(n, m/n)` usable by the exact oracles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinomialSpec {
    pub m: f64,
    pub n: Option<u64>,
}

impl BinomialSpec {
    pub fn limit(m: f64) -> Result<Self> {
        check_half_open(m, "m")?;
        Ok(Self { m, n: None })
    }

    pub fn finite(m: f64, n: u64) -> Result<Self> {
        check_half_open(m, "m")?;
        if n == 0 || m / n as f64 >= 1.0 {
            return Err(domain(format!("need n ≥ 1 and λ = m/n < 1, got m={m}, n={n}")));
        }
        Ok(Self { m, n: Some(n) })
    }

    pub fn lambda(&self) -> Option<f64> {
        self.n.map(|n| self.m / n as f64)
    }

    pub fn proxy(&self) -> ProxyGaussian {
        ProxyGaussian::new(self.m)
    }
}

/// De Moivre–Laplace proxy `𝒩(m, m(1−m))` of a summary edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyGaussian {
    pub mean: f64,
    pub var: f64,
}

impl ProxyGaussian {
    pub fn new(m: f64) -> Self {
        Self {
            mean: m,
            var: m * (1.0 - m),
        }
    }
}

fn check_half_open(m: f64, name: &str) -> Result<()> {
    if !(m > 0.0 && m < 0.5) {
        return Err(domain(format!("{name} must lie in (0, 1/2), got {m}")));
    }
    Ok(())
}

/// `KL(p ‖ q)` between univariate Gaussians.
pub fn gaussian_kl(p: GaussianParams, q: GaussianParams) -> Result<f64> {
    let p = GaussianParams::new(p.mu, p.var)?;
    let q = GaussianParams::new(q.mu, q.var)?;
    let ratio = p.var / q.var;
    let shift = (p.mu - q.mu).powi(2) / q.var;
    Ok(0.5 * (ratio - 1.0 - ratio.ln() + shift))
}

/// `KL(𝒩(x, x(1−x)) ‖ target)` for `x ∈ (0, 1)`.
pub fn f1(x: f64, target: GaussianParams) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(domain(format!("x must lie in (0, 1), got {x}")));
    }
    gaussian_kl(GaussianParams::new(x, x * (1.0 - x))?, target)
}

/// The ratio `l = 2σ²/(1−2μ)` that parameterizes the minimizer of [`f1`].
pub fn theorem1_l(target: GaussianParams) -> Result<f64> {
    let target = GaussianParams::new(target.mu, target.var)?;
    if !(target.mu < 0.5) {
        return Err(domain(format!("closed form needs μ < 1/2, got {}", target.mu)));
    }
    Ok(2.0 * target.var / (1.0 - 2.0 * target.mu))
}

/// `m = (1 + l − √(1 + l²)) / 2`, written in the cancellation-free form
/// `l / (1 + l + √(1 + l²))`. Maps `l ∈ (0, ∞)` onto `(0, 1/2)`.
pub fn m_from_l(l: f64) -> f64 {
    l / (1.0 + l + l.hypot(1.0))
}

/// Closed-form minimizer of [`f1`] on `(0, 1)`; always in `(0, 1/2)`.
pub fn theorem1_m(target: GaussianParams) -> Result<f64> {
    Ok(m_from_l(theorem1_l(target)?))
}

/// Excess of the proxy KL above its infimum in the `λ → 0` limit:
/// `√(1−m) + 1/(2(1−m)) − 3/2`.
pub fn delta_f2(m: f64) -> Result<f64> {
    check_half_open(m, "m")?;
    let q = 1.0 - m;
    Ok(q.sqrt() + 0.5 / q - 1.5)
}

/// Right end of the interval on which `delta_f2` is bounded, `√2/2 − 1/2`.
pub fn delta_f2_interval_end() -> f64 {
    std::f64::consts::FRAC_1_SQRT_2 - 0.5
}

/// Exact `KL(ℬ(n, λ) ‖ ℬ(n, λ⁰))`.
pub fn binomial_kl_exact(n: u64, lam: f64, lam0: f64) -> Result<f64> {
    if n == 0 {
        return Err(domain("binomial needs n ≥ 1"));
    }
    for (name, p) in [("λ", lam), ("λ⁰", lam0)] {
        if !(p > 0.0 && p < 1.0) {
            return Err(domain(format!("{name} must lie in (0, 1), got {p}")));
        }
    }
    let n = n as f64;
    let tail = (-lam).ln_1p() - (-lam0).ln_1p();
    Ok(n * lam * (lam / lam0).ln() + n * (1.0 - lam) * tail)
}

/// `n → ∞` limit of [`binomial_kl_exact`] at fixed `m = nλ`, `m⁰ = nλ⁰`: the
/// Poisson KL `m log(m/m⁰) + m⁰ − m`.
pub fn poisson_limit_kl(m: f64, m0: f64) -> Result<f64> {
    if !(m > 0.0 && m0 > 0.0) {
        return Err(domain(format!("Poisson rates must be positive, got ({m}, {m0})")));
    }
    Ok(m * (m / m0).ln() + m0 - m)
}

fn h(x: f64) -> f64 {
    1.0 - x + 0.5 * x * x
}

/// Closed-form upper bound on the KL between two infinite-`n` Binomials,
/// `m log(m/m⁰) + (1−m) log(h(m)/h(m⁰))` with `h(x) = 1 − x + x²/2`.
///
/// The bound is proven for `m > m⁰`; the expression itself is smooth on all
/// of `(0, 1/2)²` and is evaluated there regardless of ordering.
pub fn binomial_kl_bound(m: f64, m0: f64) -> Result<f64> {
    check_half_open(m, "m")?;
    check_half_open(m0, "m⁰")?;
    Ok(m * (m / m0).ln() + (1.0 - m) * (h(m) / h(m0)).ln())
}

/// Independent numerical routes used to check the closed forms.
pub mod oracle {
    use statrs::function::erf::erfc;

    /// Minimizes `f` on `(lo, hi)`: a coarse grid picks the best bracket, then
    /// golden-section search narrows it to width `tol`.
    pub fn argmin(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid: usize, tol: f64) -> f64 {
        let step = (hi - lo) / (grid + 1) as f64;
        let mut best = (f64::INFINITY, 1usize);
        for i in 1..=grid {
            let v = f(lo + step * i as f64);
            if v < best.0 {
                best = (v, i);
            }
        }
        let mut a = lo + step * (best.1 - 1) as f64;
        let mut b = lo + step * (best.1 + 1) as f64;
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        while b - a > tol {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = f(d);
            }
        }
        0.5 * (a + b)
    }

    pub fn normal_cdf(x: f64, mean: f64, var: f64) -> f64 {
        0.5 * erfc(-(x - mean) / (2.0 * var).sqrt())
    }

    /// CDF of `ℬ(n, p)` at `k = 0, 1, …` until the remaining mass is below
    /// 1e-15 (or `k = n`).
    pub fn binomial_cdf(n: u64, p: f64) -> Vec<f64> {
        let nf = n as f64;
        let mut pmf = (nf * (-p).ln_1p()).exp();
        let mut cdf = vec![pmf];
        let ratio = p / (1.0 - p);
        let mut k = 0u64;
        while k < n && 1.0 - cdf[cdf.len() - 1] > 1e-15 {
            pmf *= (nf - k as f64) / (k as f64 + 1.0) * ratio;
            k += 1;
            let last = cdf[cdf.len() - 1];
            cdf.push((last + pmf).min(1.0));
        }
        cdf
    }

    /// Largest absolute gap between the CDF of `ℬ(n, m/n)` and the proxy
    /// `𝒩(m, m(1−m))` over the integer support. With `continuity` the normal
    /// CDF is read at `k + ½`.
    pub fn proxy_cdf_gap(m: f64, n: u64, continuity: bool) -> f64 {
        let var = m * (1.0 - m);
        let offset = if continuity { 0.5 } else { 0.0 };
        let cdf = binomial_cdf(n, m / n as f64);
        let mut gap: f64 = 0.0;
        // Extend a few points past the binomial tail so the normal tail is
        // compared against a CDF of 1.
        for k in 0..cdf.len() + 8 {
            let fb = cdf.get(k).copied().unwrap_or(1.0);
            let fnorm = normal_cdf(k as f64 + offset, m, var);
            gap = gap.max((fb - fnorm).abs());
        }
        gap
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::error::Error;

    fn g(mu: f64, var: f64) -> GaussianParams {
        GaussianParams::new(mu, var).unwrap()
    }

    #[test]
    fn gaussian_kl_reference_values() {
        assert_eq!(gaussian_kl(g(0.0, 1.0), g(0.0, 1.0)).unwrap(), 0.0);
        assert!((gaussian_kl(g(0.0, 1.0), g(1.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        // (r − 1 − ln r)/2 at r = 2.
        assert!((gaussian_kl(g(0.0, 2.0), g(0.0, 1.0)).unwrap() - 0.153426).abs() < 1e-6);
        assert!(matches!(GaussianParams::new(0.0, 0.0), Err(Error::Domain(_))));
        let bad = GaussianParams { mu: 0.0, var: -1.0 };
        assert!(gaussian_kl(bad, g(0.0, 1.0)).is_err());
    }

    #[test]
    fn f1_vanishes_on_matching_target() {
        let x: f64 = 0.3;
        assert!(f1(x, g(x, x * (1.0 - x))).unwrap().abs() < 1e-15);
        assert!(f1(0.0, g(0.0, 1.0)).is_err());
        assert!(f1(1.0, g(0.0, 1.0)).is_err());
    }

    #[test]
    fn f1_diverges_at_zero() {
        let t = g(0.0, 0.375);
        assert!(f1(1e-12, t).unwrap() > f1(1e-6, t).unwrap());
        assert!(f1(1e-300, t).unwrap() > 300.0);
    }

    #[test]
    fn theorem1_quarter_point() {
        let t = g(0.0, 0.375);
        assert!((theorem1_l(t).unwrap() - 0.75).abs() < 1e-15);
        let m = theorem1_m(t).unwrap();
        assert!((m - 0.25).abs() < 1e-15);
        let at = f1(m, t).unwrap();
        assert!(f1(m - 0.01, t).unwrap() > at);
        assert!(f1(m + 0.01, t).unwrap() > at);
        let probe = oracle::argmin(|x| f1(x, t).unwrap(), 0.0, 1.0, 10_000, 1e-9);
        assert!((probe - 0.25).abs() < 1e-6);
    }

    #[test]
    fn theorem1_unit_l() {
        let m = theorem1_m(g(0.0, 0.5)).unwrap();
        assert!((m - (2.0 - 2f64.sqrt()) / 2.0).abs() < 1e-15);
        assert!((m - 0.292893).abs() < 1e-6);
    }

    #[test]
    fn theorem1_limits_and_domain() {
        assert!(theorem1_m(g(0.0, 1e-12)).unwrap() < 1e-11);
        assert!(theorem1_m(g(0.0, 1e-12)).unwrap() > 0.0);
        assert!((m_from_l(1e12) - 0.5).abs() < 1e-11);
        assert!(theorem1_m(g(0.5, 1.0)).is_err());
        assert!(theorem1_m(g(0.7, 1.0)).is_err());
    }

    #[test]
    fn delta_f2_reference_values() {
        assert!(delta_f2(1e-12).unwrap().abs() < 1e-11);
        let end = delta_f2(delta_f2_interval_end()).unwrap();
        assert!((end - 0.021047).abs() < 1e-6, "{end}");
        // √0.9 + 1/1.8 − 1.5
        let at = delta_f2(0.1).unwrap();
        assert!((at - (0.9f64.sqrt() + 1.0 / 1.8 - 1.5)).abs() < 1e-15);
        assert!((at - 0.0042389).abs() < 1e-7, "{at}");
        assert!(delta_f2(0.5).is_err());
        assert!(delta_f2(0.0).is_err());
    }

    #[test]
    fn delta_f2_increases_on_fine_grid() {
        let n = 10_000;
        let mut prev = delta_f2(0.5 / (n + 1) as f64).unwrap();
        for i in 2..=n {
            let cur = delta_f2(0.5 * i as f64 / (n + 1) as f64).unwrap();
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn binomial_kl_reference_values() {
        assert_eq!(binomial_kl_exact(50, 0.2, 0.2).unwrap(), 0.0);
        let exact = binomial_kl_exact(1000, 3e-4, 1e-4).unwrap();
        assert!((exact - 0.129604).abs() < 1e-6, "{exact}");
        let limit = poisson_limit_kl(0.3, 0.1).unwrap();
        assert!((limit - 0.129584).abs() < 1e-6, "{limit}");
        let bound = binomial_kl_bound(0.3, 0.1).unwrap();
        assert!((bound - 0.193394).abs() < 1e-5, "{bound}");
        assert!(bound > exact);
        assert!(binomial_kl_exact(10, 0.0, 0.5).is_err());
        assert!(binomial_kl_exact(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn bound_is_total_on_reversed_order() {
        let v = binomial_kl_bound(0.1, 0.3).unwrap();
        assert!(v.is_finite());
        assert_eq!(binomial_kl_bound(0.2, 0.2).unwrap(), 0.0);
        assert!(binomial_kl_bound(0.5, 0.1).is_err());
        assert!(binomial_kl_bound(0.1, 0.0).is_err());
    }

    #[test]
    fn exact_kl_converges_to_poisson_limit() {
        let limit = poisson_limit_kl(0.3, 0.1).unwrap();
        let mut prev = f64::INFINITY;
        for n in [1_000u64, 10_000, 100_000, 1_000_000] {
            let err = (binomial_kl_exact(n, 0.3 / n as f64, 0.1 / n as f64).unwrap() - limit).abs();
            assert!(err < prev);
            prev = err;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn binomial_cdf_matches_statrs() {
        use statrs::distribution::{Binomial, DiscreteCDF};
        let b = Binomial::new(0.3, 40).unwrap();
        for (k, &c) in oracle::binomial_cdf(40, 0.3).iter().enumerate() {
            assert!((c - b.cdf(k as u64)).abs() < 1e-12);
        }
    }

    #[test]
    fn proxy_gap_values() {
        // m = 0.05 and 0.2 are within 0.05 under continuity correction;
        // m = 0.4 is not (the Binomial is near-Poisson with 67% mass at 0).
        let g05 = oracle::proxy_cdf_gap(0.05, 10_000, true);
        let g20 = oracle::proxy_cdf_gap(0.2, 10_000, true);
        let g40 = oracle::proxy_cdf_gap(0.4, 10_000, true);
        assert!((g05 - 0.029297).abs() < 1e-5, "{g05}");
        assert!((g20 - 0.045356).abs() < 1e-5, "{g20}");
        assert!((g40 - 0.089443).abs() < 1e-5, "{g40}");
        let plain = oracle::proxy_cdf_gap(0.4, 10_000, false);
        assert!((plain - 0.463207).abs() < 1e-5, "{plain}");
    }

    #[test]
    fn theorem1_matches_golden_section_on_grid() {
        for mu in [-1.0, -0.5, 0.0, 0.2, 0.4] {
            for var in [0.05, 0.1, 0.25, 0.5, 1.0, 2.0] {
                let t = g(mu, var);
                let closed = theorem1_m(t).unwrap();
                let probe = oracle::argmin(|x| f1(x, t).unwrap(), 0.0, 1.0, 10_000, 1e-9);
                assert!((closed - probe).abs() <= 1e-6, "μ={mu} σ²={var}: {closed} vs {probe}");
            }
        }
    }

    #[test]
    fn bound_dominates_exact_on_random_pairs() {
        let mut rng = crate::numcore::Rng::new(0x7e02);
        for _ in 0..1000 {
            let (a, b) = (0.5 * rng.uniform(), 0.5 * rng.uniform());
            let (m0, m) = if a < b { (a, b) } else { (b, a) };
            if m0 <= 0.0 || m <= m0 {
                continue;
            }
            let bound = binomial_kl_bound(m, m0).unwrap();
            for n in [1_000u64, 10_000, 1_000_000] {
                let nf = n as f64;
                let exact = binomial_kl_exact(n, m / nf, m0 / nf).unwrap();
                assert!(exact < bound, "m={m} m0={m0} n={n}: {exact} ≥ {bound}");
            }
            let limit = poisson_limit_kl(m, m0).unwrap();
            let exact = binomial_kl_exact(1_000_000, m / 1e6, m0 / 1e6).unwrap();
            assert!((exact - limit).abs() < 1e-4);
        }
    }

    #[test]
    fn argmin_finds_parabola_vertex() {
        let x = oracle::argmin(|x| (x - 0.3141).powi(2), 0.0, 1.0, 1000, 1e-10);
        assert!((x - 0.3141).abs() < 1e-8);
    }

    proptest! {
        #[test]
        fn theorem1_m_in_range_and_monotone(l in 1e-6f64..1e6, factor in 1.001f64..10.0) {
            let m = m_from_l(l);
            prop_assert!(m > 0.0 && m < 0.5);
            prop_assert!(m_from_l(l * factor) > m);
        }

        #[test]
        fn theorem1_matches_golden_section(mu in -2.0f64..0.45, var in 0.01f64..3.0) {
            let t = g(mu, var);
            let closed = theorem1_m(t).unwrap();
            let probe = oracle::argmin(|x| f1(x, t).unwrap(), 0.0, 1.0, 10_000, 1e-9);
            prop_assert!((closed - probe).abs() <= 1e-6, "closed {} probe {}", closed, probe);
        }

        #[test]
        fn bound_vanishes_on_diagonal(m in 1e-4f64..0.4999) {
            prop_assert!(binomial_kl_bound(m, m).unwrap().abs() < 1e-15);
        }

        #[test]
        fn bound_nonnegative_when_posterior_dominates(m0 in 1e-4f64..0.49, frac in 0.0f64..1.0) {
            let m = m0 + frac * (0.4999 - m0);
            prop_assert!(binomial_kl_bound(m, m0).unwrap() >= 0.0);
        }

        #[test]
        fn gaussian_kl_nonnegative(a in -3.0f64..3.0, b in -3.0f64..3.0, v in 0.01f64..5.0, w in 0.01f64..5.0) {
            prop_assert!(gaussian_kl(g(a, v), g(b, w)).unwrap() >= 0.0);
        }
    }
}
