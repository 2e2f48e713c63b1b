//! Rényi-DP accounting for the (Poisson-subsampled) Gaussian mechanism.
//!
//! Per-step RDP at integer order α for sampling rate q and noise multiplier σ
//! uses the binomial expansion
//!
//! ```text
//! ρ(α) = ln( Σ_{j=0..α} C(α,j) (1−q)^{α−j} q^j exp(j(j−1) / (2σ²)) ) / (α−1)
//! ```
//!
//! evaluated in log space. Composition over T steps is linear in ρ and the
//! conversion to (ε, δ) takes `min_α ρ(α) + ln(1/δ)/(α−1)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Lower end of the noise-multiplier search bracket.
pub const SIGMA_MIN: f64 = 0.3;
/// Upper end of the noise-multiplier search bracket.
pub const SIGMA_MAX: f64 = 1000.0;
/// Relative bisection tolerance on σ.
pub const SIGMA_REL_TOL: f64 = 1e-4;

/// Default RDP order grid: 2..=64 plus a few large orders.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([80, 96, 128, 256]).collect()
}

/// Target privacy budget for a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    pub sample_rate: f64,
    pub steps: usize,
    pub clip: f64,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(invalid(format!(
                "sample rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be >= 1"));
        }
        if !(self.clip > 0.0 && self.clip.is_finite()) {
            return Err(invalid(format!("clip must be > 0, got {}", self.clip)));
        }
        Ok(())
    }
}

/// RDP values at ascending orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    rho: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if orders.len() != rho.len() {
            return Err(crate::error::shape(orders.len(), rho.len()));
        }
        if orders.iter().any(|a| !(*a > 1.0)) {
            return Err(invalid("RDP orders must be > 1"));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("RDP orders must be strictly ascending"));
        }
        if rho.iter().any(|r| !(*r >= 0.0)) {
            return Err(invalid("RDP values must be >= 0"));
        }
        Ok(Self { orders, rho })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaResult {
    pub sigma: f64,
    pub achieved_epsilon: f64,
    pub order_used: f64,
}

/// Classic Gaussian-mechanism noise scale `Δf·sqrt(2 ln(1.25/δ))/ε`.
pub fn gaussian_mechanism_sigma(sensitivity: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity > 0.0) {
        return Err(invalid(format!(
            "sensitivity must be > 0, got {sensitivity}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.25) {
        return Err(invalid(format!("delta must be in (0, 1.25), got {delta}")));
    }
    Ok(sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// RDP of the plain Gaussian mechanism: `α Δf² / (2σ²)`.
pub fn rdp_gaussian(alpha: f64, sensitivity: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(invalid(format!("order must be > 1, got {alpha}")));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(alpha * sensitivity * sensitivity / (2.0 * sigma * sigma))
}

/// RDP of the Poisson-subsampled Gaussian (unit sensitivity) at integer order.
pub fn rdp_subsampled_gaussian(alpha: u32, q: f64, sigma: f64) -> Result<f64> {
    if alpha < 2 {
        return Err(invalid(format!("integer order must be >= 2, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("sampling rate must be in [0, 1], got {q}")));
    }
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be > 0, got {sigma}")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    if q == 1.0 {
        return rdp_gaussian(f64::from(alpha), 1.0, sigma);
    }

    let a = f64::from(alpha);
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);

    let mut ln_binom = 0.0;
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    for j in 0..=alpha {
        if j > 0 {
            ln_binom += (f64::from(alpha - j + 1) / f64::from(j)).ln();
        }
        let jf = f64::from(j);
        terms.push(ln_binom + (a - jf) * ln_1mq + jf * ln_q + jf * (jf - 1.0) * inv_two_var);
    }
    Ok((log_sum_exp(&terms) / (a - 1.0)).max(0.0))
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Per-step curve of the subsampled Gaussian over the given integer orders.
pub fn subsampled_curve(orders: &[u32], q: f64, sigma: f64) -> Result<RdpCurve> {
    let rho = orders
        .iter()
        .map(|&a| rdp_subsampled_gaussian(a, q, sigma))
        .collect::<Result<Vec<_>>>()?;
    RdpCurve::new(orders.iter().map(|&a| f64::from(a)).collect(), rho)
}

/// `T`-fold composition.
pub fn compose(per_step: &RdpCurve, steps: usize) -> Result<RdpCurve> {
    if steps == 0 {
        return Err(invalid("composition needs steps >= 1"));
    }
    let t = steps as f64;
    Ok(RdpCurve {
        orders: per_step.orders.clone(),
        rho: per_step.rho.iter().map(|r| r * t).collect(),
    })
}

/// Converts an RDP curve to ε at the given δ, returning `(ε, α*)`.
/// Ties between orders resolve to the lowest order.
pub fn rdp_to_dp(curve: &RdpCurve, delta: f64) -> Result<(f64, f64)> {
    if curve.is_empty() {
        return Err(Error::Empty("rdp curve"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must be in (0, 1), got {delta}")));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = (f64::INFINITY, curve.orders[0]);
    for (&alpha, &rho) in curve.orders.iter().zip(&curve.rho) {
        let eps = rho + log_inv_delta / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok((best.0.max(0.0), best.1))
}

/// ε spent by `steps` subsampled-Gaussian steps at noise multiplier `sigma`.
pub fn epsilon_spent(
    sigma: f64,
    sample_rate: f64,
    steps: usize,
    delta: f64,
    orders: &[u32],
) -> Result<(f64, f64)> {
    let per_step = subsampled_curve(orders, sample_rate, sigma)?;
    rdp_to_dp(&compose(&per_step, steps)?, delta)
}

/// Smallest σ (to [`SIGMA_REL_TOL`]) in `[SIGMA_MIN, SIGMA_MAX]` meeting the
/// target, on the default order grid.
pub fn calibrate_sigma(spec: &PrivacySpec) -> Result<SigmaResult> {
    calibrate_sigma_with(spec, &default_orders(), (SIGMA_MIN, SIGMA_MAX))
}

pub fn calibrate_sigma_with(
    spec: &PrivacySpec,
    orders: &[u32],
    bracket: (f64, f64),
) -> Result<SigmaResult> {
    spec.validate()?;
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(invalid(format!("bad sigma bracket [{lo}, {hi}]")));
    }
    let eps_at =
        |sigma: f64| epsilon_spent(sigma, spec.sample_rate, spec.steps, spec.delta, orders);

    let (eps_hi, order_hi) = eps_at(hi)?;
    if eps_hi > spec.epsilon {
        return Err(Error::Unreachable {
            epsilon: spec.epsilon,
            low: bracket.0,
            high: bracket.1,
            best: eps_hi,
        });
    }
    let (eps_lo, order_lo) = eps_at(lo)?;
    if eps_lo <= spec.epsilon {
        return Ok(SigmaResult {
            sigma: lo,
            achieved_epsilon: eps_lo,
            order_used: order_lo,
        });
    }

    // invariant: eps(lo) > target >= eps(hi)
    let mut best = (eps_hi, order_hi);
    while (hi - lo) > SIGMA_REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        let (eps, order) = eps_at(mid)?;
        if eps <= spec.epsilon {
            hi = mid;
            best = (eps, order);
        } else {
            lo = mid;
        }
    }
    Ok(SigmaResult {
        sigma: hi,
        achieved_epsilon: best.0,
        order_used: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn gaussian_mechanism_closed_form() {
        let s = gaussian_mechanism_sigma(1.0, 1.0, 1e-5).unwrap();
        assert!((s - 4.84480).abs() < 1e-4, "{s}");
        assert!(close(
            gaussian_mechanism_sigma(2.0, 1.0, 1e-5).unwrap(),
            2.0 * s,
            1e-15
        ));
        assert!(close(
            gaussian_mechanism_sigma(1.0, 2.0, 1e-5).unwrap(),
            0.5 * s,
            1e-15
        ));
        assert!(gaussian_mechanism_sigma(1.0, 0.0, 1e-5).is_err());
        assert!(gaussian_mechanism_sigma(1.0, 1.0, 1.3).is_err());
        assert!(gaussian_mechanism_sigma(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn gaussian_rdp() {
        assert_eq!(rdp_gaussian(2.0, 1.0, 1.0).unwrap(), 1.0);
        let a = rdp_gaussian(5.0, 1.3, 0.7).unwrap();
        let b = rdp_gaussian(5.0, 1.3, 1.4).unwrap();
        assert!(close(a / 4.0, b, 1e-15));
        assert_eq!(rdp_gaussian(3.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(rdp_gaussian(2.0, 1.0, 0.0).is_err());
        assert!(rdp_gaussian(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn subsampled_edges() {
        for alpha in [2, 7, 64] {
            assert_eq!(
                rdp_subsampled_gaussian(alpha, 1.0, 1.7).unwrap(),
                rdp_gaussian(f64::from(alpha), 1.0, 1.7).unwrap()
            );
            assert_eq!(rdp_subsampled_gaussian(alpha, 0.0, 1.7).unwrap(), 0.0);
        }
        assert!(rdp_subsampled_gaussian(2, 1.5, 1.0).is_err());
        assert!(rdp_subsampled_gaussian(2, -0.1, 1.0).is_err());
        assert!(rdp_subsampled_gaussian(1, 0.1, 1.0).is_err());
    }

    #[test]
    fn subsampled_order_two_closed_form() {
        // Σ collapses to 1 + q²(e^{1/σ²} − 1) at α = 2.
        for (q, sigma) in [(0.01f64, 1.0f64), (0.3, 0.9), (0.001, 4.0)] {
            let exact = (q * q * (1.0 / (sigma * sigma)).exp_m1()).ln_1p();
            assert!(close(
                rdp_subsampled_gaussian(2, q, sigma).unwrap(),
                exact,
                1e-9
            ));
        }
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn subsampled_matches_high_precision_oracle() {
        // 50-digit mpmath evaluation of the same binomial sum.
        let frozen = [
            (2, 0.01, 1.0, 0.000_171_813_422_074_547_930_990_657_3),
            (3, 0.1, 2.0, 0.004_373_658_348_577_057_999_667_622),
            (8, 0.05, 1.5, 0.007_017_600_215_571_755_015_870_794),
            (32, 0.01, 0.8, 20.246_275_937_044_550_845_992_37),
            (64, 0.2, 5.0, 0.101_367_054_620_432_014_655_712_3),
        ];
        for (alpha, q, sigma, want) in frozen {
            let got = rdp_subsampled_gaussian(alpha, q, sigma).unwrap();
            assert!(close(got, want, 1e-9), "alpha={alpha}: {got} vs {want}");
        }
    }

    #[test]
    fn subsampled_monotone_in_q() {
        for alpha in [2, 5, 20, 128] {
            let mut prev = 0.0;
            for i in 0..=100 {
                let q = f64::from(i) / 100.0;
                let r = rdp_subsampled_gaussian(alpha, q, 1.1).unwrap();
                assert!(r + 1e-15 >= prev, "alpha={alpha} q={q}");
                prev = r;
            }
        }
    }

    #[test]
    fn composition() {
        let c = RdpCurve::new(vec![2.0, 3.0], vec![0.1, 0.25]).unwrap();
        assert_eq!(compose(&c, 1).unwrap(), c);
        let ten = compose(&c, 10).unwrap();
        assert!(close(ten.rho()[0], 1.0, 1e-15));
        assert_eq!(
            compose(&compose(&c, 2).unwrap(), 3).unwrap(),
            compose(&c, 6).unwrap()
        );
        assert!(compose(&c, 0).is_err());
    }

    #[test]
    fn conversion() {
        let c = RdpCurve::new(vec![2.0], vec![1.0]).unwrap();
        let (eps, order) = rdp_to_dp(&c, (-1.0f64).exp()).unwrap();
        assert!(close(eps, 2.0, 1e-15));
        assert_eq!(order, 2.0);

        let c = RdpCurve::new(vec![2.0, 4.0, 8.0], vec![0.5, 0.7, 3.0]).unwrap();
        let mut prev = 0.0;
        for delta in [1e-1, 1e-3, 1e-5, 1e-9] {
            let (eps, _) = rdp_to_dp(&c, delta).unwrap();
            assert!(eps >= prev);
            prev = eps;
        }

        // Order 4 sits below every other order after the δ term.
        let c = RdpCurve::new(vec![2.0, 4.0, 8.0], vec![10.0, 0.1, 10.0]).unwrap();
        assert_eq!(rdp_to_dp(&c, 1e-5).unwrap().1, 4.0);

        let empty = RdpCurve::new(vec![], vec![]).unwrap();
        assert!(matches!(rdp_to_dp(&empty, 1e-5), Err(Error::Empty(_))));
    }

    #[test]
    fn curve_validation() {
        assert!(RdpCurve::new(vec![3.0, 2.0], vec![0.0, 0.0]).is_err());
        assert!(RdpCurve::new(vec![1.0], vec![0.0]).is_err());
        assert!(RdpCurve::new(vec![2.0], vec![-0.1]).is_err());
    }

    fn spec(epsilon: f64, q: f64, steps: usize) -> PrivacySpec {
        PrivacySpec {
            epsilon,
            delta: 1e-5,
            sample_rate: q,
            steps,
            clip: 1.0,
        }
    }

    #[test]
    fn calibration_round_trip() {
        for s in [
            spec(1.0, 0.01, 100),
            spec(3.0, 0.1, 1000),
            spec(8.0, 1.0, 1),
        ] {
            let r = calibrate_sigma(&s).unwrap();
            let (eps, _) =
                epsilon_spent(r.sigma, s.sample_rate, s.steps, s.delta, &default_orders()).unwrap();
            assert!(
                eps <= s.epsilon && eps >= 0.99 * s.epsilon,
                "{s:?} -> {eps}"
            );
            assert_eq!(eps, r.achieved_epsilon);
        }
    }

    #[test]
    fn single_full_step_matches_grid_closed_form() {
        // q = 1, T = 1: ε(σ) = min_α α/(2σ²) + ln(1/δ)/(α−1) evaluated directly.
        let s = spec(2.0, 1.0, 1);
        let r = calibrate_sigma(&s).unwrap();
        let direct = default_orders()
            .into_iter()
            .map(|a| {
                let a = f64::from(a);
                a / (2.0 * r.sigma * r.sigma) + (1e5f64).ln() / (a - 1.0)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(close(direct, r.achieved_epsilon, 1e-12));
        assert!((direct - s.epsilon).abs() <= 0.01 * s.epsilon);
    }

    #[test]
    fn more_steps_need_more_noise() {
        let mut prev = 0.0;
        for steps in [1, 10, 100, 1000] {
            let sigma = calibrate_sigma(&spec(3.0, 0.05, steps)).unwrap().sigma;
            assert!(sigma > prev);
            prev = sigma;
        }
    }

    #[test]
    fn epsilon_strictly_decreasing_in_sigma() {
        let orders = default_orders();
        let mut prev = f64::INFINITY;
        let mut sigma = SIGMA_MIN;
        while sigma <= 100.0 {
            let (eps, _) = epsilon_spent(sigma, 0.02, 500, 1e-5, &orders).unwrap();
            assert!(eps < prev, "sigma={sigma}");
            prev = eps;
            sigma *= 1.25;
        }
    }

    #[test]
    fn unreachable_budget_reports_bracket() {
        let err = calibrate_sigma_with(&spec(0.01, 1.0, 1000), &default_orders(), (0.3, 100.0))
            .unwrap_err();
        match err {
            Error::Unreachable { low, high, .. } => assert_eq!((low, high), (0.3, 100.0)),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rejects_invalid_spec() {
        assert!(calibrate_sigma(&spec(0.0, 0.1, 10)).is_err());
        assert!(calibrate_sigma(&spec(1.0, 0.0, 10)).is_err());
        assert!(calibrate_sigma(&spec(1.0, 0.1, 0)).is_err());
    }
}
