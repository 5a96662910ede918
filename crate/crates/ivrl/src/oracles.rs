//! Closed-form ground truth for the experiments.
//!
//! For the linear-quadratic model the optimal value is `V*(s) = chi0 + chi1 s + chi2 s^2`
//! with
//! ```text
//! chi0 = theta0 - theta2^2 / (4 theta5)
//! chi1 = theta1 - theta2 theta3 / (2 theta5)
//! chi2 = theta4 - theta3^2 / (4 theta5)
//! ```
//! and matching coefficients of `Q*(s,a) = r(s,a) + bias + gamma E[V*(s')]` pins down `theta*`.

use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::environments::{LqEnvConfig, RbiasMode};
use crate::error::{Error, Result};

/// Limiting estimate of repeated re-estimation under biased rewards.
pub fn rbias_fixed_point(theta_star: f64, beta: f64, mode: RbiasMode) -> Result<f64> {
    match mode {
        RbiasMode::ActionDependent => {
            if !(beta.abs() < 1.0) {
                return Err(Error::InvalidParameter(format!("action mode needs |beta| < 1, got {beta}")));
            }
            Ok(theta_star / (1.0 - beta))
        }
        RbiasMode::StateDependent => {
            let disc = theta_star * theta_star + 4.0 * beta;
            if !(disc >= 0.0) {
                return Err(Error::InvalidParameter(format!("state mode needs theta*^2 + 4 beta >= 0, got {disc}")));
            }
            Ok(theta_star + 0.5 * (disc.sqrt() - theta_star))
        }
    }
}

/// The SGD bias ratio for the advertising design, evaluated term by term as
/// published. `p` multiplies the fixed-policy terms exactly as written.
pub fn sgd_bias_closed_form(p: f64, tilde_theta: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p must lie in [0,1], got {p}")));
    }
    let e = std::f64::consts::E;
    let th = tilde_theta;
    let q = 1.0 - p;
    let e18 = (0.125f64).exp();
    let e12 = (0.5f64).exp();
    let num = (p * th.powi(3) * e * e + 0.25 * e18 * q) - (p * th * th * e12 + q / 3.0) * (p * th * e12 + 0.5 * e18 * q);
    let den = (p * th * th * e * e + q / 5.0) - (p * th * e12 + q / 3.0).powi(2);
    if den == 0.0 {
        return Err(Error::Degenerate("zero denominator".into()));
    }
    Ok(b * num / den)
}

/// `Cov(b A^2, S A) / Var(S A)` from exact log-normal and uniform moments,
/// with exploration probability `p` and fixed policy `A = tilde_theta S` otherwise.
pub fn sgd_bias_moments(p: f64, tilde_theta: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p must lie in [0,1], got {p}")));
    }
    let m = |k: f64| (k * k / 8.0).exp();
    let th = tilde_theta;
    let q = 1.0 - p;
    let e_a3s = q * th.powi(3) * m(4.0) + p * m(1.0) / 4.0;
    let e_a2 = q * th * th * m(2.0) + p / 3.0;
    let e_sa = q * th * m(2.0) + p * m(1.0) / 2.0;
    let e_s2a2 = q * th * th * m(4.0) + p * m(2.0) / 3.0;
    let var = e_s2a2 - e_sa * e_sa;
    if !(var > 0.0) {
        return Err(Error::Degenerate("Var(S A) is zero".into()));
    }
    Ok(b * (e_a3s - e_a2 * e_sa) / var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Monte-Carlo `Cov(b A^2, S A) / Var(S A)` with a delta-method standard error.
pub fn sgd_bias_monte_carlo<R: Rng + ?Sized>(p: f64, tilde_theta: f64, b: f64, n: usize, rng: &mut R) -> Result<McEstimate> {
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two draws".into()));
    }
    let ln = LogNormal::new(0.0, 0.5).expect("valid lognormal");
    let mut xs = Vec::with_capacity(n);
    let mut us = Vec::with_capacity(n);
    for _ in 0..n {
        let s: f64 = ln.sample(rng);
        let explore = rng.gen::<f64>() < p;
        let u = rng.gen::<f64>();
        let a = if explore { u } else { tilde_theta * s };
        xs.push(s * a);
        us.push(b * a * a);
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let mu = us.iter().sum::<f64>() / nf;
    let (mut c, mut v) = (0.0, 0.0);
    for (x, u) in xs.iter().zip(&us) {
        c += (x - mx) * (u - mu);
        v += (x - mx) * (x - mx);
    }
    c /= nf;
    v /= nf;
    if !(v > 0.0) {
        return Err(Error::Degenerate("Var(S A) is zero".into()));
    }
    let ratio = c / v;
    let mut s2 = 0.0;
    for (x, u) in xs.iter().zip(&us) {
        let psi = ((x - mx) * (u - mu) - ratio * (x - mx) * (x - mx)) / v;
        s2 += psi * psi;
    }
    Ok(McEstimate { mean: ratio, se: (s2 / nf).sqrt() / nf.sqrt(), n })
}

/// Coefficients of `Q*(s,a) = phi(s,a)^T theta` together with the value coefficients `chi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaStar {
    pub theta: [f64; 6],
    pub chi: [f64; 3],
}

fn chi_of(theta: &[f64]) -> [f64; 3] {
    let t5 = theta[5];
    [
        theta[0] - theta[2] * theta[2] / (4.0 * t5),
        theta[1] - theta[2] * theta[3] / (2.0 * t5),
        theta[4] - theta[3] * theta[3] / (4.0 * t5),
    ]
}

/// Residuals of the six coefficient-matching equations at `theta`.
pub fn theta_star_residuals(cfg: &LqEnvConfig, bias_mean: f64, theta: &[f64; 6]) -> [f64; 6] {
    let g = cfg.gamma;
    let [c0, c1, c2] = cfg.c;
    let [r0, r1, r2, r3] = cfg.r;
    let s2 = cfg.sigma_eta2();
    let [x0, x1, x2] = chi_of(theta);
    [
        theta[0] - (r0 + bias_mean + g * (x0 + c0 * x1 + (c0 * c0 + s2) * x2)),
        theta[1] - g * (c1 * x1 + 2.0 * c0 * c1 * x2),
        theta[2] - (r1 + g * (c2 * x1 + 2.0 * c0 * c2 * x2)),
        theta[3] - (r2 + 2.0 * g * c1 * c2 * x2),
        theta[4] - g * c1 * c1 * x2,
        theta[5] - (r3 + g * c2 * c2 * x2),
    ]
}

/// Solves the matching equations. The `(theta3, theta4, theta5)` block
/// reduces to a quadratic in `chi2`; the root that stays bounded as
/// `gamma -> 0` is taken and must give `theta5 < 0`.
pub fn solve_theta_star(cfg: &LqEnvConfig, bias_mean: f64) -> Result<ThetaStar> {
    cfg.validate()?;
    let g = cfg.gamma;
    let [c0, c1, c2] = cfg.c;
    let [r0, r1, r2, r3] = cfg.r;
    let s2 = cfg.sigma_eta2();
    // chi2 = g c1^2 chi2 - (r2 + 2 g c1 c2 chi2)^2 / (4 (r3 + g c2^2 chi2)), cleared of the denominator
    let qa = -4.0 * g * c2 * c2;
    let qb = 4.0 * r3 * (g * c1 * c1 - 1.0) - 4.0 * g * r2 * c1 * c2;
    let qc = -r2 * r2;
    let chi2 = if qa == 0.0 {
        if qb == 0.0 {
            return Err(Error::NoRoot("degenerate chi2 equation".into()));
        }
        -qc / qb
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return Err(Error::NoRoot(format!("chi2 quadratic has no real root (discriminant {disc})")));
        }
        let sq = disc.sqrt();
        let bounded = if qb != 0.0 { -2.0 * qc / (qb + qb.signum() * sq) } else { (-qc / qa).sqrt() };
        let other = qc / (qa * bounded);
        if r3 + g * c2 * c2 * bounded < 0.0 {
            bounded
        } else if r3 + g * c2 * c2 * other < 0.0 {
            other
        } else {
            return Err(Error::NoRoot("no root with theta5 < 0".into()));
        }
    };
    let chi2 = newton_polish(|x| qa * x * x + qb * x + qc, |x| 2.0 * qa * x + qb, chi2);
    let t3 = r2 + 2.0 * g * c1 * c2 * chi2;
    let t4 = g * c1 * c1 * chi2;
    let t5 = r3 + g * c2 * c2 * chi2;
    if !(t5 < 0.0) {
        return Err(Error::NoRoot("theta5 >= 0".into()));
    }
    let k = t3 / (2.0 * t5);
    let u = (2.0 * c0 * chi2 - r1 * k) / (1.0 - g * c1 + g * c2 * k);
    let t1 = g * c1 * u;
    let t2 = r1 + g * c2 * u;
    let chi1 = u - 2.0 * c0 * chi2;
    let t0 = (r0 + bias_mean + g * (-t2 * t2 / (4.0 * t5) + c0 * chi1 + (c0 * c0 + s2) * chi2)) / (1.0 - g);
    let theta = [t0, t1, t2, t3, t4, t5];
    Ok(ThetaStar { theta, chi: chi_of(&theta) })
}

fn newton_polish(f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64, mut x: f64) -> f64 {
    for _ in 0..3 {
        let d = df(x);
        if d == 0.0 {
            break;
        }
        let nx = x - f(x) / d;
        if !nx.is_finite() {
            break;
        }
        x = nx;
    }
    x
}

/// Linear policy `pi(s) = omega0 + omega1 s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyCoeffs {
    pub omega0: f64,
    pub omega1: f64,
}

impl PolicyCoeffs {
    pub fn action(&self, s: f64) -> f64 {
        self.omega0 + self.omega1 * s
    }
}

/// Greedy linear policy of a concave quadratic Q-function.
pub fn optimal_policy(theta: &[f64]) -> Result<PolicyCoeffs> {
    if theta.len() != 6 {
        return Err(Error::DimensionMismatch { expected: 6, got: theta.len() });
    }
    if !(theta[5] < 0.0) {
        return Err(Error::InvalidParameter(format!("theta5 must be negative, got {}", theta[5])));
    }
    Ok(PolicyCoeffs { omega0: -theta[2] / (2.0 * theta[5]), omega1: -theta[3] / (2.0 * theta[5]) })
}

/// `V(s) = v0 + v1 s + v2 s^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueCoeffs {
    pub v0: f64,
    pub v1: f64,
    pub v2: f64,
}

impl ValueCoeffs {
    pub fn at(&self, s: f64) -> f64 {
        self.v0 + self.v1 * s + self.v2 * s * s
    }
}

/// Value of a linear policy under the true reward.
pub fn value_of_linear_policy(cfg: &LqEnvConfig, policy: &PolicyCoeffs) -> Result<ValueCoeffs> {
    let g = cfg.gamma;
    let [c0, c1, c2] = cfg.c;
    let [r0, r1, r2, r3] = cfg.r;
    let (w0, w1) = (policy.omega0, policy.omega1);
    let m = c1 + c2 * w1;
    let k = c0 + c2 * w0;
    let d2 = 1.0 - g * m * m;
    if !(d2 > 0.0) {
        return Err(Error::UnstablePolicy(format!("gamma (c1 + c2 omega1)^2 = {} >= 1", g * m * m)));
    }
    let d1 = 1.0 - g * m;
    if d1 == 0.0 || g == 1.0 {
        return Err(Error::UnstablePolicy("singular value system".into()));
    }
    let v2 = (r2 * w1 + r3 * w1 * w1) / d2;
    let v1 = (r1 * w1 + r2 * w0 + 2.0 * r3 * w0 * w1 + 2.0 * g * v2 * k * m) / d1;
    let v0 = (r0 + r1 * w0 + r3 * w0 * w0 + g * (v1 * k + v2 * (k * k + cfg.sigma_eta2()))) / (1.0 - g);
    Ok(ValueCoeffs { v0, v1, v2 })
}

/// `V(s) - r(s, pi(s)) - gamma E[V(s')]`.
pub fn bellman_residual(cfg: &LqEnvConfig, policy: &PolicyCoeffs, v: &ValueCoeffs, s: f64) -> f64 {
    let a = policy.action(s);
    let mean_next = cfg.c[0] + cfg.c[1] * s + cfg.c[2] * a;
    let ev = v.v0 + v.v1 * mean_next + v.v2 * (mean_next * mean_next + cfg.sigma_eta2());
    v.at(s) - cfg.true_reward(s, a) - cfg.gamma * ev
}

/// Coefficients of `Q_pi` for the observed reward, whose mean exceeds the true one by `bias_mean`.
pub fn q_of_linear_policy(cfg: &LqEnvConfig, policy: &PolicyCoeffs, bias_mean: f64) -> Result<[f64; 6]> {
    let v = value_of_linear_policy(cfg, policy)?;
    let g = cfg.gamma;
    let [c0, c1, c2] = cfg.c;
    let [r0, r1, r2, r3] = cfg.r;
    let v0 = v.v0 + bias_mean / (1.0 - g);
    Ok([
        r0 + bias_mean + g * (v0 + v.v1 * c0 + v.v2 * (c0 * c0 + cfg.sigma_eta2())),
        g * (v.v1 * c1 + 2.0 * v.v2 * c0 * c1),
        r1 + g * (v.v1 * c2 + 2.0 * v.v2 * c0 * c2),
        r2 + 2.0 * g * v.v2 * c1 * c2,
        g * v.v2 * c1 * c1,
        r3 + g * v.v2 * c2 * c2,
    ])
}

/// Discounted true-reward rollouts of a linear policy from `s0`.
pub fn rollout_value<R: Rng + ?Sized>(
    cfg: &LqEnvConfig,
    policy: &PolicyCoeffs,
    s0: f64,
    n: usize,
    horizon: usize,
    rng: &mut R,
) -> McEstimate {
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let mut s = s0;
        let mut disc = 1.0;
        let mut ret = 0.0;
        for _ in 0..horizon {
            let a = policy.action(s);
            ret += disc * cfg.true_reward(s, a);
            let eta = if cfg.eta_half_width > 0.0 { rng.gen_range(-cfg.eta_half_width..cfg.eta_half_width) } else { 0.0 };
            s = cfg.c[0] + cfg.c[1] * s + cfg.c[2] * a + eta;
            disc *= cfg.gamma;
        }
        sum += ret;
        sum2 += ret * ret;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    McEstimate { mean, se: (var / nf).sqrt(), n }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ltoc {
    pub absolute: f64,
    pub relative: f64,
}

/// `theta*`, the optimal policy and its value for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqOracle {
    pub cfg: LqEnvConfig,
    pub bias_mean: f64,
    pub theta_star: ThetaStar,
    pub policy: PolicyCoeffs,
    pub value: ValueCoeffs,
}

impl LqOracle {
    pub fn new(cfg: &LqEnvConfig) -> Result<Self> {
        let bias_mean = cfg.bias_mean();
        let theta_star = solve_theta_star(cfg, bias_mean)?;
        let policy = optimal_policy(&theta_star.theta)?;
        let value = value_of_linear_policy(cfg, &policy)?;
        Ok(Self { cfg: *cfg, bias_mean, theta_star, policy, value })
    }

    /// Opportunity cost of the greedy linear policy of `theta_hat` at `s`.
    pub fn ltoc(&self, theta_hat: &[f64], s: f64) -> Result<Ltoc> {
        let pol = optimal_policy(theta_hat)?;
        let v = value_of_linear_policy(&self.cfg, &pol)?;
        let v_star = self.value.at(s);
        let absolute = v_star - v.at(s);
        if v_star == 0.0 {
            return Err(Error::Degenerate("V*(s) = 0, relative LTOC undefined".into()));
        }
        Ok(Ltoc { absolute, relative: absolute / v_star })
    }
}

/// Opportunity cost relative to the optimum of `cfg`.
pub fn ltoc(cfg: &LqEnvConfig, theta_hat: &[f64], s: f64) -> Result<Ltoc> {
    LqOracle::new(cfg)?.ltoc(theta_hat, s)
}

/// Monte-Carlo `E[A_{t,2}^2]`.
pub fn beta_second_moment_mc<R: Rng + ?Sized>(cfg: &LqEnvConfig, n: usize, rng: &mut R) -> McEstimate {
    let d = Beta::new(cfg.action_beta[0], cfg.action_beta[1]).expect("valid beta");
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let a: f64 = d.sample(rng);
        let v = a * a;
        s += v;
        s2 += v * v;
    }
    let nf = n as f64;
    let mean = s / nf;
    McEstimate { mean, se: ((s2 / nf - mean * mean) / nf).sqrt(), n }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbias_examples() {
        assert_eq!(rbias_fixed_point(1.0, 0.0, RbiasMode::ActionDependent).unwrap(), 1.0);
        assert_eq!(rbias_fixed_point(1.0, 0.5, RbiasMode::ActionDependent).unwrap(), 2.0);
        assert_eq!(rbias_fixed_point(1.0, 2.0, RbiasMode::StateDependent).unwrap(), 2.0);
        assert!(rbias_fixed_point(1.0, 1.0, RbiasMode::ActionDependent).is_err());
        assert!(rbias_fixed_point(1.0, -1.0, RbiasMode::StateDependent).is_err());
    }

    #[test]
    fn sgd_bias_zero_when_b_zero() {
        for p in [0.0, 0.3, 0.7, 1.0] {
            assert_eq!(sgd_bias_closed_form(p, 0.5, 0.0).unwrap(), 0.0);
            assert_eq!(sgd_bias_moments(p, 0.5, 0.0).unwrap(), 0.0);
        }
        assert!(sgd_bias_closed_form(1.5, 0.5, 0.3).is_err());
    }

    #[test]
    fn gamma_zero_theta_star() {
        let cfg = LqEnvConfig { gamma: 0.0, ..Default::default() };
        let ts = solve_theta_star(&cfg, 0.3).unwrap();
        assert_eq!(ts.theta, [0.3, 0.0, 0.0, 1.0, 0.0, -1.0]);
    }

    #[test]
    fn policy_examples() {
        let p = optimal_policy(&[0.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        assert_eq!((p.omega0, p.omega1), (0.0, 0.5));
        let p = optimal_policy(&[0.0, 0.0, 2.0, 0.0, 0.0, -1.0]).unwrap();
        assert_eq!((p.omega0, p.omega1), (1.0, 0.0));
        assert!(optimal_policy(&[0.0; 6]).is_err());
    }

    #[test]
    fn gamma_zero_values() {
        let cfg = LqEnvConfig { gamma: 0.0, r: [0.3, 0.2, 1.0, -1.0], ..Default::default() };
        let (w0, w1) = (0.4, 0.7);
        let v = value_of_linear_policy(&cfg, &PolicyCoeffs { omega0: w0, omega1: w1 }).unwrap();
        let [r0, r1, r2, r3] = cfg.r;
        assert_eq!(v.v2, r2 * w1 + r3 * w1 * w1);
        assert_eq!(v.v1, r1 * w1 + r2 * w0 + 2.0 * r3 * w0 * w1);
        assert_eq!(v.v0, r0 + r1 * w0 + r3 * w0 * w0);
    }

    #[test]
    fn zero_policy_zero_value() {
        let cfg = LqEnvConfig::default();
        let v = value_of_linear_policy(&cfg, &PolicyCoeffs { omega0: 0.0, omega1: 0.0 }).unwrap();
        assert_eq!((v.v0, v.v1, v.v2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn unstable_policy_rejected() {
        let cfg = LqEnvConfig::default();
        assert!(value_of_linear_policy(&cfg, &PolicyCoeffs { omega0: 0.0, omega1: 10.0 }).is_err());
    }

    #[test]
    fn ltoc_zero_at_optimum() {
        let cfg = LqEnvConfig::default();
        let o = LqOracle::new(&cfg).unwrap();
        for s in [1.0, 2.0, 4.0] {
            let l = o.ltoc(&o.theta_star.theta, s).unwrap();
            assert_eq!(l.absolute, 0.0);
            assert_eq!(l.relative, 0.0);
        }
    }
}
