//! Asymptotic inference for IV iterates.
//!
//! With drift `G(W, theta, Gamma) = td(theta, W) Gamma z`, the terminal iterate
//! satisfies `alpha_T^{-1/2} (theta_T - theta*) => N(0, Sigma)` where
//! ```text
//! A11 Sigma + Sigma A11^T + Lbar = 0
//! Lbar = L(0) + sum_{l=1..h} w_l (L(l) + L(l)^T),   w_l = 1 - l/(h+1)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::algorithms::{greedy_action, ActionInterval, FeatureMap, IvState, ResidualModel};
use crate::environments::Observation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    Uniform,
    #[default]
    Bartlett,
}

pub fn bartlett_weight(lag: usize, max_lag: usize) -> f64 {
    if lag > max_lag {
        0.0
    } else {
        1.0 - lag as f64 / (max_lag as f64 + 1.0)
    }
}

/// Default window `ceil(c n^{1/3})`.
pub fn default_lag_window(n: usize, c: f64) -> usize {
    (c * (n as f64).cbrt()).ceil() as usize
}

/// `n` drift vectors of length `p`, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub p: usize,
    pub data: Vec<f64>,
}

impl Residuals {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map(|r| r.len()).ok_or_else(|| Error::Degenerate("empty series".into()))?;
        let mut data = Vec::with_capacity(rows.len() * p);
        for r in rows {
            if r.len() != p {
                return Err(Error::DimensionMismatch { expected: p, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { p, data })
    }

    pub fn len(&self) -> usize {
        if self.p == 0 {
            0
        } else {
            self.data.len() / self.p
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.p..(k + 1) * self.p]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.p];
        for row in self.data.chunks_exact(self.p) {
            for (mi, v) in m.iter_mut().zip(row) {
                *mi += v;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    fn center(&mut self) {
        let m = self.mean();
        for row in self.data.chunks_exact_mut(self.p) {
            for (v, mi) in row.iter_mut().zip(&m) {
                *v -= mi;
            }
        }
    }
}

/// Centered drift evaluations `G(W_k, theta_hat, Gamma_hat) - mean`.
pub fn residual_series<M: ResidualModel + ?Sized>(
    trajectory: &[Observation],
    theta_hat: &[f64],
    gamma_hat: &IvState,
    model: &M,
) -> Result<Residuals> {
    if trajectory.is_empty() {
        return Err(Error::Degenerate("empty trajectory".into()));
    }
    let p = model.dim();
    let mut data = Vec::with_capacity(trajectory.len() * p);
    for obs in trajectory {
        let td = model.td(theta_hat, obs);
        let gz = gamma_hat.gamma_z(obs.instruments.as_slice());
        data.extend(gz.iter().map(|g| td * g));
    }
    let mut r = Residuals { p, data };
    r.center();
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TavcEstimate {
    #[serde(with = "matrix_rows")]
    pub l0: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub lbar: DMatrix<f64>,
    pub lag_window: usize,
    pub weight_scheme: WeightScheme,
}

/// Kernel-weighted long-run covariance of the (re-centered) residuals.
pub fn newey_west_tavc(residuals: &Residuals, h: usize, scheme: WeightScheme) -> Result<TavcEstimate> {
    let n = residuals.len();
    if h >= n || n < h + 2 {
        return Err(Error::InvalidParameter(format!("need at least h+2 residuals (h={h}, n={n})")));
    }
    let p = residuals.p;
    let mut e = residuals.clone();
    e.center();
    let nf = n as f64;
    let cross = |lag: usize| -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(p, p);
        for t in lag..n {
            let a = e.row(t);
            let b = e.row(t - lag);
            for i in 0..p {
                let ai = a[i];
                for j in 0..p {
                    m[(i, j)] += ai * b[j];
                }
            }
        }
        m / nf
    };
    let mut l0 = cross(0);
    symmetrize_from_lower(&mut l0);
    let mut lbar = l0.clone();
    for lag in 1..=h {
        let w = match scheme {
            WeightScheme::Uniform => 1.0,
            WeightScheme::Bartlett => bartlett_weight(lag, h),
        };
        if w == 0.0 {
            continue;
        }
        let l = cross(lag);
        lbar += (&l + l.transpose()) * w;
    }
    symmetrize_from_lower(&mut lbar);
    Ok(TavcEstimate { l0, lbar, lag_window: h, weight_scheme: scheme })
}

fn symmetrize_from_lower(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    #[default]
    AnalyticPlugIn,
    FiniteDifference,
}

/// Sample-average Jacobian of the drift in `theta`.
pub fn estimate_jacobian_a11<M: ResidualModel + ?Sized>(
    trajectory: &[Observation],
    theta_hat: &[f64],
    gamma_hat: &IvState,
    model: &M,
    mode: JacobianMode,
) -> Result<DMatrix<f64>> {
    if trajectory.is_empty() {
        return Err(Error::Degenerate("empty trajectory".into()));
    }
    let p = model.dim();
    let n = trajectory.len() as f64;
    let a = match mode {
        JacobianMode::AnalyticPlugIn => {
            let mut a = DMatrix::<f64>::zeros(p, p);
            let mut grad = vec![0.0; p];
            for obs in trajectory {
                let gz = gamma_hat.gamma_z(obs.instruments.as_slice());
                model.td_gradient(theta_hat, obs, &mut grad);
                for i in 0..p {
                    for j in 0..p {
                        a[(i, j)] += gz[i] * grad[j];
                    }
                }
            }
            a / n
        }
        JacobianMode::FiniteDifference => {
            let gzs: Vec<Vec<f64>> = trajectory.iter().map(|o| gamma_hat.gamma_z(o.instruments.as_slice())).collect();
            let mean_drift = |theta: &[f64]| -> Vec<f64> {
                let mut m = vec![0.0; p];
                for (obs, gz) in trajectory.iter().zip(&gzs) {
                    let td = model.td(theta, obs);
                    for (mi, g) in m.iter_mut().zip(gz) {
                        *mi += td * g;
                    }
                }
                m
            };
            let mut a = DMatrix::<f64>::zeros(p, p);
            let mut th = theta_hat.to_vec();
            for j in 0..p {
                let h = 1e-5 * (1.0 + theta_hat[j].abs());
                th[j] = theta_hat[j] + h;
                let up = mean_drift(&th);
                th[j] = theta_hat[j] - h;
                let down = mean_drift(&th);
                th[j] = theta_hat[j];
                for i in 0..p {
                    a[(i, j)] = (up[i] - down[i]) / (2.0 * h * n);
                }
            }
            a
        }
    };
    let cond = condition_number(&a);
    if !(cond <= 1e12) {
        return Err(Error::IllConditioned(cond));
    }
    Ok(a)
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Largest real part among the eigenvalues.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `A Sigma + Sigma A^T = -L` through the vectorized system
/// `(I (x) A + A (x) I) vec(Sigma) = -vec(L)`.
pub fn lyapunov_sigma(a11: &DMatrix<f64>, lbar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = a11.nrows();
    if a11.ncols() != p || lbar.nrows() != p || lbar.ncols() != p {
        return Err(Error::DimensionMismatch { expected: p, got: lbar.nrows() });
    }
    if a11.iter().chain(lbar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Lyapunov inputs".into()));
    }
    let abscissa = spectral_abscissa(a11);
    if !(abscissa < 0.0) {
        return Err(Error::NotHurwitz(abscissa));
    }
    let eye = DMatrix::<f64>::identity(p, p);
    let k = eye.kronecker(a11) + a11.kronecker(&eye);
    let rhs = -DVector::from_column_slice(lbar.as_slice());
    let lu = k.clone().lu();
    let mut x = lu.solve(&rhs).ok_or_else(|| Error::Degenerate("singular Kronecker system".into()))?;
    for _ in 0..2 {
        let r = &rhs - &k * &x;
        if let Some(dx) = lu.solve(&r) {
            x += dx;
        }
    }
    let mut sigma = DMatrix::from_column_slice(p, p, x.as_slice());
    symmetrize_from_lower(&mut sigma);
    Ok(sigma)
}

pub fn lyapunov_residual(a11: &DMatrix<f64>, sigma: &DMatrix<f64>, lbar: &DMatrix<f64>) -> f64 {
    (a11 * sigma + sigma * a11.transpose() + lbar).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceReport {
    pub theta_hat: Vec<f64>,
    #[serde(with = "matrix_rows")]
    pub a11: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub lbar: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub sigma: DMatrix<f64>,
    pub alpha_t: f64,
    pub ci_half_widths: Vec<f64>,
}

impl CovarianceReport {
    pub fn new(theta_hat: &[f64], a11: DMatrix<f64>, lbar: DMatrix<f64>, alpha_t: f64) -> Result<Self> {
        let sigma = lyapunov_sigma(&a11, &lbar)?;
        Self::with_sigma(theta_hat, a11, lbar, sigma, alpha_t)
    }

    pub fn with_sigma(theta_hat: &[f64], a11: DMatrix<f64>, lbar: DMatrix<f64>, sigma: DMatrix<f64>, alpha_t: f64) -> Result<Self> {
        let z = normal_quantile(0.975);
        let ci_half_widths = (0..sigma.nrows()).map(|i| z * (alpha_t * sigma[(i, i)].max(0.0)).sqrt()).collect();
        Ok(Self { theta_hat: theta_hat.to_vec(), a11, lbar, sigma, alpha_t, ci_half_widths })
    }

    /// `sqrt(alpha_T Sigma_ii)`.
    pub fn sd(&self, i: usize) -> f64 {
        (self.alpha_t * self.sigma[(i, i)]).sqrt()
    }
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// `theta_hat_i +- z_{(1+level)/2} sqrt(alpha_T Sigma_ii)`.
pub fn confidence_interval(theta_hat: &[f64], report: &CovarianceReport, level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must lie in (0,1), got {level}")));
    }
    if theta_hat.len() != report.sigma.nrows() {
        return Err(Error::DimensionMismatch { expected: report.sigma.nrows(), got: theta_hat.len() });
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    theta_hat
        .iter()
        .enumerate()
        .map(|(i, th)| {
            let v = report.sigma[(i, i)];
            if !(v > 0.0) {
                return Err(Error::Degenerate(format!("Sigma[{i},{i}] = {v} is not positive")));
            }
            let hw = z * (report.alpha_t * v).sqrt();
            Ok(Interval { lo: th - hw, hi: th + hw })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyTestResult {
    pub s: f64,
    pub a0: f64,
    pub a_hat: f64,
    pub omega_s: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

/// Tests `H0: pi*(s) = a0` for the quadratic features.
pub fn spot_test(
    theta_hat: &[f64],
    report: &CovarianceReport,
    features: &FeatureMap,
    s: f64,
    a0: f64,
    interval: ActionInterval,
) -> Result<PolicyTestResult> {
    let a_hat = greedy_action(features, theta_hat, s, interval)?;
    let hess = 2.0 * theta_hat[5];
    if hess == 0.0 {
        return Err(Error::Degenerate("action Hessian 2 theta5 is zero".into()));
    }
    let g = DVector::from_vec(vec![0.0, 0.0, 1.0, s, 0.0, 2.0 * a0]);
    let quad = (g.transpose() * &report.sigma * &g)[(0, 0)];
    let omega_s = quad / (hess * hess);
    let diff = a_hat - a0;
    let t_stat = if diff == 0.0 {
        0.0
    } else {
        if !(omega_s > 0.0) {
            return Err(Error::Degenerate("Omega_s is not positive".into()));
        }
        diff * diff / (report.alpha_t * omega_s)
    };
    let chi = ChiSquared::new(1.0).expect("one degree of freedom");
    let p_value = if t_stat == 0.0 { 1.0 } else { chi.sf(t_stat) };
    Ok(PolicyTestResult { s, a0, a_hat, omega_s, t_stat, p_value })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2Result {
    pub t2_stat: f64,
    pub critical_value: f64,
    pub reject: bool,
}

/// Whole-policy test against `pi0` on the visited states with a parametric bootstrap critical value.
/// `level` is the significance level; the critical value is the `(1 - level)` bootstrap quantile.
#[allow(clippy::too_many_arguments)]
pub fn policy_test_t2<R: Rng + ?Sized>(
    theta_hat: &[f64],
    report: &CovarianceReport,
    features: &FeatureMap,
    visited_states: &[f64],
    pi0: impl Fn(f64) -> f64,
    n_boot: usize,
    level: f64,
    interval: ActionInterval,
    rng: &mut R,
) -> Result<T2Result> {
    if visited_states.is_empty() {
        return Err(Error::InvalidParameter("no visited states".into()));
    }
    if n_boot < 100 {
        return Err(Error::InvalidParameter(format!("n_boot must be >= 100, got {n_boot}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("level must lie in (0,1), got {level}")));
    }
    let n = visited_states.len() as f64;
    let pi_hat: Vec<f64> = visited_states
        .iter()
        .map(|&s| greedy_action(features, theta_hat, s, interval))
        .collect::<Result<_>>()?;
    let t2_stat = visited_states.iter().zip(&pi_hat).map(|(&s, a)| (a - pi0(s)).powi(2)).sum::<f64>() / n / report.alpha_t;

    let p = theta_hat.len();
    let cov = &report.sigma * report.alpha_t;
    let root = psd_root(&cov);
    let mut stats = Vec::with_capacity(n_boot);
    let mut draw = vec![0.0; p];
    let mut e = DVector::<f64>::zeros(p);
    for _ in 0..n_boot {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let shift = &root * &e;
        for i in 0..p {
            draw[i] = theta_hat[i] + shift[i];
        }
        let mut acc = 0.0;
        for (&s, a) in visited_states.iter().zip(&pi_hat) {
            let ab = greedy_action(features, &draw, s, interval)?;
            acc += (ab - a).powi(2);
        }
        stats.push(acc / n / report.alpha_t);
    }
    let critical_value = upper_quantile(&mut stats, level);
    Ok(T2Result { t2_stat, critical_value, reject: t2_stat > critical_value })
}

/// Empirical `(1 - level)` quantile.
fn upper_quantile(xs: &mut [f64], level: f64) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let k = (((1.0 - level) * xs.len() as f64).ceil() as usize).clamp(1, xs.len());
    xs[k - 1]
}

/// Symmetric square root of a positive semidefinite matrix (negative eigenvalues clipped).
fn psd_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Settings of the plug-in pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSettings {
    pub burn_in_fraction: f64,
    pub lag_constant: f64,
    pub weight_scheme: WeightScheme,
    pub jacobian: JacobianMode,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        Self { burn_in_fraction: 0.1, lag_constant: 1.0, weight_scheme: WeightScheme::Bartlett, jacobian: JacobianMode::AnalyticPlugIn }
    }
}

/// Burn-in, residuals, TAVC, Jacobian and Lyapunov covariance for one trajectory.
pub fn plug_in_report<M: ResidualModel + ?Sized>(
    trajectory: &[Observation],
    terminal: &IvState,
    model: &M,
    alpha_t: f64,
    settings: &InferenceSettings,
) -> Result<(CovarianceReport, TavcEstimate)> {
    let skip = ((trajectory.len() as f64) * settings.burn_in_fraction).floor() as usize;
    let kept = &trajectory[skip.min(trajectory.len())..];
    let res = residual_series(kept, &terminal.theta, terminal, model)?;
    let h = default_lag_window(res.len(), settings.lag_constant);
    let tavc = newey_west_tavc(&res, h, settings.weight_scheme)?;
    let a11 = estimate_jacobian_a11(kept, &terminal.theta, terminal, model, settings.jacobian)?;
    let report = CovarianceReport::new(&terminal.theta, a11, tavc.lbar.clone(), alpha_t)?;
    Ok((report, tavc))
}

pub(crate) mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        let m = rows.first().map(|r| r.len()).unwrap_or(0);
        Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bartlett_weights_h2() {
        assert!((bartlett_weight(1, 2) - 2.0 / 3.0).abs() < 1e-15);
        assert!((bartlett_weight(2, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(bartlett_weight(3, 2), 0.0);
    }

    #[test]
    fn lyapunov_small_cases() {
        let s = lyapunov_sigma(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-14);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        let l = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 8.0]));
        let s = lyapunov_sigma(&a, &l).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-14 && (s[(1, 1)] - 2.0).abs() < 1e-14);
        assert!(s[(0, 1)].abs() < 1e-14);
        assert!(matches!(lyapunov_sigma(&DMatrix::from_element(1, 1, 0.5), &l.view((0, 0), (1, 1)).into_owned()), Err(Error::NotHurwitz(_))));
    }

    #[test]
    fn ci_half_width_unit() {
        let r = CovarianceReport::with_sigma(
            &[0.0],
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 2.0),
            DMatrix::from_element(1, 1, 4.0),
            0.25,
        )
        .unwrap();
        let ci = confidence_interval(&[0.0], &r, 0.95).unwrap();
        assert!((ci[0].hi - 1.959963984540054).abs() < 1e-9);
        assert!((r.ci_half_widths[0] - 1.959963984540054).abs() < 1e-9);
        assert!(confidence_interval(&[0.0], &r, 1.0).is_err());
    }

    #[test]
    fn nw_rejects_short_series() {
        let r = Residuals::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert!(newey_west_tavc(&r, 2, WeightScheme::Bartlett).is_err());
        assert!(newey_west_tavc(&r, 1, WeightScheme::Bartlett).is_ok());
    }
}
