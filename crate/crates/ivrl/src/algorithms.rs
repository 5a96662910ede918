//! IV-corrected update rules and their biased baselines.
//!
//! Every IV rule has the same shape: a scalar temporal-difference or
//! regression residual `td` moves `theta` along `Gamma z`, and `Gamma`
//! tracks the first-stage projection of the regressors on the instruments.
//!
//! ```text
//! theta' = P_B(theta + alpha_t td Gamma z)
//! Gamma' = P_B(Gamma + beta_t (x - Gamma z) z^T)
//! ```

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::environments::{ad_regressors, Observation};
use crate::error::{check_len, Error, Result};
use crate::sa_core::{LearningSchedule, ProjectionBall};

/// `theta` (length p), `Gamma` (p x q, row-major) and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct IvState {
    pub theta: Vec<f64>,
    gamma: Vec<f64>,
    q: usize,
    pinned: usize,
    pub t: u64,
    gz: Vec<f64>,
}

impl IvState {
    /// `gamma_rows` must hold `theta.len()` rows of equal length.
    pub fn new(theta: Vec<f64>, gamma_rows: &[Vec<f64>]) -> Result<Self> {
        check_len(theta.len(), gamma_rows.len())?;
        let q = gamma_rows.first().map(|r| r.len()).unwrap_or(0);
        if q == 0 {
            return Err(Error::InvalidParameter("Gamma needs at least one column".into()));
        }
        let mut gamma = Vec::with_capacity(theta.len() * q);
        for row in gamma_rows {
            check_len(q, row.len())?;
            gamma.extend_from_slice(row);
        }
        let p = theta.len();
        Ok(Self { theta, gamma, q, pinned: 0, t: 1, gz: vec![0.0; p] })
    }

    pub fn identity(theta: Vec<f64>) -> Self {
        let p = theta.len();
        let rows: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self::new(theta, &rows).expect("square identity")
    }

    /// `Gamma` with i.i.d. `scale * N(0,1)` entries.
    pub fn random_gamma<R: Rng + ?Sized>(theta: Vec<f64>, q: usize, scale: f64, rng: &mut R) -> Self {
        let p = theta.len();
        let rows: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..q).map(|_| { let e: f64 = StandardNormal.sample(rng); scale * e }).collect::<Vec<f64>>())
            .collect();
        Self::new(theta, &rows).expect("consistent shape")
    }

    /// Holds the first `rows` rows of `Gamma` fixed: they are neither updated nor projected.
    pub fn with_pinned_rows(mut self, rows: usize) -> Self {
        self.pinned = rows.min(self.p());
        self
    }

    pub fn pinned_rows(&self) -> usize {
        self.pinned
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.q + j]
    }

    /// Row-major entries of `Gamma`.
    pub fn gamma_flat(&self) -> &[f64] {
        &self.gamma
    }

    pub fn gamma_rows(&self) -> Vec<Vec<f64>> {
        self.gamma.chunks(self.q).map(|r| r.to_vec()).collect()
    }

    pub fn gamma_frobenius(&self) -> f64 {
        self.gamma.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn gamma_z(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.p()];
        gamma_times(&self.gamma, self.q, z, &mut out);
        out
    }

    fn step(&mut self, td: f64, x: &[f64], z: &[f64], schedule: &LearningSchedule, ball: &ProjectionBall) -> Result<()> {
        let p = self.p();
        check_len(p, x.len())?;
        check_len(self.q, z.len())?;
        if !td.is_finite() {
            return Err(Error::NonFinite(format!("residual at t={}", self.t)));
        }
        let (alpha, beta) = schedule.step_sizes(self.t)?;
        gamma_times(&self.gamma, self.q, z, &mut self.gz);
        for i in 0..p {
            self.theta[i] += alpha * td * self.gz[i];
            if i < self.pinned {
                continue;
            }
            let r = beta * (x[i] - self.gz[i]);
            let row = &mut self.gamma[i * self.q..(i + 1) * self.q];
            for (g, zj) in row.iter_mut().zip(z) {
                *g += r * zj;
            }
        }
        ball.project_in_place(&mut self.theta);
        ball.project_in_place(&mut self.gamma[self.pinned * self.q..]);
        self.t += 1;
        Ok(())
    }
}

#[inline]
fn gamma_times(gamma: &[f64], q: usize, z: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(gamma.chunks_exact(q)) {
        *o = row.iter().zip(z).map(|(g, zj)| g * zj).sum();
    }
}

/// `theta` and the step counter of a baseline without instruments.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearState {
    pub theta: Vec<f64>,
    pub t: u64,
}

impl LinearState {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta, t: 1 }
    }

    fn step(&mut self, td: f64, direction: &[f64], schedule: &LearningSchedule, ball: &ProjectionBall) -> Result<()> {
        check_len(self.theta.len(), direction.len())?;
        if !td.is_finite() {
            return Err(Error::NonFinite(format!("residual at t={}", self.t)));
        }
        let alpha = schedule.step_sizes(self.t)?.0;
        for (th, d) in self.theta.iter_mut().zip(direction) {
            *th += alpha * td * d;
        }
        ball.project_in_place(&mut self.theta);
        self.t += 1;
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed-policy IV-SGD step for `y = x^T theta + eps`.
pub fn iv_sgd_update(
    state: &mut IvState,
    x: &[f64],
    y: f64,
    z: &[f64],
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
) -> Result<()> {
    check_len(state.p(), x.len())?;
    let td = y - dot(x, &state.theta);
    state.step(td, x, z, schedule, ball)
}

/// Interactive IV-SGD for the scalar model `y = x theta^2 + eps`, with
/// `x = S^2` and `y = R + A^2/2` under the policy `A = theta_t S`.
pub fn iv_sgd_interactive_update(
    state: &mut IvState,
    x: f64,
    y: f64,
    z: &[f64],
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
) -> Result<()> {
    check_len(1, state.p())?;
    let th = state.theta[0];
    let td = y - x * th * th;
    state.step(td, &[x], z, schedule, ball)
}

/// Least-mean-squares step along `x`.
pub fn sgd_update(state: &mut LinearState, x: &[f64], y: f64, schedule: &LearningSchedule, ball: &ProjectionBall) -> Result<()> {
    check_len(state.theta.len(), x.len())?;
    let td = y - dot(x, &state.theta);
    state.step(td, x, schedule, ball)
}

/// Basis functions `phi(s, a)`.
#[derive(Clone, Copy)]
pub struct FeatureMap {
    pub p: usize,
    eval: fn(f64, f64, &mut [f64]),
}

impl std::fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureMap").field("p", &self.p).finish()
    }
}

fn lq_features(s: f64, a: f64, out: &mut [f64]) {
    out[0] = 1.0;
    out[1] = s;
    out[2] = a;
    out[3] = s * a;
    out[4] = s * s;
    out[5] = a * a;
}

impl FeatureMap {
    pub fn new(p: usize, eval: fn(f64, f64, &mut [f64])) -> Self {
        Self { p, eval }
    }

    /// `(1, s, a, s a, s^2, a^2)`.
    pub fn lq_quadratic() -> Self {
        Self { p: 6, eval: lq_features }
    }

    #[inline]
    pub fn eval_into(&self, s: f64, a: f64, out: &mut [f64]) {
        (self.eval)(s, a, out)
    }

    pub fn eval(&self, s: f64, a: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        self.eval_into(s, a, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionInterval {
    pub lo: f64,
    pub hi: f64,
}

impl Default for ActionInterval {
    fn default() -> Self {
        Self { lo: 0.0, hi: 2.0 }
    }
}

/// How `max_a phi(s', a)^T theta` is evaluated for the quadratic features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaxRule {
    /// Clamped vertex when `theta5 < 0`, otherwise the better endpoint.
    Interval,
    /// Unconstrained vertex `-(theta2 + theta3 s) / (2 theta5)` whenever
    /// `theta5 != 0`; the interval rule when `theta5 == 0`.
    #[default]
    Stationary,
}

/// `phi(s, a)^T theta` for the quadratic features.
#[inline]
pub fn lq_q_value(theta: &[f64], s: f64, a: f64) -> f64 {
    theta[0] + theta[1] * s + theta[2] * a + theta[3] * s * a + theta[4] * s * s + theta[5] * a * a
}

#[inline]
fn endpoint_action(theta: &[f64], s: f64, interval: ActionInterval) -> f64 {
    if lq_q_value(theta, s, interval.lo) >= lq_q_value(theta, s, interval.hi) {
        interval.lo
    } else {
        interval.hi
    }
}

/// Greedy action of the quadratic Q-function on `[lo, hi]`.
pub fn greedy_action(features: &FeatureMap, theta: &[f64], s: f64, interval: ActionInterval) -> Result<f64> {
    check_len(6, features.p)?;
    check_len(6, theta.len())?;
    if theta.iter().any(|v| !v.is_finite()) || !s.is_finite() {
        return Err(Error::NonFinite("theta or state".into()));
    }
    Ok(greedy_unchecked(theta, s, interval))
}

#[inline]
fn greedy_unchecked(theta: &[f64], s: f64, interval: ActionInterval) -> f64 {
    if theta[5] < 0.0 {
        (-(theta[2] + theta[3] * s) / (2.0 * theta[5])).clamp(interval.lo, interval.hi)
    } else {
        endpoint_action(theta, s, interval)
    }
}

/// Action at which the max term of the TD error is evaluated.
#[inline]
pub fn max_action(theta: &[f64], s: f64, interval: ActionInterval, rule: MaxRule) -> f64 {
    match rule {
        MaxRule::Interval => greedy_unchecked(theta, s, interval),
        MaxRule::Stationary => {
            if theta[5] != 0.0 {
                -(theta[2] + theta[3] * s) / (2.0 * theta[5])
            } else {
                endpoint_action(theta, s, interval)
            }
        }
    }
}

/// Settings shared by the Q-learning variants.
#[derive(Debug, Clone, Copy)]
pub struct QSettings {
    pub features: FeatureMap,
    pub gamma_discount: f64,
    pub interval: ActionInterval,
    pub rule: MaxRule,
}

impl QSettings {
    pub fn lq(gamma_discount: f64) -> Self {
        Self {
            features: FeatureMap::lq_quadratic(),
            gamma_discount,
            interval: ActionInterval::default(),
            rule: MaxRule::default(),
        }
    }

    /// TD error `R + gamma max_a' phi(s',a')^T theta - phi(s,a)^T theta`, with `phi(s,a)` written to `phi`.
    #[inline]
    pub fn td(&self, theta: &[f64], obs: &Observation, phi: &mut [f64]) -> f64 {
        self.features.eval_into(obs.state, obs.action, phi);
        let a_max = max_action(theta, obs.next_state, self.interval, self.rule);
        let mut next = vec_buf();
        self.features.eval_into(obs.next_state, a_max, &mut next[..self.features.p]);
        obs.reward_observed + self.gamma_discount * dot(&next[..self.features.p], theta) - dot(phi, theta)
    }

    /// Gradient of the TD error in `theta` (envelope theorem for the max term).
    pub fn td_gradient(&self, theta: &[f64], obs: &Observation, out: &mut [f64]) {
        let p = self.features.p;
        let mut phi = vec_buf();
        let mut next = vec_buf();
        self.features.eval_into(obs.state, obs.action, &mut phi[..p]);
        let a_max = max_action(theta, obs.next_state, self.interval, self.rule);
        self.features.eval_into(obs.next_state, a_max, &mut next[..p]);
        for i in 0..p {
            out[i] = self.gamma_discount * next[i] - phi[i];
        }
    }
}

#[inline]
fn vec_buf() -> [f64; 16] {
    [0.0; 16]
}

/// IV-Q-Learning step.
pub fn iv_q_update(
    state: &mut IvState,
    obs: &Observation,
    settings: &QSettings,
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
) -> Result<()> {
    let p = settings.features.p;
    check_len(p, state.p())?;
    let mut phi = vec_buf();
    let td = settings.td(&state.theta, obs, &mut phi[..p]);
    if phi[..p].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature values".into()));
    }
    state.step(td, &phi[..p], obs.instruments.as_slice(), schedule, ball)
}

/// Q-Learning step along `phi(s, a)`.
pub fn q_update(
    state: &mut LinearState,
    obs: &Observation,
    settings: &QSettings,
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
) -> Result<()> {
    let p = settings.features.p;
    check_len(p, state.theta.len())?;
    let mut phi = vec_buf();
    let td = settings.td(&state.theta, obs, &mut phi[..p]);
    if phi[..p].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature values".into()));
    }
    state.step(td, &phi[..p], schedule, ball)
}

/// IV-TD step for a fixed policy; `next_action` was drawn from that policy at `obs.next_state`.
pub fn iv_td_update(
    state: &mut IvState,
    obs: &Observation,
    next_action: f64,
    features: &FeatureMap,
    gamma_discount: f64,
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
) -> Result<()> {
    let p = features.p;
    check_len(p, state.p())?;
    let mut phi = vec_buf();
    let mut next = vec_buf();
    features.eval_into(obs.state, obs.action, &mut phi[..p]);
    features.eval_into(obs.next_state, next_action, &mut next[..p]);
    let td = obs.reward_observed + gamma_discount * dot(&next[..p], &state.theta) - dot(&phi[..p], &state.theta);
    state.step(td, &phi[..p], obs.instruments.as_slice(), schedule, ball)
}

/// IV actor-critic step. The actor moves along `grad_log_pi` scaled by the critic value at `(s, a)`.
#[allow(clippy::too_many_arguments)]
pub fn iv_ac_update(
    state: &mut IvState,
    mu: &mut [f64],
    obs: &Observation,
    next_action: f64,
    grad_log_pi: &[f64],
    features: &FeatureMap,
    gamma_discount: f64,
    tau_t: f64,
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
) -> Result<()> {
    if gamma_discount == 1.0 {
        return Err(Error::InvalidParameter("actor scaling 1/(1-gamma) is undefined at gamma = 1".into()));
    }
    check_len(mu.len(), grad_log_pi.len())?;
    let p = features.p;
    check_len(p, state.p())?;
    let mut phi = vec_buf();
    features.eval_into(obs.state, obs.action, &mut phi[..p]);
    let critic = dot(&phi[..p], &state.theta);
    let scale = tau_t * critic / (1.0 - gamma_discount);
    iv_td_update(state, obs, next_action, features, gamma_discount, schedule, ball)?;
    for (m, g) in mu.iter_mut().zip(grad_log_pi) {
        *m += scale * g;
    }
    Ok(())
}

/// Gaussian policy `a ~ N(mu0 + mu1 s, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPolicy {
    pub sigma: f64,
}

impl GaussianPolicy {
    pub fn mean(&self, mu: &[f64], s: f64) -> f64 {
        mu[0] + mu[1] * s
    }

    pub fn sample<R: Rng + ?Sized>(&self, mu: &[f64], s: f64, rng: &mut R) -> f64 {
        let e: f64 = StandardNormal.sample(rng);
        self.mean(mu, s) + self.sigma * e
    }

    pub fn grad_log_density(&self, mu: &[f64], s: f64, a: f64) -> [f64; 2] {
        let k = (a - self.mean(mu, s)) / (self.sigma * self.sigma);
        [k, k * s]
    }
}

/// A residual model `td(theta, W)` whose IV drift is `G = td Gamma z`.
pub trait ResidualModel: Sync {
    fn dim(&self) -> usize;
    /// Regressors `x` that `Gamma z` approximates, written to `out`.
    fn regressors(&self, obs: &Observation, out: &mut [f64]);
    fn td(&self, theta: &[f64], obs: &Observation) -> f64;
    fn td_gradient(&self, theta: &[f64], obs: &Observation, out: &mut [f64]);
}

/// The advertising regression `Y = (1, S A)^T theta + eps`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdRegression;

impl ResidualModel for AdRegression {
    fn dim(&self) -> usize {
        2
    }

    fn regressors(&self, obs: &Observation, out: &mut [f64]) {
        out.copy_from_slice(&ad_regressors(obs));
    }

    fn td(&self, theta: &[f64], obs: &Observation) -> f64 {
        let x = ad_regressors(obs);
        obs.reward_observed - x[0] * theta[0] - x[1] * theta[1]
    }

    fn td_gradient(&self, _theta: &[f64], obs: &Observation, out: &mut [f64]) {
        let x = ad_regressors(obs);
        out[0] = -x[0];
        out[1] = -x[1];
    }
}

impl ResidualModel for QSettings {
    fn dim(&self) -> usize {
        self.features.p
    }

    fn regressors(&self, obs: &Observation, out: &mut [f64]) {
        self.features.eval_into(obs.state, obs.action, out);
    }

    fn td(&self, theta: &[f64], obs: &Observation) -> f64 {
        let mut phi = vec_buf();
        QSettings::td(self, theta, obs, &mut phi[..self.features.p])
    }

    fn td_gradient(&self, theta: &[f64], obs: &Observation, out: &mut [f64]) {
        QSettings::td_gradient(self, theta, obs, out)
    }
}

/// IV step driven by any residual model.
pub fn iv_update_with<M: ResidualModel + ?Sized>(
    state: &mut IvState,
    model: &M,
    obs: &Observation,
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
) -> Result<()> {
    let p = model.dim();
    check_len(p, state.p())?;
    let mut x = vec_buf();
    model.regressors(obs, &mut x[..p]);
    let td = model.td(&state.theta, obs);
    state.step(td, &x[..p], obs.instruments.as_slice(), schedule, ball)
}
