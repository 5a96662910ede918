//! Data-generating processes with endogenous observed rewards.
//!
//! Two models are provided. The advertising model draws i.i.d. log-normal
//! states and mixes a fixed linear policy with uniform exploration. The
//! linear-quadratic model has a scalar autoregressive state and a two-part
//! action `a = a1 + a2`, where only `a2` leaks into the observed reward.

use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 6;

/// Instrument vector stored inline so observations stay `Copy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instruments {
    len: usize,
    data: [f64; MAX_DIM],
}

impl Instruments {
    pub fn from_slice(z: &[f64]) -> Self {
        assert!(z.len() <= MAX_DIM, "at most {MAX_DIM} instruments");
        let mut data = [0.0; MAX_DIM];
        data[..z.len()].copy_from_slice(z);
        Self { len: z.len(), data }
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = *self;
        for v in out.data[..out.len].iter_mut() {
            *v *= c;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Aux {
    /// Exploration indicator of the advertising model.
    pub explore: Option<bool>,
    pub a1: Option<f64>,
    pub a2: Option<f64>,
    pub true_reward: f64,
    /// Observed minus true reward.
    pub noise: f64,
}

/// One record `W_t = (s, a, R, z, s')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub state: f64,
    pub action: f64,
    pub reward_observed: f64,
    pub instruments: Instruments,
    /// NaN for the i.i.d. advertising model.
    pub next_state: f64,
    pub aux: Aux,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdEnvConfig {
    pub theta_star: [f64; 2],
    pub tilde_theta: f64,
    pub p_explore: f64,
    pub b: f64,
    pub sigma_eps: f64,
    pub s_mean: f64,
}

impl Default for AdEnvConfig {
    fn default() -> Self {
        Self {
            theta_star: [0.0, 1.0],
            tilde_theta: 0.5,
            p_explore: 0.3,
            b: 0.3,
            sigma_eps: 1.0,
            s_mean: (0.125f64).exp(),
        }
    }
}

impl AdEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_explore) {
            return Err(Error::InvalidParameter(format!("p_explore must lie in [0,1], got {}", self.p_explore)));
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma_eps must be >= 0, got {}", self.sigma_eps)));
        }
        Ok(())
    }

    /// `Cov(q (S - E S), S A)` with `q` the exploration indicator.
    pub fn instrument_covariance(&self) -> f64 {
        self.p_explore * 0.5 * ((0.5f64).exp() - (0.25f64).exp())
    }
}

/// Builds the advertising record from already drawn primitives.
pub fn ad_observation(cfg: &AdEnvConfig, s: f64, explore: bool, u: f64, o: f64) -> Observation {
    let a = if explore { u } else { cfg.tilde_theta * s };
    let true_reward = cfg.theta_star[0] + cfg.theta_star[1] * s * a;
    let noise = cfg.b * a * a + o;
    let q = if explore { 1.0 } else { 0.0 };
    Observation {
        state: s,
        action: a,
        reward_observed: true_reward + noise,
        instruments: Instruments::from_slice(&[1.0, q * (s - cfg.s_mean)]),
        next_state: f64::NAN,
        aux: Aux { explore: Some(explore), a1: None, a2: None, true_reward, noise },
    }
}

/// Draws one period of the advertising model. `Y_t` is `reward_observed`.
pub fn ad_env_step<R: Rng + ?Sized>(cfg: &AdEnvConfig, rng: &mut R) -> Observation {
    let s = LogNormal::new(0.0, 0.5).expect("valid lognormal").sample(rng);
    let explore = rng.gen::<f64>() < cfg.p_explore;
    let u = rng.gen::<f64>();
    let e: f64 = StandardNormal.sample(rng);
    ad_observation(cfg, s, explore, u, cfg.sigma_eps * e)
}

/// Regressors `x = (1, S A)` of the advertising model.
#[inline]
pub fn ad_regressors(obs: &Observation) -> [f64; 2] {
    [1.0, obs.state * obs.action]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqEnvConfig {
    pub gamma: f64,
    pub c: [f64; 3],
    pub r: [f64; 4],
    pub b: f64,
    /// `eta ~ Uniform[-w, w]`.
    pub eta_half_width: f64,
    /// Shape parameters of the Beta law shared by `a1` and `a2`.
    pub action_beta: [f64; 2],
    /// `o ~ Uniform(-w, w)`.
    pub o_half_width: f64,
}

impl Default for LqEnvConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            c: [0.5, 0.4, 0.2],
            r: [0.0, 0.0, 1.0, -1.0],
            b: 0.8,
            eta_half_width: 3f64.sqrt(),
            action_beta: [1.0, 1.5],
            o_half_width: 0.25,
        }
    }
}

impl LqEnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!("gamma must lie in [0,1), got {}", self.gamma)));
        }
        if !(self.action_beta[0] > 0.0 && self.action_beta[1] > 0.0) {
            return Err(Error::InvalidParameter("Beta shape parameters must be positive".into()));
        }
        if !(self.eta_half_width >= 0.0 && self.o_half_width >= 0.0) {
            return Err(Error::InvalidParameter("noise half widths must be >= 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn true_reward(&self, s: f64, a: f64) -> f64 {
        self.r[0] + self.r[1] * a + self.r[2] * s * a + self.r[3] * a * a
    }

    pub fn sigma_eta2(&self) -> f64 {
        self.eta_half_width * self.eta_half_width / 3.0
    }

    /// `E[A_{t,2}]`.
    pub fn action_part_mean(&self) -> f64 {
        let [a, b] = self.action_beta;
        a / (a + b)
    }

    /// `E[A_{t,2}^2]`.
    pub fn action_part_second_moment(&self) -> f64 {
        let [a, b] = self.action_beta;
        a * (a + 1.0) / ((a + b) * (a + b + 1.0))
    }

    /// Mean of the reward distortion, `b E[A_{t,2}^2]`.
    pub fn bias_mean(&self) -> f64 {
        self.b * self.action_part_second_moment()
    }

    /// Stationary state mean under the behavior policy.
    pub fn stationary_state_mean(&self) -> f64 {
        let ea = 2.0 * self.action_part_mean();
        (self.c[0] + self.c[2] * ea) / (1.0 - self.c[1])
    }
}

/// Builds the linear-quadratic record from already drawn primitives.
pub fn lq_transition(cfg: &LqEnvConfig, s: f64, a1: f64, a2: f64, eta: f64, o: f64) -> Observation {
    let a = a1 + a2;
    let next = cfg.c[0] + cfg.c[1] * s + cfg.c[2] * a + eta;
    let true_reward = cfg.true_reward(s, a);
    let noise = cfg.b * a2 * a2 + o;
    Observation {
        state: s,
        action: a,
        reward_observed: true_reward + noise,
        instruments: Instruments::from_slice(&[1.0, s, a1, s * a1, s * s, a1 * a1]),
        next_state: next,
        aux: Aux { explore: None, a1: Some(a1), a2: Some(a2), true_reward, noise },
    }
}

pub fn lq_env_step<R: Rng + ?Sized>(cfg: &LqEnvConfig, state: f64, action_pair: (f64, f64), rng: &mut R) -> Observation {
    let eta = if cfg.eta_half_width > 0.0 {
        rng.gen_range(-cfg.eta_half_width..cfg.eta_half_width)
    } else {
        0.0
    };
    let o = if cfg.o_half_width > 0.0 {
        rng.gen_range(-cfg.o_half_width..cfg.o_half_width)
    } else {
        0.0
    };
    lq_transition(cfg, state, action_pair.0, action_pair.1, eta, o)
}

/// Behavior policy: both action parts drawn independently from the Beta law.
pub fn lq_behavior_action<R: Rng + ?Sized>(cfg: &LqEnvConfig, rng: &mut R) -> (f64, f64) {
    let d = Beta::new(cfg.action_beta[0], cfg.action_beta[1]).expect("valid beta");
    (d.sample(rng), d.sample(rng))
}

/// Stateful wrapper that owns the state and the random stream of one trajectory.
#[derive(Debug, Clone)]
pub struct LqEnv<R> {
    pub cfg: LqEnvConfig,
    pub state: f64,
    beta: Beta<f64>,
    rng: R,
}

impl<R: Rng> LqEnv<R> {
    pub fn new(cfg: LqEnvConfig, s0: f64, rng: R) -> Result<Self> {
        cfg.validate()?;
        let beta = Beta::new(cfg.action_beta[0], cfg.action_beta[1])
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        Ok(Self { cfg, state: s0, beta, rng })
    }

    /// Acts with the behavior policy and advances the state.
    pub fn step(&mut self) -> Observation {
        let a1 = self.beta.sample(&mut self.rng);
        let a2 = self.beta.sample(&mut self.rng);
        let obs = lq_env_step(&self.cfg, self.state, (a1, a2), &mut self.rng);
        self.state = obs.next_state;
        obs
    }

    pub fn rng(&mut self) -> &mut R {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RbiasMode {
    /// Noise `beta A^2 + o`.
    ActionDependent,
    /// Noise `beta S^2 + o`.
    StateDependent,
}

/// OLS slope of `R + A^2/2` on `S A` under the fixed policy `A = slope S`.
pub fn rbias_iteration_env<R: Rng + ?Sized>(
    theta_star: f64,
    beta: f64,
    mode: RbiasMode,
    policy_slope: f64,
    rng: &mut R,
    n: usize,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need n >= 2, got {n}")));
    }
    if mode == RbiasMode::StateDependent && policy_slope == 0.0 {
        return Err(Error::InvalidParameter("state mode needs a non-zero policy slope".into()));
    }
    let ln = LogNormal::new(0.0, 0.5).expect("valid lognormal");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let s: f64 = ln.sample(rng);
        let a = policy_slope * s;
        let o: f64 = StandardNormal.sample(rng);
        let eps = match mode {
            RbiasMode::ActionDependent => beta * a * a + o,
            RbiasMode::StateDependent => beta * s * s + o,
        };
        let reward = theta_star * s * a - 0.5 * a * a + eps;
        xs.push(s * a);
        ys.push(reward + 0.5 * a * a);
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("regressor S*A has zero variance".into()));
    }
    Ok(sxy / sxx)
}

/// Repeated re-estimation where each round's policy slope is the previous estimate.
pub fn rbias_iterate<R: Rng + ?Sized>(
    theta_star: f64,
    beta: f64,
    mode: RbiasMode,
    initial_slope: f64,
    rounds: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut slope = initial_slope;
    let mut path = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        slope = rbias_iteration_env(theta_star, beta, mode, slope, rng, n)?;
        path.push(slope);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ad_no_exploration_follows_fixed_policy() {
        let cfg = AdEnvConfig { p_explore: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let o = ad_env_step(&cfg, &mut rng);
            assert_eq!(o.action, cfg.tilde_theta * o.state);
            assert_eq!(o.instruments.as_slice()[1], 0.0);
        }
    }

    #[test]
    fn ad_noiseless_target() {
        let cfg = AdEnvConfig { b: 0.0, sigma_eps: 0.0, theta_star: [0.3, 1.2], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let o = ad_env_step(&cfg, &mut rng);
            let r = o.reward_observed - (0.3 + 1.2 * o.state * o.action);
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn lq_arithmetic() {
        let cfg = LqEnvConfig::default();
        let o = lq_transition(&cfg, 1.0, 0.5, 0.5, 0.0, 0.0);
        assert!((o.next_state - 1.1).abs() < 1e-15);
        let cfg0 = LqEnvConfig { b: 0.0, ..Default::default() };
        let o = lq_transition(&cfg0, 1.0, 0.5, 0.5, 0.0, 0.0);
        assert_eq!(o.reward_observed, 0.0);
        assert_eq!(o.instruments.as_slice(), &[1.0, 1.0, 0.5, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn beta_second_moment() {
        let cfg = LqEnvConfig::default();
        assert!((cfg.action_part_second_moment() - 2.0 / (2.5 * 3.5)).abs() < 1e-15);
        assert!((cfg.stationary_state_mean() - (0.5 + 0.2 * 0.8) / (1.0 - 0.4)).abs() < 1e-15);
    }

    #[test]
    fn rbias_rejects_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(rbias_iteration_env(1.0, 0.5, RbiasMode::ActionDependent, 1.0, &mut rng, 1).is_err());
        assert!(rbias_iteration_env(1.0, 0.5, RbiasMode::StateDependent, 0.0, &mut rng, 10).is_err());
        assert!(matches!(
            rbias_iteration_env(1.0, 0.5, RbiasMode::ActionDependent, 0.0, &mut rng, 10),
            Err(Error::Degenerate(_))
        ));
    }
}
