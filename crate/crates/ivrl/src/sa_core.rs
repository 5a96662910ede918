//! Projected two-timescale stochastic approximation.
//!
//! ```text
//! lambda_{t+1} = P_B(lambda_t + alpha_t G(W_t, lambda_t, xi_t))
//! xi_{t+1}     = P_B(xi_t + beta_t H(W_t, xi_t))
//! alpha_t = alpha0 t^-kappa,  beta_t = beta0 t^-delta
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Polynomial step-size pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningSchedule {
    pub alpha0: f64,
    pub kappa: f64,
    pub beta0: f64,
    pub delta: f64,
}

impl LearningSchedule {
    pub fn new(alpha0: f64, kappa: f64, beta0: f64, delta: f64) -> Result<Self> {
        let s = Self { alpha0, kappa, beta0, delta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha0 must be positive, got {}", self.alpha0)));
        }
        if !(self.beta0 > 0.0 && self.beta0.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta0 must be positive, got {}", self.beta0)));
        }
        if !(self.kappa > 0.0 && self.kappa <= self.delta && self.delta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < kappa <= delta <= 1, got kappa={} delta={}",
                self.kappa, self.delta
            )));
        }
        Ok(())
    }

    /// `(alpha_t, beta_t)` for `t >= 1`.
    pub fn step_sizes(&self, t: u64) -> Result<(f64, f64)> {
        if t == 0 {
            return Err(Error::ZeroIteration);
        }
        Ok((self.alpha(t), self.beta(t)))
    }

    #[inline]
    pub fn alpha(&self, t: u64) -> f64 {
        self.alpha0 * (t as f64).powf(-self.kappa)
    }

    #[inline]
    pub fn beta(&self, t: u64) -> f64 {
        self.beta0 * (t as f64).powf(-self.delta)
    }
}

/// Euclidean ball `{x : |x| <= radius}`, or no constraint at all.
///
/// Serialized as the radius, or the string `"inactive"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BallRepr", into = "BallRepr")]
pub enum ProjectionBall {
    Inactive,
    Radius(f64),
}

impl ProjectionBall {
    pub fn new(radius: Option<f64>) -> Result<Self> {
        match radius {
            None => Ok(ProjectionBall::Inactive),
            Some(r) if r > 0.0 && r.is_finite() => Ok(ProjectionBall::Radius(r)),
            Some(r) => Err(Error::InvalidParameter(format!("projection radius must be positive, got {r}"))),
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self {
            ProjectionBall::Inactive => None,
            ProjectionBall::Radius(r) => Some(*r),
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.project_in_place(&mut y);
        y
    }

    /// Projects in place. A matrix passed as a flat slice is projected in Frobenius norm.
    #[inline]
    pub fn project_in_place(&self, x: &mut [f64]) {
        if let ProjectionBall::Radius(b) = *self {
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > b {
                let scale = b / n;
                for v in x.iter_mut() {
                    *v *= scale;
                }
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BallRepr {
    Radius(f64),
    Word(String),
}

impl TryFrom<BallRepr> for ProjectionBall {
    type Error = String;

    fn try_from(r: BallRepr) -> std::result::Result<Self, String> {
        match r {
            BallRepr::Radius(v) => ProjectionBall::new(Some(v)).map_err(|e| e.to_string()),
            BallRepr::Word(w) if w == "inactive" => Ok(ProjectionBall::Inactive),
            BallRepr::Word(w) => Err(format!("expected a radius or \"inactive\", got \"{w}\"")),
        }
    }
}

impl From<ProjectionBall> for BallRepr {
    fn from(b: ProjectionBall) -> Self {
        match b {
            ProjectionBall::Inactive => BallRepr::Word("inactive".into()),
            ProjectionBall::Radius(r) => BallRepr::Radius(r),
        }
    }
}

/// Fast iterate `lambda`, slow iterate `xi`, and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SaState {
    pub lambda: Vec<f64>,
    pub xi: Vec<f64>,
    pub t: u64,
}

impl SaState {
    pub fn new(lambda: Vec<f64>, xi: Vec<f64>) -> Self {
        Self { lambda, xi, t: 1 }
    }
}

/// One projected step. `g_value` and `h_value` must be evaluated at the pre-step iterates.
pub fn sa_step(
    state: &SaState,
    schedule: &LearningSchedule,
    ball: &ProjectionBall,
    g_value: &[f64],
    h_value: &[f64],
) -> Result<SaState> {
    check_len(state.lambda.len(), g_value.len())?;
    check_len(state.xi.len(), h_value.len())?;
    let (alpha, beta) = schedule.step_sizes(state.t)?;
    let mut lambda: Vec<f64> = state.lambda.iter().zip(g_value).map(|(l, g)| l + alpha * g).collect();
    let mut xi: Vec<f64> = state.xi.iter().zip(h_value).map(|(x, h)| x + beta * h).collect();
    ball.project_in_place(&mut lambda);
    ball.project_in_place(&mut xi);
    Ok(SaState { lambda, xi, t: state.t + 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_sizes_at_one() {
        let s = LearningSchedule::new(10.0, 0.7, 5.0, 0.9).unwrap();
        assert_eq!(s.step_sizes(1).unwrap(), (10.0, 5.0));
        assert_eq!(s.step_sizes(0), Err(Error::ZeroIteration));
    }

    #[test]
    fn rejects_bad_exponents() {
        assert!(LearningSchedule::new(10.0, 0.9, 5.0, 0.7).is_err());
        assert!(LearningSchedule::new(10.0, 0.0, 5.0, 0.7).is_err());
        assert!(LearningSchedule::new(-1.0, 0.5, 5.0, 0.7).is_err());
        assert!(LearningSchedule::new(1.0, 0.5, 5.0, 1.2).is_err());
    }

    #[test]
    fn projection_examples() {
        let b = ProjectionBall::new(Some(3.0)).unwrap();
        assert_eq!(b.project(&[0.5, 0.5]), vec![0.5, 0.5]);
        let b = ProjectionBall::new(Some(2.5)).unwrap();
        assert_eq!(b.project(&[3.0, 4.0]), vec![1.5, 2.0]);
        let b = ProjectionBall::new(Some(1.0)).unwrap();
        assert_eq!(b.project(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(ProjectionBall::Inactive.project(&[30.0, 40.0]), vec![30.0, 40.0]);
        assert!(ProjectionBall::new(Some(0.0)).is_err());
    }

    #[test]
    fn sa_step_examples() {
        let sched = LearningSchedule::new(10.0, 0.7, 5.0, 0.9).unwrap();
        let st = SaState { lambda: vec![1.0, 2.0], xi: vec![3.0], t: 4 };
        let next = sa_step(&st, &sched, &ProjectionBall::Inactive, &[0.0, 0.0], &[0.0]).unwrap();
        assert_eq!(next.lambda, st.lambda);
        assert_eq!(next.xi, st.xi);
        assert_eq!(next.t, 5);

        let half = LearningSchedule::new(0.5, 0.5, 0.5, 0.5).unwrap();
        let st = SaState { lambda: vec![1.0], xi: vec![0.0], t: 1 };
        let next = sa_step(&st, &half, &ProjectionBall::Inactive, &[-2.0], &[0.0]).unwrap();
        assert_eq!(next.lambda, vec![0.0]);

        let one = LearningSchedule::new(1.0, 0.5, 1.0, 0.5).unwrap();
        let st = SaState { lambda: vec![2.0], xi: vec![0.0], t: 1 };
        let next = sa_step(&st, &one, &ProjectionBall::Radius(3.0), &[2.0], &[0.0]).unwrap();
        assert_eq!(next.lambda, vec![3.0]);
    }

    #[test]
    fn sa_step_dimension_errors() {
        let sched = LearningSchedule::new(1.0, 0.5, 1.0, 0.5).unwrap();
        let st = SaState::new(vec![0.0; 2], vec![0.0; 3]);
        assert!(matches!(
            sa_step(&st, &sched, &ProjectionBall::Inactive, &[1.0], &[0.0; 3]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(sa_step(&st, &sched, &ProjectionBall::Inactive, &[1.0; 2], &[0.0; 2]).is_err());
        let zero = SaState { t: 0, ..st };
        assert_eq!(
            sa_step(&zero, &sched, &ProjectionBall::Inactive, &[1.0; 2], &[0.0; 3]),
            Err(Error::ZeroIteration)
        );
    }
}
