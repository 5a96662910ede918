//! Browser bindings for three small interactive demos.

use ivrl::environments::{AdEnvConfig, LqEnvConfig, RbiasMode};
use ivrl::harness::{run_ad_replication, seed_stream, IvsgdBlock};
use ivrl::oracles::{rbias_fixed_point, value_of_linear_policy, LqOracle, PolicyCoeffs};
use wasm_bindgen::prelude::*;

fn mode(state_dependent: bool) -> RbiasMode {
    if state_dependent {
        RbiasMode::StateDependent
    } else {
        RbiasMode::ActionDependent
    }
}

/// Slopes of repeated re-estimation, followed by the fixed point as the last element.
#[wasm_bindgen]
pub fn rbias_path(theta_star: f64, beta: f64, state_dependent: bool, rounds: usize, samples: usize, seed: u64) -> Result<Vec<f64>, String> {
    let m = mode(state_dependent);
    let mut rng = seed_stream(seed, 0);
    let mut path = ivrl::environments::rbias_iterate(theta_star, beta, m, 1.0, rounds, samples, &mut rng).map_err(|e| e.to_string())?;
    path.push(rbias_fixed_point(theta_star, beta, m).map_err(|e| e.to_string())?);
    Ok(path)
}

/// `[t, iv_theta1, sgd_theta1]` triples every `stride` steps on one advertising stream.
#[wasm_bindgen]
pub fn ad_trajectories(p_explore: f64, b: f64, horizon: u32, stride: u32, seed: u64) -> Result<Vec<f64>, String> {
    let env = AdEnvConfig { p_explore, b, ..AdEnvConfig::default() };
    let block = IvsgdBlock::default();
    let stride = stride.max(1) as u64;
    let mut out = Vec::new();
    let mut rng = seed_stream(seed, 0);
    run_ad_replication(&env, &block, horizon as u64, &mut rng, false, |t, iv, sgd| {
        if t % stride == 0 {
            out.extend([t as f64, iv.theta[1], sgd.theta[1]]);
        }
    })
    .map_err(|e| e.to_string())?;
    Ok(out)
}

/// `[omega0*, omega1*, V*(s), V_pi(s), relative loss]` for the linear policy `a = omega0 + omega1 s`.
#[wasm_bindgen]
pub fn lq_policy_value(gamma: f64, omega0: f64, omega1: f64, s: f64) -> Result<Vec<f64>, String> {
    let cfg = LqEnvConfig { gamma, ..LqEnvConfig::default() };
    let oracle = LqOracle::new(&cfg).map_err(|e| e.to_string())?;
    let v = value_of_linear_policy(&cfg, &PolicyCoeffs { omega0, omega1 }).map_err(|e| e.to_string())?;
    let v_star = oracle.value.at(s);
    let v_pi = v.at(s);
    Ok(vec![oracle.policy.omega0, oracle.policy.omega1, v_star, v_pi, (v_star - v_pi) / v_star])
}
