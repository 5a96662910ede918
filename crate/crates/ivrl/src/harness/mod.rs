//! Seeded, replication-parallel experiment presets.
//!
//! Every replication draws from its own ChaCha8 stream selected by
//! `(master_seed, stream index)`, so output never depends on the thread count.

mod config;
mod output;

pub use config::{ExperimentConfig, InferBlock, IvsgdBlock, LqBlock, Preset, RbiasBlock};
pub use output::{emit_csv, emit_json, format_float, Cell, CsvTable};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::algorithms::{
    greedy_action, iv_q_update, iv_sgd_update, q_update, sgd_update, AdRegression, FeatureMap, IvState, LinearState,
    QSettings,
};
use crate::environments::{ad_env_step, ad_regressors, rbias_iterate, AdEnvConfig, LqEnv, LqEnvConfig, Observation};
use crate::error::{Error, Result};
use crate::inference::{confidence_interval, plug_in_report, policy_test_t2, spot_test, PolicyTestResult, T2Result};
use crate::oracles::{bellman_residual, rbias_fixed_point, theta_star_residuals, LqOracle};

const BOOTSTRAP_SALT: u64 = 0x5eed_b007_57a9_0001;

/// Independent stream `replication_index` of the generator seeded by `master_seed`.
pub fn seed_stream(master_seed: u64, replication_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replication_index);
    rng
}

fn cell_stream(master_seed: u64, cell: usize, rep: usize) -> ChaCha8Rng {
    seed_stream(master_seed, ((cell as u64) << 32) | rep as u64)
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Runs `f(0..n)` in parallel and returns the results in index order.
pub fn replicate<T: Send>(threads: Option<usize>, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    in_pool(threads, || (0..n).into_par_iter().map(&f).collect())
}

/// One aggregated design cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub horizon: u64,
    pub p_explore: f64,
    pub b: f64,
    pub algorithm: String,
    pub replications: usize,
    pub bias: f64,
    pub rmse: f64,
    pub sd_est: f64,
    pub sd_theo: f64,
    pub coverage: f64,
    pub failures: usize,
}

const TABLE_HEADER: [&str; 11] =
    ["horizon", "p_explore", "b", "algorithm", "replications", "bias", "rmse", "sd_est", "sd_theo", "coverage", "failures"];

pub fn table_rows_csv(rows: &[TableRow]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&TABLE_HEADER);
    for r in rows {
        t.push(vec![
            r.horizon.into(),
            r.p_explore.into(),
            r.b.into(),
            r.algorithm.as_str().into(),
            r.replications.into(),
            r.bias.into(),
            r.rmse.into(),
            r.sd_est.into(),
            r.sd_theo.into(),
            r.coverage.into(),
            r.failures.into(),
        ])?;
    }
    Ok(t)
}

/// `(bias, rmse, sd)` of estimation errors, with the population sd so that `rmse^2 = bias^2 + sd^2`.
pub fn error_summary(errors: &[f64]) -> (f64, f64, f64) {
    if errors.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / n;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / n;
    (bias, mse.sqrt(), var.sqrt())
}

/// Terminal iterates of IV-SGD and SGD run on one advertising stream.
#[derive(Debug, Clone)]
pub struct AdRun {
    pub iv: IvState,
    pub sgd: LinearState,
    pub trajectory: Vec<Observation>,
}

/// IV-SGD and SGD side by side for `horizon` steps. `observer(t, iv, sgd)` sees the iterates after step `t`.
pub fn run_ad_replication<R: Rng + ?Sized>(
    env: &AdEnvConfig,
    block: &IvsgdBlock,
    horizon: u64,
    rng: &mut R,
    keep_trajectory: bool,
    mut observer: impl FnMut(u64, &IvState, &LinearState),
) -> Result<AdRun> {
    env.validate()?;
    let mut iv = IvState::new(block.theta0.clone(), &block.gamma0)?.with_pinned_rows(block.pinned_gamma_rows);
    let mut sgd = LinearState::new(block.theta0.clone());
    let mut trajectory = Vec::with_capacity(if keep_trajectory { horizon as usize } else { 0 });
    for t in 1..=horizon {
        let obs = ad_env_step(env, rng);
        let x = ad_regressors(&obs);
        iv_sgd_update(&mut iv, &x, obs.reward_observed, obs.instruments.as_slice(), &block.schedule, &block.projection)?;
        sgd_update(&mut sgd, &x, obs.reward_observed, &block.schedule, &block.projection)?;
        observer(t, &iv, &sgd);
        if keep_trajectory {
            trajectory.push(obs);
        }
    }
    Ok(AdRun { iv, sgd, trajectory })
}

fn ad_cells(config: &ExperimentConfig) -> Result<Vec<(u64, f64, f64)>> {
    let mut cells = Vec::new();
    for &h in &config.table_horizons()? {
        for &p in &config.ivsgd.p_explore {
            for &b in &config.ivsgd.b {
                cells.push((h, p, b));
            }
        }
    }
    Ok(cells)
}

struct AdRepOutcome {
    iv_err: f64,
    sgd_err: f64,
    inference: Option<Result<(f64, bool)>>,
}

fn run_ad_cell(config: &ExperimentConfig, cell: usize, horizon: u64, p: f64, b: f64, with_ci: bool) -> Result<Vec<AdRepOutcome>> {
    let env = AdEnvConfig { p_explore: p, b, ..config.ad };
    env.validate()?;
    let reps = config.replications()?;
    let target = env.theta_star[1];
    let alpha_t = config.ivsgd.schedule.alpha(horizon);
    let outcomes = replicate(config.threads, reps, |rep| -> Result<AdRepOutcome> {
        let mut rng = cell_stream(config.master_seed, cell, rep);
        let run = run_ad_replication(&env, &config.ivsgd, horizon, &mut rng, with_ci, |_, _, _| {})?;
        let inference = with_ci.then(|| {
            let (report, _) = plug_in_report(&run.trajectory, &run.iv, &AdRegression, alpha_t, &config.infer.settings)?;
            let ci = confidence_interval(&run.iv.theta, &report, config.ivsgd.level)?;
            Ok((report.sd(1), ci[1].contains(target)))
        });
        Ok(AdRepOutcome { iv_err: run.iv.theta[1] - target, sgd_err: run.sgd.theta[1] - target, inference })
    })?;
    outcomes.into_iter().collect()
}

/// Bias and RMSE of `theta_1` for IV-SGD and SGD over the design grid.
pub fn run_ivsgd_table(config: &ExperimentConfig) -> Result<Vec<TableRow>> {
    let reps = config.replications()?;
    let mut rows = Vec::new();
    for (cell, (h, p, b)) in ad_cells(config)?.into_iter().enumerate() {
        let out = run_ad_cell(config, cell, h, p, b, false)?;
        for (name, errs) in [
            ("iv-sgd", out.iter().map(|o| o.iv_err).collect::<Vec<_>>()),
            ("sgd", out.iter().map(|o| o.sgd_err).collect::<Vec<_>>()),
        ] {
            let (bias, rmse, sd_est) = error_summary(&errs);
            rows.push(TableRow {
                horizon: h,
                p_explore: p,
                b,
                algorithm: name.into(),
                replications: reps,
                bias,
                rmse,
                sd_est,
                sd_theo: f64::NAN,
                coverage: f64::NAN,
                failures: 0,
            });
        }
    }
    Ok(rows)
}

/// Plug-in confidence intervals for `theta_1` from IV-SGD over the design grid.
pub fn run_coverage_table(config: &ExperimentConfig) -> Result<Vec<TableRow>> {
    let reps = config.replications()?;
    let mut rows = Vec::new();
    for (cell, (h, p, b)) in ad_cells(config)?.into_iter().enumerate() {
        let out = run_ad_cell(config, cell, h, p, b, true)?;
        let errs: Vec<f64> = out.iter().map(|o| o.iv_err).collect();
        let (bias, rmse, sd_est) = error_summary(&errs);
        let ok: Vec<(f64, bool)> = out.iter().filter_map(|o| o.inference.as_ref().and_then(|r| r.as_ref().ok()).copied()).collect();
        let failures = reps - ok.len();
        let (sd_theo, coverage) = if ok.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let n = ok.len() as f64;
            (ok.iter().map(|o| o.0).sum::<f64>() / n, ok.iter().filter(|o| o.1).count() as f64 / n)
        };
        rows.push(TableRow {
            horizon: h,
            p_explore: p,
            b,
            algorithm: "iv-sgd".into(),
            replications: reps,
            bias,
            rmse,
            sd_est,
            sd_theo,
            coverage,
            failures,
        });
    }
    Ok(rows)
}

/// `theta` and the opportunity costs at the configured states after `t` steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqCheckpoint {
    pub t: u64,
    pub theta: Vec<f64>,
    pub ltoc_abs: Vec<f64>,
    pub ltoc_rel: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LqAlgorithmRun {
    pub algorithm: String,
    pub terminal: Vec<f64>,
    pub checkpoints: Vec<LqCheckpoint>,
    /// Mean relative LTOC per state over the late window, over steps where it is defined.
    pub late_relative_ltoc: Vec<f64>,
    /// Late-window steps whose greedy policy had no finite value.
    pub late_failures: usize,
}

#[derive(Debug, Clone)]
pub struct LqReplication {
    pub iv: LqAlgorithmRun,
    pub q: Option<LqAlgorithmRun>,
    pub iv_state: IvState,
    pub trajectory: Vec<Observation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LqRunOptions {
    pub record_checkpoints: bool,
    pub keep_trajectory: bool,
    pub run_q: bool,
}

/// Every `early_stride` steps up to `early_window`, plus `checkpoints` evenly spaced steps up to `horizon`.
pub fn checkpoint_times(block: &LqBlock, horizon: u64) -> Vec<u64> {
    let mut ts = vec![0];
    if block.early_stride > 0 {
        let mut t = block.early_stride;
        while t <= block.early_window.min(horizon) {
            ts.push(t);
            t += block.early_stride;
        }
    }
    let k = block.checkpoints as u64;
    for i in 1..=k {
        ts.push(((i as u128 * horizon as u128) / k as u128) as u64);
    }
    ts.sort_unstable();
    ts.dedup();
    ts
}

fn ltoc_pair(oracle: &LqOracle, theta: &[f64], s: f64) -> (f64, f64) {
    match oracle.ltoc(theta, s) {
        Ok(l) => (l.absolute, l.relative),
        Err(_) => (f64::NAN, f64::NAN),
    }
}

struct Tracker<'a> {
    name: &'static str,
    block: &'a LqBlock,
    oracle: &'a LqOracle,
    times: &'a [u64],
    next: usize,
    checkpoints: Vec<LqCheckpoint>,
    late_sum: Vec<f64>,
    late_n: Vec<usize>,
    late_failures: usize,
}

impl<'a> Tracker<'a> {
    fn new(name: &'static str, block: &'a LqBlock, oracle: &'a LqOracle, times: &'a [u64]) -> Self {
        let k = block.ltoc_states.len();
        Self { name, block, oracle, times, next: 0, checkpoints: Vec::new(), late_sum: vec![0.0; k], late_n: vec![0; k], late_failures: 0 }
    }

    fn observe(&mut self, t: u64, horizon: u64, theta: &[f64]) -> Result<()> {
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= self.block.divergence_norm) {
            return Err(Error::Diverged { t, norm });
        }
        if self.next < self.times.len() && self.times[self.next] == t {
            self.next += 1;
            let (ltoc_abs, ltoc_rel) = self.block.ltoc_states.iter().map(|&s| ltoc_pair(self.oracle, theta, s)).unzip();
            self.checkpoints.push(LqCheckpoint { t, theta: theta.to_vec(), ltoc_abs, ltoc_rel });
        }
        if t + self.block.late_window > horizon {
            let mut failed = false;
            for (i, &s) in self.block.ltoc_states.iter().enumerate() {
                match self.oracle.ltoc(theta, s) {
                    Ok(l) if l.relative.is_finite() => {
                        self.late_sum[i] += l.relative;
                        self.late_n[i] += 1;
                    }
                    _ => failed = true,
                }
            }
            if failed {
                self.late_failures += 1;
            }
        }
        Ok(())
    }

    fn finish(self, terminal: &[f64]) -> LqAlgorithmRun {
        let late_relative_ltoc =
            self.late_sum.iter().zip(&self.late_n).map(|(s, &n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect();
        LqAlgorithmRun {
            algorithm: self.name.into(),
            terminal: terminal.to_vec(),
            checkpoints: self.checkpoints,
            late_relative_ltoc,
            late_failures: self.late_failures,
        }
    }
}

/// The Q-learning settings implied by the run block.
pub fn lq_settings(env: &LqEnvConfig, block: &LqBlock) -> QSettings {
    QSettings { interval: block.action_interval, rule: block.max_rule, ..QSettings::lq(env.gamma) }
}

/// IV-Q-Learning (and optionally Q-Learning) on one behavior-policy stream of the LQ model.
///
/// `Gamma_0` is drawn from `rng` before the first transition.
pub fn run_lq_replication(
    env: &LqEnvConfig,
    block: &LqBlock,
    oracle: &LqOracle,
    horizon: u64,
    mut rng: ChaCha8Rng,
    opts: LqRunOptions,
) -> Result<LqReplication> {
    block.schedule.validate()?;
    let settings = lq_settings(env, block);
    let mut iv = IvState::random_gamma(block.theta0.to_vec(), 6, block.gamma0_scale, &mut rng);
    let mut q = LinearState::new(block.theta0.to_vec());
    let mut sim = LqEnv::new(*env, block.initial_state(env), rng)?;
    let no_times: [u64; 0] = [];
    let times = if opts.record_checkpoints { checkpoint_times(block, horizon) } else { Vec::new() };
    let times_ref: &[u64] = if opts.record_checkpoints { &times } else { &no_times };
    let mut iv_track = Tracker::new("iv-q", block, oracle, times_ref);
    let mut q_track = Tracker::new("q", block, oracle, times_ref);
    iv_track.observe(0, horizon, &iv.theta)?;
    if opts.run_q {
        q_track.observe(0, horizon, &q.theta)?;
    }
    let mut trajectory = Vec::with_capacity(if opts.keep_trajectory { horizon as usize } else { 0 });
    for t in 1..=horizon {
        let obs = sim.step();
        iv_q_update(&mut iv, &obs, &settings, &block.schedule, &block.projection)?;
        iv_track.observe(t, horizon, &iv.theta)?;
        if opts.run_q {
            q_update(&mut q, &obs, &settings, &block.schedule, &block.projection)?;
            q_track.observe(t, horizon, &q.theta)?;
        }
        if opts.keep_trajectory {
            trajectory.push(obs);
        }
    }
    let iv_run = iv_track.finish(&iv.theta);
    let q_run = opts.run_q.then(|| q_track.finish(&q.theta));
    Ok(LqReplication { iv: iv_run, q: q_run, iv_state: iv, trajectory })
}

#[derive(Debug, Clone, Serialize)]
pub struct LqExperiment {
    pub horizon: u64,
    pub oracle: LqOracle,
    pub ltoc_states: Vec<f64>,
    /// Per replication: the IV-Q run followed by the Q run.
    pub runs: Vec<[LqAlgorithmRun; 2]>,
}

impl LqExperiment {
    pub fn terminal_errors(&self, which: usize) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| r[which].terminal.iter().zip(&self.oracle.theta_star.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .collect()
    }

    /// Mean over replications of the late-window relative LTOC, per state.
    pub fn mean_late_ltoc(&self, which: usize) -> Vec<f64> {
        let k = self.ltoc_states.len();
        let n = self.runs.len() as f64;
        (0..k).map(|i| self.runs.iter().map(|r| r[which].late_relative_ltoc[i]).sum::<f64>() / n).collect()
    }

    pub fn to_csv(&self) -> Result<CsvTable> {
        let mut header: Vec<String> = ["algorithm", "replication", "t"].iter().map(|s| s.to_string()).collect();
        header.extend((0..6).map(|i| format!("theta{i}")));
        for s in &self.ltoc_states {
            header.push(format!("ltoc_abs_s{s}"));
        }
        for s in &self.ltoc_states {
            header.push(format!("ltoc_rel_s{s}"));
        }
        let mut table = CsvTable::new(&header);
        for (rep, pair) in self.runs.iter().enumerate() {
            for run in pair {
                for c in &run.checkpoints {
                    let mut row: Vec<Cell> = vec![run.algorithm.as_str().into(), rep.into(), c.t.into()];
                    row.extend(c.theta.iter().map(|&v| Cell::F(v)));
                    row.extend(c.ltoc_abs.iter().map(|&v| Cell::F(v)));
                    row.extend(c.ltoc_rel.iter().map(|&v| Cell::F(v)));
                    table.push(row)?;
                }
            }
        }
        Ok(table)
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let per_alg = |which: usize| {
            json!({
                "algorithm": self.runs.first().map(|r| r[which].algorithm.clone()),
                "terminal_theta": self.runs.iter().map(|r| r[which].terminal.clone()).collect::<Vec<_>>(),
                "terminal_sup_error": self.terminal_errors(which),
                "late_relative_ltoc": self.runs.iter().map(|r| r[which].late_relative_ltoc.clone()).collect::<Vec<_>>(),
                "late_failures": self.runs.iter().map(|r| r[which].late_failures).collect::<Vec<_>>(),
                "mean_late_relative_ltoc": self.mean_late_ltoc(which),
            })
        };
        json!({
            "horizon": self.horizon,
            "ltoc_states": self.ltoc_states,
            "theta_star": self.oracle.theta_star.theta,
            "iv_q": per_alg(0),
            "q": per_alg(1),
        })
    }
}

/// IV-Q-Learning against Q-Learning on shared streams, one per replication.
pub fn run_lq_experiment(config: &ExperimentConfig) -> Result<LqExperiment> {
    let horizon = config.horizon()?;
    let reps = config.replications()?;
    let oracle = LqOracle::new(&config.lq)?;
    let opts = LqRunOptions { record_checkpoints: true, keep_trajectory: false, run_q: true };
    let runs = replicate(config.threads, reps, |rep| {
        run_lq_replication(&config.lq, &config.lq_run, &oracle, horizon, seed_stream(config.master_seed, rep as u64), opts)
            .map(|r| [r.iv, r.q.expect("q run requested")])
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(LqExperiment { horizon, oracle, ltoc_states: config.lq_run.ltoc_states.clone(), runs })
}

/// Estimates, intervals and policy tests from a single IV-Q-Learning run.
#[derive(Debug, Clone, Serialize)]
pub struct InferenceOutcome {
    pub theta_hat: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub sd: Vec<f64>,
    pub ci_lo: Vec<f64>,
    pub ci_hi: Vec<f64>,
    pub report: crate::inference::CovarianceReport,
    pub lag_window: usize,
    pub spot_tests: Vec<PolicyTestResult>,
    pub t2: Option<T2Result>,
}

fn visited_states(trajectory: &[Observation], burn_in_fraction: f64, max: usize) -> Vec<f64> {
    let skip = (trajectory.len() as f64 * burn_in_fraction).floor() as usize;
    let kept = &trajectory[skip.min(trajectory.len())..];
    if kept.is_empty() || max == 0 {
        return Vec::new();
    }
    let m = max.min(kept.len());
    (0..m).map(|i| kept[i * kept.len() / m].state).collect()
}

/// Plug-in inference on one IV-Q run; `boot_rng` drives the bootstrap when `with_t2` is set.
pub fn infer_lq_run(
    config: &ExperimentConfig,
    oracle: &LqOracle,
    run: &LqReplication,
    horizon: u64,
    with_t2: bool,
    boot_rng: &mut ChaCha8Rng,
) -> Result<InferenceOutcome> {
    let settings = lq_settings(&config.lq, &config.lq_run);
    let block = &config.infer;
    let alpha_t = config.lq_run.schedule.alpha(horizon);
    let (report, tavc) = plug_in_report(&run.trajectory, &run.iv_state, &settings, alpha_t, &block.settings)?;
    let theta = &run.iv_state.theta;
    let ci = confidence_interval(theta, &report, block.level)?;
    let star = oracle.theta_star.theta;
    let features = FeatureMap::lq_quadratic();
    let interval = config.lq_run.action_interval;
    let spot_tests = block
        .test_states
        .iter()
        .map(|&s| {
            let a0 = greedy_action(&features, &star, s, interval)?;
            spot_test(theta, &report, &features, s, a0, interval)
        })
        .collect::<Result<Vec<_>>>()?;
    let t2 = if with_t2 {
        let states = visited_states(&run.trajectory, block.settings.burn_in_fraction, block.max_visited_states);
        let pi0 = |s: f64| greedy_action(&features, &star, s, interval).unwrap_or(f64::NAN);
        Some(policy_test_t2(theta, &report, &features, &states, pi0, block.n_boot, block.test_level, interval, boot_rng)?)
    } else {
        None
    };
    Ok(InferenceOutcome {
        theta_hat: theta.clone(),
        theta_star: star.to_vec(),
        sd: (0..theta.len()).map(|i| report.sd(i)).collect(),
        ci_lo: ci.iter().map(|c| c.lo).collect(),
        ci_hi: ci.iter().map(|c| c.hi).collect(),
        lag_window: tavc.lag_window,
        report,
        spot_tests,
        t2,
    })
}

/// One IV-Q-Learning run followed by plug-in inference.
pub fn run_infer(config: &ExperimentConfig) -> Result<InferenceOutcome> {
    let horizon = config.horizon()?;
    let oracle = LqOracle::new(&config.lq)?;
    let opts = LqRunOptions { record_checkpoints: false, keep_trajectory: true, run_q: false };
    let run = run_lq_replication(&config.lq, &config.lq_run, &oracle, horizon, seed_stream(config.master_seed, 0), opts)?;
    let mut boot = seed_stream(config.master_seed ^ BOOTSTRAP_SALT, 0);
    infer_lq_run(config, &oracle, &run, horizon, true, &mut boot)
}

/// Rejection frequencies of the spot and T2 tests when the null is the true optimal policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeStudy {
    pub states: Vec<f64>,
    pub spot_reps: usize,
    pub spot_rejections: Vec<usize>,
    pub t2_reps: usize,
    pub t2_rejections: usize,
    pub failures: usize,
}

impl SizeStudy {
    pub fn spot_size(&self, i: usize) -> f64 {
        self.spot_rejections[i] as f64 / self.spot_reps as f64
    }

    pub fn t2_size(&self) -> f64 {
        self.t2_rejections as f64 / self.t2_reps as f64
    }
}

/// Runs `reps` independent IV-Q replications at `horizon`; the first `t2_reps` also run the bootstrap test.
pub fn policy_test_size_study(config: &ExperimentConfig, reps: usize, t2_reps: usize, horizon: u64) -> Result<SizeStudy> {
    let oracle = LqOracle::new(&config.lq)?;
    let opts = LqRunOptions { record_checkpoints: false, keep_trajectory: true, run_q: false };
    let level = config.infer.test_level;
    let results = replicate(config.threads, reps, |rep| -> Result<(Vec<bool>, Option<bool>)> {
        let run = run_lq_replication(&config.lq, &config.lq_run, &oracle, horizon, seed_stream(config.master_seed, rep as u64), opts)?;
        let mut boot = seed_stream(config.master_seed ^ BOOTSTRAP_SALT, rep as u64);
        let out = infer_lq_run(config, &oracle, &run, horizon, rep < t2_reps, &mut boot)?;
        Ok((out.spot_tests.iter().map(|r| r.p_value < level).collect(), out.t2.map(|t| t.reject)))
    })?;
    let k = config.infer.test_states.len();
    let mut study = SizeStudy {
        states: config.infer.test_states.clone(),
        spot_reps: 0,
        spot_rejections: vec![0; k],
        t2_reps: 0,
        t2_rejections: 0,
        failures: 0,
    };
    for r in results {
        match r {
            Ok((spots, t2)) => {
                study.spot_reps += 1;
                for (c, rej) in study.spot_rejections.iter_mut().zip(spots) {
                    *c += rej as usize;
                }
                if let Some(rej) = t2 {
                    study.t2_reps += 1;
                    study.t2_rejections += rej as usize;
                }
            }
            Err(_) => study.failures += 1,
        }
    }
    Ok(study)
}

/// One re-estimation path per (mode, replication).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RbiasPath {
    pub mode: crate::environments::RbiasMode,
    pub beta: f64,
    pub replication: usize,
    pub fixed_point: f64,
    pub slopes: Vec<f64>,
}

pub fn run_rbias(config: &ExperimentConfig) -> Result<Vec<RbiasPath>> {
    let block = &config.rbias;
    let n = config.horizon()? as usize;
    let reps = config.replications()?;
    let mut out = Vec::new();
    for (mi, &mode) in block.modes.iter().enumerate() {
        let beta = match mode {
            crate::environments::RbiasMode::ActionDependent => block.action_beta,
            crate::environments::RbiasMode::StateDependent => block.state_beta,
        };
        let fixed_point = rbias_fixed_point(block.theta_star, beta, mode)?;
        let paths = replicate(config.threads, reps, |rep| {
            let mut rng = cell_stream(config.master_seed, mi, rep);
            rbias_iterate(block.theta_star, beta, mode, block.initial_slope, block.rounds, n, &mut rng)
        })?;
        for (rep, slopes) in paths.into_iter().enumerate() {
            out.push(RbiasPath { mode, beta, replication: rep, fixed_point, slopes: slopes? });
        }
    }
    Ok(out)
}

fn rbias_csv(paths: &[RbiasPath]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["mode", "beta", "replication", "round", "slope", "fixed_point", "relative_error"]);
    for p in paths {
        let mode = serde_json::to_value(p.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        for (k, &s) in p.slopes.iter().enumerate() {
            t.push(vec![
                mode.clone().into(),
                p.beta.into(),
                p.replication.into(),
                (k + 1).into(),
                s.into(),
                p.fixed_point.into(),
                ((s - p.fixed_point) / p.fixed_point).into(),
            ])?;
        }
    }
    Ok(t)
}

fn oracle_csv(oracle: &LqOracle, states: &[f64]) -> Result<(CsvTable, serde_json::Value)> {
    let mut t = CsvTable::new(&["quantity", "value"]);
    let mut put = |name: String, v: f64| t.push(vec![name.into(), v.into()]);
    for (i, v) in oracle.theta_star.theta.iter().enumerate() {
        put(format!("theta_star_{i}"), *v)?;
    }
    for (i, v) in oracle.theta_star.chi.iter().enumerate() {
        put(format!("chi_{i}"), *v)?;
    }
    put("omega_0".into(), oracle.policy.omega0)?;
    put("omega_1".into(), oracle.policy.omega1)?;
    put("v_0".into(), oracle.value.v0)?;
    put("v_1".into(), oracle.value.v1)?;
    put("v_2".into(), oracle.value.v2)?;
    put("bias_mean".into(), oracle.bias_mean)?;
    let mut v_star = Vec::new();
    for &s in states {
        let v = oracle.value.at(s);
        v_star.push(v);
        put(format!("v_star_s{s}"), v)?;
    }
    let theta_res = theta_star_residuals(&oracle.cfg, oracle.bias_mean, &oracle.theta_star.theta).iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let bell = states.iter().map(|&s| bellman_residual(&oracle.cfg, &oracle.policy, &oracle.value, s).abs()).fold(0.0f64, f64::max);
    put("theta_star_residual_max".into(), theta_res)?;
    put("bellman_residual_max".into(), bell)?;
    let report = json!({
        "oracle": oracle,
        "states": states,
        "v_star": v_star,
        "theta_star_residual_max": theta_res,
        "bellman_residual_max": bell,
    });
    Ok((t, report))
}

fn infer_csv(out: &InferenceOutcome) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["component", "theta_hat", "theta_star", "sd", "ci_lo", "ci_hi"]);
    for i in 0..out.theta_hat.len() {
        t.push(vec![
            i.into(),
            out.theta_hat[i].into(),
            out.theta_star[i].into(),
            out.sd[i].into(),
            out.ci_lo[i].into(),
            out.ci_hi[i].into(),
        ])?;
    }
    Ok(t)
}

/// CSV table of a preset plus an optional JSON report written next to it.
#[derive(Debug, Clone)]
pub struct PresetOutput {
    pub preset: Preset,
    pub csv: CsvTable,
    pub report: Option<serde_json::Value>,
}

pub fn run_preset(config: &ExperimentConfig) -> Result<PresetOutput> {
    config.validate()?;
    let preset = config.preset()?;
    let (csv, report) = match preset {
        Preset::IvsgdTable => (table_rows_csv(&run_ivsgd_table(config)?)?, None),
        Preset::CoverageTable => (table_rows_csv(&run_coverage_table(config)?)?, None),
        Preset::Rbias => (rbias_csv(&run_rbias(config)?)?, None),
        Preset::LqRun => {
            let exp = run_lq_experiment(config)?;
            (exp.to_csv()?, Some(exp.summary_json()))
        }
        Preset::LqOracle => {
            let oracle = LqOracle::new(&config.lq)?;
            let mut states = vec![0.0];
            states.extend(config.lq_run.ltoc_states.iter().copied());
            let (t, r) = oracle_csv(&oracle, &states)?;
            (t, Some(r))
        }
        Preset::Infer => {
            let out = run_infer(config)?;
            let report = serde_json::to_value(&out).map_err(|e| Error::Io(e.to_string()))?;
            (infer_csv(&out)?, Some(report))
        }
    };
    Ok(PresetOutput { preset, csv, report })
}

/// `<preset>.csv` in the working directory unless configured.
pub fn output_path(config: &ExperimentConfig) -> Result<PathBuf> {
    Ok(config.output.clone().unwrap_or_else(|| PathBuf::from(format!("{}.csv", config.preset.map(|p| p.name()).unwrap_or("out")))))
}

/// Writes the CSV and, when present, the JSON report with the same stem.
pub fn write_preset_output(out: &PresetOutput, path: &Path) -> Result<Vec<PathBuf>> {
    emit_csv(&out.csv, path)?;
    let mut written = vec![path.to_path_buf()];
    if let Some(r) = &out.report {
        let jp = path.with_extension("json");
        emit_json(r, &jp)?;
        written.push(jp);
    }
    Ok(written)
}
