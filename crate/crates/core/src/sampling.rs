//! ODE sampling: integrate the learned velocity from prior noise to data,
//! optionally steering each step through a task likelihood.
//!
//! The velocity at `(x, t)` is the conditional endpoint velocity evaluated at
//! the head's posterior mean. Guided mode replaces that mean's continuous
//! block by a damped fixed-point refinement against the likelihood before the
//! velocity is formed, refreshed at every integrator evaluation; the grid and
//! the draw of the starting noise are unchanged, so zero refinement steps
//! reproduce the unguided trajectory bit for bit.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::DiffError;
use crate::guidance::PropertyLikelihood;
use crate::heads::{Head, NoiseSchedule};
use crate::path::{PathError, Prior, SpaceSpec, State, VelocitySpec};
use crate::training::stream_rng;

/// Chains use RNG streams `STREAM_CHAIN_BASE + chain_index`, leaving stream 0
/// reserved, so runs merge deterministically by chain index regardless of
/// scheduling order.
pub const STREAM_CHAIN_BASE: u64 = 1;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("integration produced a non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("{0}")]
    ModeMismatch(String),
    #[error(transparent)]
    Posterior(#[from] DiffError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Integration scheme on the uniform grid `t_k = k / steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Number of grid steps; one velocity evaluation per step for Euler,
    /// four for RK4.
    pub steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig { scheme: Scheme::Euler, steps: 100 }
    }
}

/// Damped fixed-point refinement settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Number of refinement iterations; zero disables guidance entirely.
    pub iterations: usize,
    /// Damping factor in (0, 1]; 1 recovers the undamped iteration.
    pub damping: f64,
    /// A step residual above this aborts refinement and falls back to the
    /// unrefined mean.
    pub divergence_cap: f64,
    /// Stationarity residual below which the iterate counts as converged.
    pub residual_tol: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            iterations: 5,
            damping: 0.5,
            divergence_cap: 1e6,
            residual_tol: 1e-6,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SampleError::ModeMismatch(String::from(
                "guidance damping must lie in (0, 1]",
            )));
        }
        if !(self.divergence_cap > 0.0) || !(self.residual_tol > 0.0) {
            return Err(SampleError::ModeMismatch(String::from(
                "guidance divergence cap and residual tolerance must be positive",
            )));
        }
        Ok(())
    }
}

/// Result of one refinement: the refined continuous mean plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub x: Vec<f64>,
    /// Step residuals `|x_{s+1} - x_s|` per iteration.
    pub residuals: Vec<f64>,
    /// Residual of the undamped fixed-point map at the final iterate,
    /// `|x - (mu + variance * grad log p(y|x))|`.
    pub stationarity: f64,
    pub converged: bool,
    pub diverged: bool,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    num_traits::Float::sqrt(s)
}

/// Damped fixed-point iteration for the guided posterior mean:
///
/// `x_{s+1} = (1 - damping) * x_s + damping * (mu + variance * grad log p(y | x_s))`
///
/// starting from `x_0 = mu`, the head's continuous posterior mean, with
/// `variance` the path noise at the current time. For a Gaussian posterior
/// and the analytic likelihoods shipped here, a fixed point of this map is
/// the mode-matching guided mean; damping trades per-step progress for a
/// wider stability region. If a step residual exceeds the divergence cap (or
/// a gradient stops being finite), the unrefined `mu` is returned with the
/// `diverged` flag set rather than poisoning the sampler.
pub fn fixed_point_refine(
    mu: &[f64],
    variance: f64,
    likelihood: &PropertyLikelihood,
    space: &SpaceSpec,
    cfg: &GuidanceConfig,
) -> Refinement {
    let diverged = |residuals: Vec<f64>| Refinement {
        x: mu.to_vec(),
        residuals,
        stationarity: f64::INFINITY,
        converged: false,
        diverged: true,
    };

    let mut x = mu.to_vec();
    let mut residuals = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let grad = match likelihood.grad_log_likelihood(space, &x) {
            Ok(g) => g,
            Err(_) => return diverged(residuals),
        };
        let next: Vec<f64> = x
            .iter()
            .zip(mu.iter().zip(&grad))
            .map(|(xi, (mi, gi))| (1.0 - cfg.damping) * xi + cfg.damping * (mi + variance * gi))
            .collect();
        let resid = l2(&next, &x);
        if !resid.is_finite() || resid > cfg.divergence_cap {
            return diverged(residuals);
        }
        residuals.push(resid);
        x = next;
    }

    // Convergence is judged by the undamped map's residual at the final
    // iterate, so a reported fixed point really is stationary.
    let grad = match likelihood.grad_log_likelihood(space, &x) {
        Ok(g) => g,
        Err(_) => return diverged(residuals),
    };
    let proposal: Vec<f64> = mu
        .iter()
        .zip(&grad)
        .map(|(mi, gi)| mi + variance * gi)
        .collect();
    let stationarity = l2(&x, &proposal);
    Refinement {
        converged: stationarity.is_finite() && stationarity <= cfg.residual_tol,
        x,
        residuals,
        stationarity,
        diverged: false,
    }
}

/// What the sampler conditions on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SampleMode {
    Unconditional,
    /// Feed the control value through the head's trained pathway.
    Conditioned(f64),
    /// Steer an unconditioned head with an analytic likelihood at sampling
    /// time; no retraining involved.
    Guided {
        likelihood: PropertyLikelihood,
        guidance: GuidanceConfig,
    },
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub integrator: IntegratorConfig,
    pub velocity: VelocitySpec,
    pub schedule: NoiseSchedule,
    pub prior: Prior,
    pub mode: SampleMode,
    pub keep_trajectories: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            integrator: IntegratorConfig::default(),
            velocity: VelocitySpec::default(),
            schedule: NoiseSchedule::default(),
            prior: Prior::default(),
            mode: SampleMode::Unconditional,
            keep_trajectories: false,
        }
    }
}

/// A full integration path: the state at every grid node, start included.
/// The last state sits at time `1 - t_clamp`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<State>,
    /// Number of velocity-field evaluations spent.
    pub nfe: u64,
}

/// One finished chain.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub state: State,
    /// Argmax decode of each categorical block of `state`.
    pub classes: Vec<usize>,
    pub trajectory: Option<Trajectory>,
    pub nfe: u64,
}

/// Aggregate refinement diagnostics across all velocity evaluations of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefineStats {
    pub calls: u64,
    pub converged: u64,
    pub diverged: u64,
}

#[derive(Debug)]
pub struct SampleRun {
    pub outputs: Vec<SampleOutput>,
    pub nfe: u64,
    pub refine: RefineStats,
}

/// Integrate `dx/dt = field(x, t)` from `x0` over the uniform grid
/// `t_k = k / steps`. States are kept exactly as the dynamics produce them —
/// categorical blocks are not projected onto the simplex, because training
/// interpolates raw source draws and a mid-flight projection would feed the
/// head states it never saw. The reported final time is `1 - t_clamp`, where
/// the velocity was last meaningful. A non-finite state aborts with the step
/// index that produced it.
pub fn integrate<F>(
    field: &mut F,
    x0: &State,
    integ: &IntegratorConfig,
    t_clamp: f64,
) -> Result<Trajectory, SampleError>
where
    F: FnMut(&[f64], f64) -> Result<Vec<f64>, SampleError>,
{
    assert!(integ.steps >= 1, "integration needs at least one step");
    let k_total = integ.steps;
    let h = 1.0 / k_total as f64;

    let mut x = x0.values.clone();
    let mut states = Vec::with_capacity(k_total + 1);
    states.push(State::new(x.clone(), 0.0));
    let mut nfe = 0u64;

    for k in 0..k_total {
        let t = k as f64 * h;
        match integ.scheme {
            Scheme::Euler => {
                let v = field(&x, t)?;
                nfe += 1;
                for (xi, vi) in x.iter_mut().zip(&v) {
                    *xi += h * vi;
                }
            }
            Scheme::Rk4 => {
                let shifted = |x: &[f64], k: &[f64], w: f64| -> Vec<f64> {
                    x.iter().zip(k).map(|(xi, ki)| xi + w * ki).collect()
                };
                let k1 = field(&x, t)?;
                let k2 = field(&shifted(&x, &k1, 0.5 * h), t + 0.5 * h)?;
                let k3 = field(&shifted(&x, &k2, 0.5 * h), t + 0.5 * h)?;
                let k4 = field(&shifted(&x, &k3, h), t + h)?;
                nfe += 4;
                for i in 0..x.len() {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SampleError::NonFiniteState { step: k });
        }
        let t_next = if k + 1 == k_total { 1.0 - t_clamp } else { (k + 1) as f64 * h };
        states.push(State::new(x.clone(), t_next));
    }

    Ok(Trajectory { states, nfe })
}

/// The learned velocity: conditional endpoint velocity at the head's
/// posterior mean, `(E[x1 | x] - x) / (1 - t)`.
pub fn velocity_field(
    head: &Head,
    velocity: &VelocitySpec,
    values: &[f64],
    t: f64,
    label: Option<f64>,
) -> Result<Vec<f64>, SampleError> {
    let state = State::new(values.to_vec(), t);
    let mean = head.posterior_mean(&state, label)?;
    Ok(velocity.endpoint_to_velocity(&state, t, &mean)?)
}

/// Run `n` independent chains. Chain `i` draws its prior point from RNG
/// stream `STREAM_CHAIN_BASE + i` of `seed`, so any subset of chains is
/// reproducible in isolation.
///
/// Guided mode requires a head without a control pathway: the posterior it
/// refines must be the unconditioned one. Conditioned mode requires a trained
/// control pathway. A conditioned head may still sample unconditionally — the
/// control input is masked, which the training dropout made meaningful.
pub fn sample(
    head: &Head,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<SampleRun, SampleError> {
    sample_chains(head, cfg, 0, n, seed)
}

/// Run chains `first..first + count` of the chain family keyed by `seed`.
/// Because each chain's randomness depends only on its global index, any
/// partition of the index range — across calls, threads, or processes —
/// reassembles into exactly the outputs of one sequential run.
pub fn sample_chains(
    head: &Head,
    cfg: &SamplerConfig,
    first: usize,
    count: usize,
    seed: u64,
) -> Result<SampleRun, SampleError> {
    match &cfg.mode {
        SampleMode::Conditioned(_) if !head.conditioned() => {
            return Err(SampleError::ModeMismatch(String::from(
                "conditioned sampling needs a head trained with a control pathway",
            )));
        }
        SampleMode::Guided { guidance, .. } => {
            if head.conditioned() {
                return Err(SampleError::ModeMismatch(String::from(
                    "guided sampling steers an unconditioned head; this one has a control pathway",
                )));
            }
            guidance.validate()?;
        }
        _ => {}
    }

    let space = head.space();
    let dc = space.n_continuous;
    let mut outputs = Vec::with_capacity(count);
    let mut run_nfe = 0u64;
    let mut refine = RefineStats::default();

    for chain in first..first + count {
        let mut rng = stream_rng(seed, STREAM_CHAIN_BASE + chain as u64);
        let x0 = cfg.prior.sample(space, &mut rng);

        let mut field = |values: &[f64], t: f64| -> Result<Vec<f64>, SampleError> {
            match &cfg.mode {
                SampleMode::Unconditional => {
                    velocity_field(head, &cfg.velocity, values, t, None)
                }
                SampleMode::Conditioned(y) => {
                    velocity_field(head, &cfg.velocity, values, t, Some(*y))
                }
                SampleMode::Guided { likelihood, guidance } => {
                    let state = State::new(values.to_vec(), t);
                    let mut mean = head.posterior_mean(&state, None)?;
                    // Zero iterations skip refinement entirely, leaving the
                    // unguided velocity untouched down to the last bit.
                    if guidance.iterations > 0 && dc > 0 {
                        let out = fixed_point_refine(
                            &mean[..dc],
                            cfg.schedule.variance(t),
                            likelihood,
                            space,
                            guidance,
                        );
                        refine.calls += 1;
                        refine.converged += out.converged as u64;
                        refine.diverged += out.diverged as u64;
                        mean[..dc].copy_from_slice(&out.x);
                    }
                    Ok(cfg.velocity.endpoint_to_velocity(&state, t, &mean)?)
                }
            }
        };

        let trajectory = integrate(&mut field, &x0, &cfg.integrator, cfg.velocity.t_clamp)?;
        let state = trajectory.states.last().expect("grid is non-empty").clone();
        let classes = state.decode_categorical(space);
        let nfe = trajectory.nfe;
        run_nfe += nfe;
        outputs.push(SampleOutput {
            state,
            classes,
            trajectory: cfg.keep_trajectories.then_some(trajectory),
            nfe,
        });
    }

    Ok(SampleRun { outputs, nfe: run_nfe, refine })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    use crate::heads::{MlpConfig, MlpHead, TimeEmbedding};
    use crate::metrics::Property;
    use crate::path::{CatPrior, ContPrior};

    fn euler_cfg(steps: usize) -> IntegratorConfig {
        IntegratorConfig { scheme: Scheme::Euler, steps }
    }

    fn rk4_cfg(steps: usize) -> IntegratorConfig {
        IntegratorConfig { scheme: Scheme::Rk4, steps }
    }

    fn small_mlp(space: SpaceSpec, conditioned: bool) -> Head {
        let cfg = MlpConfig {
            hidden: vec![16, 16],
            time: TimeEmbedding::default(),
            label: conditioned.then(Default::default),
        };
        let mut rng = stream_rng(99, 0);
        Head::Mlp(MlpHead::new(space, cfg, &mut rng))
    }

    use crate::symmetry::perturb_head;

    #[test]
    fn constant_field_telescopes_to_the_exact_displacement() {
        let space = SpaceSpec::continuous(2);
        let c = [0.3, -1.2];
        for cfg in [euler_cfg(8), rk4_cfg(8)] {
            let mut field = |_: &[f64], _: f64| Ok(c.to_vec());
            let x0 = State::new(vec![0.5, 2.0], 0.0);
            let traj = integrate(&mut field, &x0, &cfg, 1e-5).unwrap();
            let last = traj.states.last().unwrap();
            for i in 0..2 {
                assert!((last.values[i] - (x0.values[i] + c[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn endpoint_pinning_field_lands_on_the_target() {
        // field = (x1* - x) / (1 - t) drives any start to x1* exactly at
        // t = 1; the Euler error telescopes away on the uniform grid.
        let space = SpaceSpec::continuous(3);
        let x1 = [1.0, -2.0, 0.25];
        let mut field = |x: &[f64], t: f64| {
            Ok(x.iter().zip(&x1).map(|(xi, ti)| (ti - xi) / (1.0 - t)).collect())
        };
        let x0 = State::new(vec![-0.7, 3.0, 10.0], 0.0);
        let traj = integrate(&mut field, &x0, &euler_cfg(17), 1e-5).unwrap();
        let last = traj.states.last().unwrap();
        for i in 0..3 {
            assert!((last.values[i] - x1[i]).abs() < 1e-12, "{:?}", last.values);
        }
    }

    #[test]
    fn grid_times_are_uniform_and_end_at_the_clamp() {
        let space = SpaceSpec::continuous(1);
        let mut field = |_: &[f64], _: f64| Ok(vec![0.0]);
        let x0 = State::new(vec![0.0], 0.0);
        let traj = integrate(&mut field, &x0, &euler_cfg(4), 0.01).unwrap();
        assert_eq!(traj.states.len(), 5);
        let times: Vec<f64> = traj.states.iter().map(|s| s.time).collect();
        assert_eq!(&times[..4], &[0.0, 0.25, 0.5, 0.75]);
        assert_eq!(times[4], 0.99);
    }

    #[test]
    fn rk4_beats_euler_on_exponential_growth() {
        let space = SpaceSpec::continuous(1);
        let x0 = State::new(vec![1.0], 0.0);
        let run = |cfg: IntegratorConfig| {
            let mut field = |x: &[f64], _: f64| Ok(vec![x[0]]);
            integrate(&mut field, &x0, &cfg, 1e-5)
                .unwrap()
                .states
                .last()
                .unwrap()
                .values[0]
        };
        let e = core::f64::consts::E;
        let euler_err = (run(euler_cfg(10)) - e).abs();
        let rk4_err = (run(rk4_cfg(10)) - e).abs();
        assert!((euler_err - (e - 1.1f64.powi(10))).abs() < 1e-10);
        assert!(rk4_err < 1e-5, "rk4 error {rk4_err}");
        assert!(rk4_err < euler_err / 1000.0);
    }

    #[test]
    fn evaluation_counts_match_the_scheme() {
        let space = SpaceSpec::continuous(1);
        let x0 = State::new(vec![0.0], 0.0);
        let mut field = |_: &[f64], _: f64| Ok(vec![1.0]);
        assert_eq!(integrate(&mut field, &x0, &euler_cfg(7), 1e-5).unwrap().nfe, 7);
        assert_eq!(integrate(&mut field, &x0, &rk4_cfg(7), 1e-5).unwrap().nfe, 28);
    }

    #[test]
    fn non_finite_state_reports_the_offending_step() {
        let space = SpaceSpec::continuous(1);
        let x0 = State::new(vec![0.0], 0.0);
        let mut calls = 0usize;
        let mut field = |_: &[f64], _: f64| {
            calls += 1;
            Ok(vec![if calls == 4 { f64::NAN } else { 1.0 }])
        };
        let err = integrate(&mut field, &x0, &euler_cfg(10), 1e-5).unwrap_err();
        match err {
            SampleError::NonFiniteState { step } => assert_eq!(step, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_iterations_return_the_mean_bit_for_bit() {
        let space = SpaceSpec::continuous(2);
        let lik = PropertyLikelihood::new(Property::CoordinateSum, 0.5, 10.0);
        let mu = [0.125, -3.0];
        let cfg = GuidanceConfig { iterations: 0, ..GuidanceConfig::default() };
        let out = fixed_point_refine(&mu, 1.0, &lik, &space, &cfg);
        assert_eq!(out.x[0].to_bits(), mu[0].to_bits());
        assert_eq!(out.x[1].to_bits(), mu[1].to_bits());
        assert!(out.residuals.is_empty());
        assert!(!out.diverged);
        // The gradient here is far from zero, so no convergence is claimed.
        assert!(!out.converged);
    }

    #[test]
    fn linear_gaussian_fixed_point_matches_the_closed_form() {
        // One dimension, f(x) = x, observation noise 1, target 1, prior mean
        // 0, path variance 1. The guided mean solves
        //   x = mu + var * (y - x) / sigma_y^2  =>  x = (0 + 1) / (1 + 1) = 0.5.
        let space = SpaceSpec::continuous(1);
        let lik = PropertyLikelihood::new(Property::CoordinateSum, 1.0, 1.0);
        let cfg = GuidanceConfig { iterations: 50, damping: 0.5, ..GuidanceConfig::default() };
        let out = fixed_point_refine(&[0.0], 1.0, &lik, &space, &cfg);
        assert!(!out.diverged);
        assert!(out.converged, "stationarity {}", out.stationarity);
        assert!((out.x[0] - 0.5).abs() < 1e-9, "{}", out.x[0]);
        assert!(out.stationarity <= 1e-6);
    }

    #[test]
    fn damping_rescues_a_stiff_likelihood() {
        // Path variance 4 with unit observation noise puts the undamped
        // iteration at contraction factor |1 - (1 + 4)| = 4: it diverges.
        // Damping 0.2 makes the factor |1 - 0.2 * 5| = 0 and the iteration
        // jumps straight to the closed form 4 * y / (1 + 4) = 0.8.
        let space = SpaceSpec::continuous(1);
        let lik = PropertyLikelihood::new(Property::CoordinateSum, 1.0, 1.0);

        let undamped = GuidanceConfig { iterations: 30, damping: 1.0, ..GuidanceConfig::default() };
        let out = fixed_point_refine(&[0.0], 4.0, &lik, &space, &undamped);
        assert!(out.diverged);
        assert_eq!(out.x, vec![0.0], "divergence falls back to the unrefined mean");
        assert!(!out.converged);

        let damped = GuidanceConfig { iterations: 30, damping: 0.2, ..GuidanceConfig::default() };
        let out = fixed_point_refine(&[0.0], 4.0, &lik, &space, &damped);
        assert!(!out.diverged);
        assert!(out.converged);
        assert!((out.x[0] - 0.8).abs() < 1e-9, "{}", out.x[0]);
        assert!(out.stationarity <= 1e-6);
    }

    #[test]
    fn zero_initialized_head_keeps_continuous_chains_at_their_start() {
        // At zero init the posterior mean equals the current state, so the
        // velocity vanishes identically and every chain stays put.
        let space = SpaceSpec::continuous(2);
        let head = small_mlp(space, false);
        let cfg = SamplerConfig {
            integrator: euler_cfg(25),
            keep_trajectories: true,
            ..SamplerConfig::default()
        };
        let run = sample(&head, &cfg, 3, 7).unwrap();
        for out in &run.outputs {
            let traj = out.trajectory.as_ref().unwrap();
            let first = &traj.states[0].values;
            for v in out.state.values.iter().zip(first) {
                assert_eq!(v.0.to_bits(), v.1.to_bits());
            }
        }
    }

    #[test]
    fn zero_initialized_head_flows_categories_to_the_center() {
        // Uniform posterior probabilities pin every categorical block's
        // endpoint at the simplex center; the pinning field telescopes there.
        let space = SpaceSpec::categorical(&[4, 3]).unwrap();
        let head = small_mlp(space, false);
        let cfg = SamplerConfig { integrator: euler_cfg(40), ..SamplerConfig::default() };
        let run = sample(&head, &cfg, 2, 11).unwrap();
        for out in &run.outputs {
            for (i, v) in out.state.values.iter().enumerate() {
                let k = if i < 4 { 4.0 } else { 3.0 };
                assert!((v - 1.0 / k).abs() < 1e-9, "coordinate {i} = {v}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic_and_chains_differ() {
        let space = SpaceSpec::continuous(2);
        let mut head = small_mlp(space, false);
        perturb_head(&mut head, 0.05);
        let cfg = SamplerConfig { integrator: euler_cfg(12), ..SamplerConfig::default() };
        let a = sample(&head, &cfg, 3, 42).unwrap();
        let b = sample(&head, &cfg, 3, 42).unwrap();
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            for (u, v) in x.state.values.iter().zip(&y.state.values) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_ne!(a.outputs[0].state.values, a.outputs[1].state.values);

        // A single chain resampled in isolation reproduces its slot.
        let solo = sample(&head, &cfg, 1, 42).unwrap();
        assert_eq!(solo.outputs[0].state.values, a.outputs[0].state.values);
    }

    #[test]
    fn chain_ranges_partition_into_the_sequential_run() {
        let space = SpaceSpec::continuous(2);
        let mut head = small_mlp(space, false);
        perturb_head(&mut head, 0.05);
        let cfg = SamplerConfig { integrator: euler_cfg(9), ..SamplerConfig::default() };
        let whole = sample(&head, &cfg, 5, 7).unwrap();
        let front = sample_chains(&head, &cfg, 0, 2, 7).unwrap();
        let back = sample_chains(&head, &cfg, 2, 3, 7).unwrap();
        let merged: Vec<_> = front.outputs.iter().chain(&back.outputs).collect();
        assert_eq!(merged.len(), whole.outputs.len());
        for (a, b) in whole.outputs.iter().zip(merged) {
            for (u, v) in a.state.values.iter().zip(&b.state.values) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_eq!(front.nfe + back.nfe, whole.nfe);
    }

    #[test]
    fn guided_with_zero_iterations_is_bitwise_unguided() {
        let space = SpaceSpec::continuous(2);
        let mut head = small_mlp(space, false);
        perturb_head(&mut head, 0.05);
        let base = SamplerConfig { integrator: euler_cfg(20), ..SamplerConfig::default() };
        let plain = sample(&head, &base, 3, 5).unwrap();

        let guided_cfg = SamplerConfig {
            mode: SampleMode::Guided {
                likelihood: PropertyLikelihood::new(Property::CoordinateSum, 0.3, 50.0),
                guidance: GuidanceConfig { iterations: 0, ..GuidanceConfig::default() },
            },
            ..base
        };
        let guided = sample(&head, &guided_cfg, 3, 5).unwrap();
        for (x, y) in plain.outputs.iter().zip(&guided.outputs) {
            for (u, v) in x.state.values.iter().zip(&y.state.values) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
        assert_eq!(guided.refine.calls, 0);
    }

    #[test]
    fn guidance_pulls_samples_toward_the_likelihood_target() {
        // With a zero-initialized head the unguided flow stays at the prior
        // draw; guidance toward a large coordinate sum must strictly raise it.
        let space = SpaceSpec::continuous(2);
        let head = small_mlp(space.clone(), false);
        let base = SamplerConfig { integrator: euler_cfg(30), ..SamplerConfig::default() };
        let plain = sample(&head, &base, 4, 13).unwrap();

        // sigma_y = 1 keeps variance * |grad f|^2 / sigma_y^2 <= 2 for the
        // whole path, inside the damped iteration's stability region.
        let guided_cfg = SamplerConfig {
            mode: SampleMode::Guided {
                likelihood: PropertyLikelihood::new(Property::CoordinateSum, 1.0, 6.0),
                guidance: GuidanceConfig::default(),
            },
            ..base
        };
        let guided = sample(&head, &guided_cfg, 4, 13).unwrap();
        assert!(guided.refine.calls > 0);
        assert_eq!(guided.refine.diverged, 0);
        for (p, g) in plain.outputs.iter().zip(&guided.outputs) {
            let sum_p = Property::CoordinateSum.eval(&space, &p.state.values);
            let sum_g = Property::CoordinateSum.eval(&space, &g.state.values);
            assert!(sum_g > sum_p + 0.5, "guided {sum_g} vs plain {sum_p}");
        }
    }

    #[test]
    fn mode_and_head_mismatches_are_rejected() {
        let space = SpaceSpec::continuous(2);
        let unconditioned = small_mlp(space.clone(), false);
        let conditioned = small_mlp(space, true);
        let base = SamplerConfig { integrator: euler_cfg(4), ..SamplerConfig::default() };

        let cfg = SamplerConfig { mode: SampleMode::Conditioned(1.0), ..base.clone() };
        assert!(matches!(
            sample(&unconditioned, &cfg, 1, 0),
            Err(SampleError::ModeMismatch(_))
        ));

        let cfg = SamplerConfig {
            mode: SampleMode::Guided {
                likelihood: PropertyLikelihood::new(Property::CoordinateSum, 1.0, 0.0),
                guidance: GuidanceConfig::default(),
            },
            ..base.clone()
        };
        assert!(matches!(
            sample(&conditioned, &cfg, 1, 0),
            Err(SampleError::ModeMismatch(_))
        ));

        // A conditioned head still samples unconditionally via masking.
        let run = sample(&conditioned, &base, 1, 0).unwrap();
        assert_eq!(run.outputs.len(), 1);

        // Conditioned sampling on the conditioned head is well-formed too.
        let cfg = SamplerConfig { mode: SampleMode::Conditioned(0.5), ..base };
        assert!(sample(&conditioned, &cfg, 1, 0).is_ok());
    }

    #[test]
    fn mixed_space_outputs_decode_and_respect_zero_com_priors() {
        let space = SpaceSpec::point_cloud(3, 2, 2).unwrap();
        let head = small_mlp(space, false);
        let cfg = SamplerConfig {
            integrator: euler_cfg(6),
            prior: Prior { continuous: ContPrior::ZeroCom, categorical: CatPrior::VertexUniform },
            keep_trajectories: true,
            ..SamplerConfig::default()
        };
        let run = sample(&head, &cfg, 2, 3).unwrap();
        for out in &run.outputs {
            assert_eq!(out.classes.len(), 3);
            assert!(out.classes.iter().all(|&c| c < 2));
            // Zero-init head keeps the continuous block at the x0 draw, which
            // the zero-center prior centered.
            let (mut cx, mut cy) = (0.0, 0.0);
            for p in 0..3 {
                cx += out.state.values[2 * p];
                cy += out.state.values[2 * p + 1];
            }
            assert!(cx.abs() < 1e-12 && cy.abs() < 1e-12);
            let fmt = format!("{:?}", out.trajectory.as_ref().unwrap().states.len());
            assert_eq!(fmt, "7");
        }
    }
}
