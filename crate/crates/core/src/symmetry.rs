//! Group actions and the numeric equivariance audit.
//!
//! The chain of custody for an invariant marginal path has three links: an
//! invariant prior, a bi-equivariant conditional velocity, and a posterior
//! whose expectation commutes with the group. Each link gets its own audit
//! here, plus an end-to-end check that the integrated flow map commutes with
//! the action — the pointwise statement that implies pushforward invariance.
//! Translation symmetry is handled on the zero-center-of-mass quotient (a
//! translation-invariant density on the full space does not exist), so the
//! orbit audits draw rotations and permutations while translations are
//! covered by the centering contract and the velocity's translation
//! invariance.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::diff::DiffError;
use crate::heads::Head;
use crate::metrics::{w2_squared_1d, Property};
use crate::path::{Prior, SpaceSpec, State, VelocitySpec};
use crate::sampling::{integrate, velocity_field, IntegratorConfig, SampleError};
use crate::training::stream_rng;

#[derive(Debug, Error)]
pub enum SymmetryError {
    #[error("group element incompatible with the space: {0}")]
    Incompatible(String),
    #[error("matrix is not special orthogonal (deviation {0:.3e})")]
    NotARotation(f64),
    #[error("permutation is not a bijection")]
    NotAPermutation,
}

/// An element of the symmetry group: point relabelings, proper rotations,
/// translations, and their composites.
///
/// Rotations and translations act on the continuous block in consecutive
/// chunks of the element's own dimension (per point for clouds);
/// permutations act jointly on point coordinate chunks and their categorical
/// blocks. `Composite(parts)` applies `parts` right to left, i.e. it is the
/// product `parts[0] * parts[1] * ...`; an empty composite is the identity.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupElement {
    /// `perm[i]` is the old index whose point lands in slot `i`.
    Permutation(Vec<usize>),
    /// Row-major special orthogonal matrix.
    Rotation(Vec<Vec<f64>>),
    Translation(Vec<f64>),
    Composite(Vec<GroupElement>),
}

impl GroupElement {
    pub fn identity() -> Self {
        GroupElement::Composite(Vec::new())
    }

    /// Structural and numeric validity against a space: orthogonality within
    /// 1e-12, determinant 1 within 1e-12, permutations bijective and sized to
    /// the cloud, chunk dimensions dividing the continuous block.
    pub fn validate(&self, space: &SpaceSpec) -> Result<(), SymmetryError> {
        match self {
            GroupElement::Permutation(p) => {
                let n = match space.point_cloud {
                    Some(pc) => pc.n,
                    None => {
                        return Err(SymmetryError::Incompatible(String::from(
                            "permutations act on point clouds",
                        )))
                    }
                };
                if p.len() != n {
                    return Err(SymmetryError::Incompatible(String::from(
                        "permutation length differs from the point count",
                    )));
                }
                let mut seen = vec![false; n];
                for &i in p {
                    if i >= n || seen[i] {
                        return Err(SymmetryError::NotAPermutation);
                    }
                    seen[i] = true;
                }
                if space.n_blocks() != 0 && space.n_blocks() != n {
                    return Err(SymmetryError::Incompatible(String::from(
                        "need one categorical block per point to permute",
                    )));
                }
                Ok(())
            }
            GroupElement::Rotation(m) => {
                let d = m.len();
                if d == 0 || m.iter().any(|row| row.len() != d) {
                    return Err(SymmetryError::Incompatible(String::from(
                        "rotation matrix must be square",
                    )));
                }
                check_chunk(space, d)?;
                let mut dev: f64 = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        let dot: f64 = (0..d).map(|k| m[k][i] * m[k][j]).sum();
                        let target = if i == j { 1.0 } else { 0.0 };
                        dev = dev.max((dot - target).abs());
                    }
                }
                let det_dev = (determinant(m) - 1.0).abs();
                if dev > 1e-12 || det_dev > 1e-12 {
                    return Err(SymmetryError::NotARotation(dev.max(det_dev)));
                }
                Ok(())
            }
            GroupElement::Translation(c) => check_chunk(space, c.len()),
            GroupElement::Composite(parts) => {
                parts.iter().try_for_each(|p| p.validate(space))
            }
        }
    }

    /// Group inverse; `act(inverse, act(self, x)) = x` up to rounding in the
    /// rotation entries.
    pub fn inverse(&self) -> GroupElement {
        match self {
            GroupElement::Permutation(p) => {
                let mut inv = vec![0usize; p.len()];
                for (new, &old) in p.iter().enumerate() {
                    inv[old] = new;
                }
                GroupElement::Permutation(inv)
            }
            GroupElement::Rotation(m) => {
                let d = m.len();
                GroupElement::Rotation(
                    (0..d).map(|i| (0..d).map(|j| m[j][i]).collect()).collect(),
                )
            }
            GroupElement::Translation(c) => {
                GroupElement::Translation(c.iter().map(|v| -v).collect())
            }
            GroupElement::Composite(parts) => {
                GroupElement::Composite(parts.iter().rev().map(|p| p.inverse()).collect())
            }
        }
    }

    /// The same element with translation offsets dropped. Velocities are
    /// differences of points, so they transform under this linear part only.
    pub fn linear_part(&self) -> GroupElement {
        match self {
            GroupElement::Translation(_) => GroupElement::identity(),
            GroupElement::Composite(parts) => {
                GroupElement::Composite(parts.iter().map(|p| p.linear_part()).collect())
            }
            other => other.clone(),
        }
    }
}

fn check_chunk(space: &SpaceSpec, d: usize) -> Result<(), SymmetryError> {
    let dc = space.n_continuous;
    if d == 0 || dc == 0 || dc % d != 0 {
        return Err(SymmetryError::Incompatible(String::from(
            "chunk dimension must divide the continuous block",
        )));
    }
    if let Some(pc) = space.point_cloud {
        if pc.dim != d {
            return Err(SymmetryError::Incompatible(String::from(
                "chunk dimension differs from the cloud's point dimension",
            )));
        }
    }
    Ok(())
}

fn determinant(m: &[Vec<f64>]) -> f64 {
    let d = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..d {
            let f = a[row][col] / a[col][col];
            for k in col..d {
                let base = a[col][k];
                a[row][k] -= f * base;
            }
        }
    }
    det
}

/// Apply a group element to an embedded vector (state values or a posterior
/// mean — both live in the same coordinates).
pub fn act_values(
    g: &GroupElement,
    values: &[f64],
    space: &SpaceSpec,
) -> Result<Vec<f64>, SymmetryError> {
    g.validate(space)?;
    let mut out = values.to_vec();
    apply(g, &mut out, space);
    Ok(out)
}

/// Apply a group element to a state, preserving its time.
pub fn act(g: &GroupElement, x: &State, space: &SpaceSpec) -> Result<State, SymmetryError> {
    Ok(State::new(act_values(g, &x.values, space)?, x.time))
}

fn apply(g: &GroupElement, values: &mut [f64], space: &SpaceSpec) {
    let dc = space.n_continuous;
    match g {
        GroupElement::Rotation(m) => {
            let d = m.len();
            let mut buf = vec![0.0; d];
            for start in (0..dc).step_by(d) {
                let chunk = &mut values[start..start + d];
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = (0..d).map(|j| m[i][j] * chunk[j]).sum();
                }
                chunk.copy_from_slice(&buf);
            }
        }
        GroupElement::Translation(c) => {
            let d = c.len();
            for start in (0..dc).step_by(d) {
                for (v, off) in values[start..start + d].iter_mut().zip(c) {
                    *v += off;
                }
            }
        }
        GroupElement::Permutation(p) => {
            let pc = space.point_cloud.expect("validated");
            let d = pc.dim;
            let old = values.to_vec();
            for (new, &src) in p.iter().enumerate() {
                values[new * d..(new + 1) * d].copy_from_slice(&old[src * d..(src + 1) * d]);
            }
            if space.n_blocks() == pc.n {
                for (new, &src) in p.iter().enumerate() {
                    let to = space.block_range(new);
                    let from = space.block_range(src);
                    values[to].copy_from_slice(&old[from]);
                }
            }
        }
        GroupElement::Composite(parts) => {
            for part in parts.iter().rev() {
                apply(part, values, space);
            }
        }
    }
}

/// Haar-ish random special orthogonal matrix: Gram-Schmidt on a Gaussian
/// matrix, with the last column flipped if the determinant comes out -1.
pub fn random_rotation<R: Rng + ?Sized>(d: usize, rng: &mut R) -> GroupElement {
    assert!(d >= 1);
    loop {
        let mut cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let mut ok = true;
        for j in 0..d {
            // Projecting twice ("twice is enough") scrubs the rounding left
            // by the first pass, keeping worst-case orthogonality error a
            // couple of ulps instead of drifting toward the 1e-12 contract.
            for _pass in 0..2 {
                for i in 0..j {
                    let dot: f64 =
                        cols[j].iter().zip(&cols[i]).map(|(a, b)| a * b).sum();
                    let prev = cols[i].clone();
                    for (v, p) in cols[j].iter_mut().zip(&prev) {
                        *v -= dot * p;
                    }
                }
            }
            let norm: f64 = num_traits::Float::sqrt(
                cols[j].iter().map(|v| v * v).sum::<f64>(),
            );
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
        if !ok {
            continue;
        }
        let mut m: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| cols[j][i]).collect())
            .collect();
        if determinant(&m) < 0.0 {
            for row in m.iter_mut() {
                row[d - 1] = -row[d - 1];
            }
        }
        return GroupElement::Rotation(m);
    }
}

/// Uniform random permutation by Fisher–Yates.
pub fn random_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> GroupElement {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    GroupElement::Permutation(p)
}

/// Which orbit the audits explore.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSampler {
    /// Identity only; any residual it reports is pure determinism slack.
    Identity,
    /// Rotations composed with point relabelings (the zero-CoM quotient's
    /// symmetries).
    RotatePermute,
    /// Rotations, relabelings, and translations.
    RotatePermuteTranslate,
}

impl GroupSampler {
    pub fn sample<R: Rng + ?Sized>(&self, space: &SpaceSpec, rng: &mut R) -> GroupElement {
        if matches!(self, GroupSampler::Identity) {
            return GroupElement::identity();
        }
        let d = space.point_cloud.map_or(space.n_continuous, |pc| pc.dim);
        let mut parts = vec![random_rotation(d, rng)];
        if let Some(pc) = space.point_cloud {
            parts.push(random_permutation(pc.n, rng));
        }
        if matches!(self, GroupSampler::RotatePermuteTranslate) {
            let c: Vec<f64> = (0..d)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(rng);
                    0.5 * v
                })
                .collect();
            parts.push(GroupElement::Translation(c));
        }
        GroupElement::Composite(parts)
    }
}

/// Deterministically nudge every parameter of a head by a name-salted
/// sinusoid. Zero-initialized heads are exactly equivariant for trivial
/// reasons (their posterior ignores the weights); audits and negative
/// controls need a frozen head with non-trivial weights, and this provides
/// one without training.
pub fn perturb_head(head: &mut Head, amp: f64) {
    for name in head.params().names() {
        let salt: f64 = name.bytes().map(|b| b as f64).sum();
        let t = head.params_mut().get_mut(&name);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v += amp * num_traits::Float::sin(salt + 0.7 * i as f64);
        }
    }
}

/// Random state with Gaussian continuous coordinates and categorical blocks
/// on the open simplex; used to probe identities off the data manifold.
pub fn random_state<R: Rng + ?Sized>(space: &SpaceSpec, t: f64, rng: &mut R) -> State {
    let mut values = Vec::with_capacity(space.total_dim());
    for _ in 0..space.n_continuous {
        values.push(StandardNormal.sample(rng));
    }
    for &k in &space.categorical {
        let mut block: Vec<f64> = (0..k)
            .map(|_| -num_traits::Float::ln(1.0 - rng.random::<f64>()))
            .collect();
        let sum: f64 = block.iter().sum();
        for v in block.iter_mut() {
            *v /= sum;
        }
        values.extend(block);
    }
    State::new(values, t)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Max residual of `u(g·x | g·x1) = g·u(x | x1)` over random probes, plus the
/// translation identity `u(x + c | x1 + c) = u(x | x1)`. Takes the velocity
/// as a closure so broken velocities can be audited as negative controls.
pub fn audit_bi_equivariance_with<F>(
    space: &SpaceSpec,
    mut u: F,
    trials: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&State, &State, f64) -> Vec<f64>,
{
    assert!(trials >= 1);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = stream_rng(seed, 1 + trial as u64);
        let t = rng.random_range(0.0..0.9);
        let x = random_state(space, t, &mut rng);
        let x1 = random_state(space, 1.0, &mut rng);
        let g = GroupSampler::RotatePermute.sample(space, &mut rng);

        let v = u(&x, &x1, t);
        let gx = act(&g, &x, space).expect("compatible by construction");
        let gx1 = act(&g, &x1, space).expect("compatible by construction");
        let v_moved = u(&gx, &gx1, t);
        let g_v = act_values(&g, &v, space).expect("compatible by construction");
        worst = worst.max(max_abs_diff(&v_moved, &g_v));

        // Translations cancel inside a difference of points.
        let d = space.point_cloud.map_or(space.n_continuous, |pc| pc.dim);
        let c = GroupElement::Translation(
            (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(),
        );
        let xc = act(&c, &x, space).expect("compatible by construction");
        let x1c = act(&c, &x1, space).expect("compatible by construction");
        worst = worst.max(max_abs_diff(&u(&xc, &x1c, t), &v));
    }
    worst
}

/// The shipped conditional velocity, audited through the closure form.
pub fn audit_bi_equivariance(
    space: &SpaceSpec,
    velocity: &VelocitySpec,
    trials: usize,
    seed: u64,
) -> f64 {
    audit_bi_equivariance_with(
        space,
        |x, x1, t| velocity.conditional_velocity(x, x1, t).expect("matching dims"),
        trials,
        seed,
    )
}

/// Statistics for the source-distribution invariance audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorInvarianceReport {
    /// Worst per-sample centroid norm; `Some` only when the prior pins the
    /// centroid (zero-CoM on a point-cloud space), where it verifies the
    /// translation-quotient contract.
    pub com_residual: Option<f64>,
    /// Frobenius distance between the empirical second moments of plain
    /// draws and of independently transformed draws, over the continuous
    /// block. Shrinks as `O(1/sqrt(n))` when the prior is invariant.
    pub moment_gap: f64,
}

/// Monte Carlo check that the source distribution is unchanged by the group:
/// draws `x` and compares second moments against those of `g·x` with a fresh
/// group element per draw. Rotation-invariant sources leave the gap at
/// sampling noise; the centroid residual covers the translation quotient.
pub fn audit_prior_invariance(
    prior: &Prior,
    space: &SpaceSpec,
    sampler: &GroupSampler,
    n: usize,
    seed: u64,
) -> PriorInvarianceReport {
    assert!(n >= 2);
    let dc = space.n_continuous;
    let mut rng = stream_rng(seed, 1);

    let pins_com = space.point_cloud.is_some()
        && matches!(prior.continuous, crate::path::ContPrior::ZeroCom);
    let mut worst_com: f64 = 0.0;
    let mut m_plain = vec![0.0_f64; dc * dc];
    let mut m_moved = vec![0.0_f64; dc * dc];

    for _ in 0..n {
        let x = prior.sample(space, &mut rng);
        if let Some(pc) = space.point_cloud {
            for c in 0..pc.dim {
                let com: f64 = (0..pc.n)
                    .map(|p| x.values[p * pc.dim + c])
                    .sum::<f64>()
                    / pc.n as f64;
                worst_com = worst_com.max(com.abs());
            }
        }
        let g = sampler.sample(space, &mut rng);
        let y = act(&g, &x, space).expect("sampled elements fit their space");
        for i in 0..dc {
            for j in 0..dc {
                m_plain[i * dc + j] += x.values[i] * x.values[j] / n as f64;
                m_moved[i * dc + j] += y.values[i] * y.values[j] / n as f64;
            }
        }
    }

    let moment_gap = num_traits::Float::sqrt(
        m_plain
            .iter()
            .zip(&m_moved)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>(),
    );
    PriorInvarianceReport {
        com_residual: pins_com.then_some(worst_com),
        moment_gap,
    }
}

/// Residuals of posterior-expectation equivariance and of the induced
/// velocity field's equivariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelEquivarianceReport {
    /// Max of `|E[x1 | g·x] - g·E[x1 | x]|` over probes.
    pub expectation_residual: f64,
    /// Max of `|v(g·x, t) - g_lin·v(x, t)|` over probes.
    pub velocity_residual: f64,
}

/// Probe a frozen head for expectation equivariance over the sampler's
/// orbit, and for the velocity-field equivariance it induces.
pub fn audit_model_equivariance(
    head: &Head,
    velocity: &VelocitySpec,
    sampler: GroupSampler,
    trials: usize,
    seed: u64,
) -> Result<ModelEquivarianceReport, DiffError> {
    assert!(trials >= 1);
    let space = head.space().clone();
    let mut report = ModelEquivarianceReport {
        expectation_residual: 0.0,
        velocity_residual: 0.0,
    };
    for trial in 0..trials {
        let mut rng = stream_rng(seed, 1 + trial as u64);
        let t = rng.random_range(0.0..0.9);
        let x = random_state(&space, t, &mut rng);
        let g = sampler.sample(&space, &mut rng);

        let mean = head.posterior_mean(&x, None)?;
        let gx = act(&g, &x, &space).expect("compatible by construction");
        let mean_moved = head.posterior_mean(&gx, None)?;
        let g_mean = act_values(&g, &mean, &space).expect("compatible by construction");
        report.expectation_residual = report
            .expectation_residual
            .max(max_abs_diff(&mean_moved, &g_mean));

        let v = velocity
            .endpoint_to_velocity(&x, t, &mean)
            .expect("matching dims");
        let v_moved = velocity
            .endpoint_to_velocity(&gx, t, &mean_moved)
            .expect("matching dims");
        let lin = g.linear_part();
        let g_v = act_values(&lin, &v, &space).expect("compatible by construction");
        report.velocity_residual = report.velocity_residual.max(max_abs_diff(&v_moved, &g_v));
    }
    Ok(report)
}

/// End-to-end flow-map commutation plus a sample-statistic cross-check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalInvarianceReport {
    /// Max over trials and grid nodes of `|g·traj(x0)[k] - traj(g·x0)[k]|`.
    pub trajectory_residual: f64,
    /// 1-d Wasserstein-2 distance between an invariant per-sample statistic
    /// of the two final-state populations.
    pub statistic_gap: f64,
}

/// Integrate each trial from `x0` and from `g·x0` and compare whole
/// trajectories under the action: flow-map equivariance is the pointwise
/// statement behind an invariant marginal path. Rotations and relabelings
/// only — translations are quotiented out by the zero-CoM contract.
pub fn audit_marginal_invariance(
    head: &Head,
    prior: &Prior,
    velocity: &VelocitySpec,
    integ: &IntegratorConfig,
    trials: usize,
    seed: u64,
) -> Result<MarginalInvarianceReport, SampleError> {
    assert!(trials >= 1);
    let space = head.space().clone();
    let mut worst: f64 = 0.0;
    let mut stat_a = Vec::with_capacity(trials);
    let mut stat_b = Vec::with_capacity(trials);

    let statistic = |values: &[f64]| -> f64 {
        if space.point_cloud.is_some() {
            Property::MeanPairwiseDistance.eval(&space, values)
        } else {
            num_traits::Float::sqrt(
                values[..space.n_continuous].iter().map(|v| v * v).sum::<f64>(),
            )
        }
    };

    for trial in 0..trials {
        let mut rng = stream_rng(seed, 1 + trial as u64);
        let x0 = prior.sample(&space, &mut rng);
        let g = GroupSampler::RotatePermute.sample(&space, &mut rng);
        let gx0 = act(&g, &x0, &space).expect("compatible by construction");

        let mut field =
            |vals: &[f64], t: f64| velocity_field(head, velocity, vals, t, None);
        let traj_a = integrate(&mut field, &x0, integ, velocity.t_clamp)?;
        let traj_b = integrate(&mut field, &gx0, integ, velocity.t_clamp)?;

        for (sa, sb) in traj_a.states.iter().zip(&traj_b.states) {
            let moved = act_values(&g, &sa.values, &space).expect("compatible");
            worst = worst.max(max_abs_diff(&moved, &sb.values));
        }
        stat_a.push(statistic(&traj_a.states.last().unwrap().values));
        stat_b.push(statistic(&traj_b.states.last().unwrap().values));
    }

    Ok(MarginalInvarianceReport {
        trajectory_residual: worst,
        statistic_gap: num_traits::Float::sqrt(w2_squared_1d(&stat_a, &stat_b)),
    })
}
