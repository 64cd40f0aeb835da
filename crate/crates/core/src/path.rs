//! Probability paths, couplings, and the optimal-transport conditional
//! velocity.
//!
//! States live in a product space: a block of continuous coordinates followed
//! by one simplex block per categorical factor. Categorical endpoints are
//! embedded as one-hot vertices of their simplex, so the straight-line
//! interpolation and its velocity apply uniformly across modalities and the
//! expected endpoint of a categorical factor is its probability vector.

use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PathError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("invalid space: {0}")]
    InvalidSpace(String),
}

/// Point-cloud overlay on the continuous block: `n` points in `dim` spatial
/// dimensions, stored row-major as the first `n * dim` continuous values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointCloudShape {
    pub n: usize,
    pub dim: usize,
}

/// Layout of the product space.
///
/// Values are ordered as `[continuous (n_continuous) | block_0 | block_1 | ...]`
/// where block `j` holds the simplex coordinates of the j-th categorical
/// factor. Univariate factor `d` is continuous dimension `d` for
/// `d < n_continuous` and categorical block `d - n_continuous` otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub n_continuous: usize,
    /// Cardinality of each categorical factor, in block order.
    pub categorical: Vec<usize>,
    /// Present when the continuous block is a point cloud.
    pub point_cloud: Option<PointCloudShape>,
}

impl SpaceSpec {
    pub fn continuous(n: usize) -> Self {
        SpaceSpec { n_continuous: n, categorical: Vec::new(), point_cloud: None }
    }

    pub fn categorical(cardinalities: &[usize]) -> Result<Self, PathError> {
        let spec = SpaceSpec {
            n_continuous: 0,
            categorical: cardinalities.to_vec(),
            point_cloud: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Point cloud of `n` typed points in `dim` spatial dimensions with
    /// `n_types` categories per point (one categorical block per point).
    pub fn point_cloud(n: usize, dim: usize, n_types: usize) -> Result<Self, PathError> {
        let spec = SpaceSpec {
            n_continuous: n * dim,
            categorical: alloc::vec![n_types; n],
            point_cloud: Some(PointCloudShape { n, dim }),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), PathError> {
        for &k in &self.categorical {
            if k < 2 {
                return Err(PathError::InvalidSpace(String::from(
                    "categorical cardinality must be >= 2",
                )));
            }
        }
        if let Some(pc) = self.point_cloud {
            if pc.n * pc.dim != self.n_continuous {
                return Err(PathError::InvalidSpace(String::from(
                    "point-cloud shape does not cover the continuous block",
                )));
            }
        }
        Ok(())
    }

    /// Total embedded dimension: continuous plus all simplex coordinates.
    pub fn total_dim(&self) -> usize {
        self.n_continuous + self.categorical.iter().sum::<usize>()
    }

    pub fn n_blocks(&self) -> usize {
        self.categorical.len()
    }

    /// Value range of categorical block `j`.
    pub fn block_range(&self, j: usize) -> core::ops::Range<usize> {
        let start = self.n_continuous
            + self.categorical[..j].iter().sum::<usize>();
        start..start + self.categorical[j]
    }
}

/// A point in the product space at a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub values: Vec<f64>,
    pub time: f64,
}

impl State {
    pub fn new(values: Vec<f64>, time: f64) -> Self {
        State { values, time }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Clip categorical blocks back onto the simplex: negatives to zero,
    /// block sums above one rescaled to one. Applied at integrator
    /// boundaries, never mid-step.
    pub fn project_categorical(&mut self, space: &SpaceSpec) {
        for j in 0..space.n_blocks() {
            let range = space.block_range(j);
            let block = &mut self.values[range];
            for v in block.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let sum: f64 = block.iter().sum();
            if sum > 1.0 + 1e-9 {
                for v in block.iter_mut() {
                    *v /= sum;
                }
            }
        }
    }

    /// Argmax class index per categorical block.
    pub fn decode_categorical(&self, space: &SpaceSpec) -> Vec<usize> {
        (0..space.n_blocks())
            .map(|j| {
                let range = space.block_range(j);
                let block = &self.values[range];
                let mut best = 0;
                for (i, v) in block.iter().enumerate() {
                    if *v > block[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// A prior/data endpoint pair, optionally annotated with a property value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coupling {
    pub x0: State,
    pub x1: State,
    pub label: Option<f64>,
}

/// Interpolation family. Only the straight-line optimal-transport path is
/// supported; it is linear in the endpoint, which is what lets the posterior
/// mean stand in for the full posterior everywhere downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityKind {
    OptimalTransport,
}

/// Conditional velocity `u_t(x | x1)` with its time clamp.
///
/// The denominator `1 - t` blows up at `t = 1`; times are clamped to
/// `1 - t_clamp` and a diagnostic counter records how often the clamp fired.
#[derive(Debug, Serialize, Deserialize)]
pub struct VelocitySpec {
    pub kind: VelocityKind,
    pub t_clamp: f64,
    #[serde(skip)]
    clamp_events: AtomicU64,
}

impl Clone for VelocitySpec {
    fn clone(&self) -> Self {
        VelocitySpec {
            kind: self.kind,
            t_clamp: self.t_clamp,
            clamp_events: AtomicU64::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

impl Default for VelocitySpec {
    fn default() -> Self {
        VelocitySpec::new(1e-5)
    }
}

impl VelocitySpec {
    pub fn new(t_clamp: f64) -> Self {
        assert!(
            t_clamp > 0.0 && t_clamp < 0.5,
            "t_clamp must lie in (0, 0.5)"
        );
        VelocitySpec {
            kind: VelocityKind::OptimalTransport,
            t_clamp,
            clamp_events: AtomicU64::new(0),
        }
    }

    /// True for velocity families linear in the endpoint.
    pub fn linear_in_endpoint(&self) -> bool {
        match self.kind {
            VelocityKind::OptimalTransport => true,
        }
    }

    /// Number of times a velocity evaluation hit the time clamp.
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events.load(Ordering::Relaxed)
    }

    fn clamp_time(&self, t: f64) -> f64 {
        let cap = 1.0 - self.t_clamp;
        if t > cap {
            self.clamp_events.fetch_add(1, Ordering::Relaxed);
            cap
        } else {
            t
        }
    }

    /// `u_t(x | x1) = (x1 - x) / (1 - t)` with `t` clamped to `1 - t_clamp`.
    pub fn conditional_velocity(
        &self,
        x: &State,
        x1: &State,
        t: f64,
    ) -> Result<Vec<f64>, PathError> {
        if x.dim() != x1.dim() {
            return Err(PathError::DimensionMismatch { expected: x.dim(), got: x1.dim() });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(PathError::TimeOutOfRange(t));
        }
        let tc = self.clamp_time(t);
        let inv = 1.0 / (1.0 - tc);
        Ok(x.values
            .iter()
            .zip(&x1.values)
            .map(|(xi, x1i)| (x1i - xi) * inv)
            .collect())
    }

    /// Velocity induced by a predicted endpoint. By linearity this equals
    /// the expectation of `u_t(x | x1)` under any endpoint distribution
    /// whose mean is `x1_hat`.
    pub fn endpoint_to_velocity(
        &self,
        x: &State,
        t: f64,
        x1_hat: &[f64],
    ) -> Result<Vec<f64>, PathError> {
        debug_assert!(self.linear_in_endpoint());
        if x.dim() != x1_hat.len() {
            return Err(PathError::DimensionMismatch { expected: x.dim(), got: x1_hat.len() });
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(PathError::TimeOutOfRange(t));
        }
        let tc = self.clamp_time(t);
        let inv = 1.0 / (1.0 - tc);
        Ok(x.values
            .iter()
            .zip(x1_hat)
            .map(|(xi, mi)| (mi - xi) * inv)
            .collect())
    }

    /// `t ~ Uniform(0, 1 - t_clamp)`, the training-time law.
    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        rng.random_range(0.0..1.0 - self.t_clamp)
    }
}

/// Straight-line interpolation `x_t = (1 - t) x0 + t x1`.
///
/// The result depends only on the endpoints, never on a label attached to
/// the coupling: intermediates are conditionally independent of the control
/// variable.
pub fn interpolate(x0: &State, x1: &State, t: f64) -> Result<State, PathError> {
    if x0.dim() != x1.dim() {
        return Err(PathError::DimensionMismatch { expected: x0.dim(), got: x1.dim() });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(PathError::TimeOutOfRange(t));
    }
    let values = x0
        .values
        .iter()
        .zip(&x1.values)
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Ok(State::new(values, t))
}

/// One-hot embedding of class `class` in a block of cardinality `k`.
pub fn one_hot(class: usize, k: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; k];
    v[class] = 1.0;
    v
}

/// Continuous-block prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContPrior {
    /// i.i.d. standard normal coordinates.
    Standard,
    /// Standard normal with the per-cloud centroid removed; requires a
    /// point-cloud space. Invariant under rotations and the natural prior
    /// for translation-quotient data.
    ZeroCom,
}

/// Categorical-block prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatPrior {
    /// i.i.d. standard normal coordinates, the same source used for
    /// continuous blocks. An absolutely continuous source is what lets the
    /// expected-endpoint flow reproduce the target class frequencies: a
    /// source concentrated on vertices pins each chain to its starting
    /// corner (the endpoint posterior at an exact vertex collapses onto
    /// that corner, so the velocity vanishes there) and class frequencies
    /// come out uniform no matter how well the posterior is trained.
    Gauss,
    /// A uniformly random vertex per block. Gives distinct trajectories per
    /// draw, but see `Gauss` for why generated class frequencies degenerate
    /// to uniform; kept as a selectable diagnostic.
    VertexUniform,
    /// The simplex barycenter; deterministic, useful for diagnostics.
    Center,
}

/// Source distribution at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prior {
    pub continuous: ContPrior,
    pub categorical: CatPrior,
}

impl Default for Prior {
    fn default() -> Self {
        Prior { continuous: ContPrior::Standard, categorical: CatPrior::Gauss }
    }
}

impl Prior {
    pub fn sample<R: Rng + ?Sized>(&self, space: &SpaceSpec, rng: &mut R) -> State {
        use rand_distr::{Distribution, StandardNormal};
        let mut values = Vec::with_capacity(space.total_dim());
        for _ in 0..space.n_continuous {
            let z: f64 = StandardNormal.sample(rng);
            values.push(z);
        }
        if matches!(self.continuous, ContPrior::ZeroCom) {
            let pc = space
                .point_cloud
                .expect("zero-centroid prior needs a point-cloud space");
            for c in 0..pc.dim {
                let mean: f64 =
                    (0..pc.n).map(|p| values[p * pc.dim + c]).sum::<f64>() / pc.n as f64;
                for p in 0..pc.n {
                    values[p * pc.dim + c] -= mean;
                }
            }
        }
        for &k in &space.categorical {
            match self.categorical {
                CatPrior::Gauss => {
                    for _ in 0..k {
                        let z: f64 = StandardNormal.sample(rng);
                        values.push(z);
                    }
                }
                CatPrior::VertexUniform => values.extend(one_hot(rng.random_range(0..k), k)),
                CatPrior::Center => values.extend(core::iter::repeat(1.0 / k as f64).take(k)),
            }
        }
        State::new(values, 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(values: Vec<f64>, t: f64) -> State {
        State::new(values, t)
    }

    #[test]
    fn interpolate_matches_linear_arithmetic() {
        let xt = interpolate(&s(vec![0.0], 0.0), &s(vec![2.0], 1.0), 0.25).unwrap();
        assert_eq!(xt.values, vec![0.5]);
        assert_eq!(xt.time, 0.25);

        let mid = interpolate(&s(vec![1.0, -1.0], 0.0), &s(vec![3.0, 1.0], 1.0), 0.5).unwrap();
        assert_eq!(mid.values, vec![2.0, 0.0]);
    }

    #[test]
    fn interpolate_identity_when_endpoints_equal() {
        // (1-t)a + ta rounds independently per term, so mid-path identity
        // holds to a couple of ulps rather than bit-exactly.
        let v = s(vec![0.7, -3.2, 4.0], 0.0);
        for &t in &[0.0, 0.3, 0.99, 1.0] {
            let xt = interpolate(&v, &s(v.values.clone(), 1.0), t).unwrap();
            for (a, b) in xt.values.iter().zip(&v.values) {
                assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
            }
        }
    }

    #[test]
    fn interpolate_hits_endpoints_exactly() {
        let x0 = s(vec![1.5, 2.5], 0.0);
        let x1 = s(vec![-0.5, 9.0], 1.0);
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap().values, x0.values);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap().values, x1.values);
    }

    #[test]
    fn interpolate_rejects_dimension_mismatch() {
        let err = interpolate(&s(vec![0.0], 0.0), &s(vec![1.0, 2.0], 1.0), 0.5);
        assert!(matches!(err, Err(PathError::DimensionMismatch { .. })));
    }

    #[test]
    fn conditional_velocity_examples() {
        let spec = VelocitySpec::new(1e-5);
        let v = spec
            .conditional_velocity(&s(vec![0.5], 0.25), &s(vec![2.0], 1.0), 0.25)
            .unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15);

        let z = spec
            .conditional_velocity(&s(vec![1.0, 2.0], 0.5), &s(vec![1.0, 2.0], 1.0), 0.5)
            .unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn clamp_rule_caps_the_denominator() {
        // (1 - 0) / (1 - t) with t clamped to 1 - 1e-4 gives exactly 1e4.
        let spec = VelocitySpec::new(1e-4);
        let v = spec
            .conditional_velocity(&s(vec![0.0], 0.99999), &s(vec![1.0], 1.0), 0.99999)
            .unwrap();
        assert!((v[0] - 1e4).abs() / 1e4 < 1e-12);
        assert_eq!(spec.clamp_events(), 1);
    }

    #[test]
    fn endpoint_velocity_equals_mixture_mean_velocity() {
        // Two-outcome endpoint distribution, brute-force expectation.
        let spec = VelocitySpec::new(1e-5);
        let x = s(vec![0.0], 0.5);
        let outcomes = [(0.0, 0.5), (2.0, 0.5)];
        let mean: f64 = outcomes.iter().map(|(v, w)| v * w).sum();
        let expect: f64 = outcomes
            .iter()
            .map(|(v, w)| {
                w * spec
                    .conditional_velocity(&x, &s(vec![*v], 1.0), 0.5)
                    .unwrap()[0]
            })
            .sum();
        let via_mean = spec.endpoint_to_velocity(&x, 0.5, &[mean]).unwrap()[0];
        assert!((via_mean - 2.0).abs() < 1e-15);
        assert!((via_mean - expect).abs() < 1e-15);
    }

    #[test]
    fn endpoint_velocity_componentwise() {
        let spec = VelocitySpec::new(1e-5);
        let v = spec
            .endpoint_to_velocity(&s(vec![1.0, 1.0], 0.5), 0.5, &[1.0, 3.0])
            .unwrap();
        assert_eq!(v, vec![0.0, 4.0]);

        let at_zero = spec
            .endpoint_to_velocity(&s(vec![0.0], 0.0), 0.0, &[1.0])
            .unwrap();
        assert_eq!(at_zero, vec![1.0]);
    }

    #[test]
    fn sample_time_range_mean_and_determinism() {
        let spec = VelocitySpec::new(1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<f64> = (0..10_000).map(|_| spec.sample_time(&mut rng)).collect();
        assert!(draws.iter().all(|&t| (0.0..=1.0 - spec.t_clamp).contains(&t)));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.49).abs() < 0.02 || (mean - 0.5).abs() < 0.02);

        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let again: Vec<f64> = (0..10_000).map(|_| spec.sample_time(&mut rng2)).collect();
        assert_eq!(draws, again);
    }

    #[test]
    fn space_layout_and_validation() {
        let spec = SpaceSpec::point_cloud(6, 2, 2).unwrap();
        assert_eq!(spec.total_dim(), 12 + 12);
        assert_eq!(spec.block_range(0), 12..14);
        assert_eq!(spec.block_range(5), 22..24);

        assert!(SpaceSpec::categorical(&[1]).is_err());
        let bad = SpaceSpec {
            n_continuous: 5,
            categorical: vec![],
            point_cloud: Some(PointCloudShape { n: 2, dim: 2 }),
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn project_categorical_restores_simplex() {
        let spec = SpaceSpec::categorical(&[3]).unwrap();
        let mut st = s(vec![-0.1, 0.9, 0.9], 0.5);
        st.project_categorical(&spec);
        assert_eq!(st.values[0], 0.0);
        let sum: f64 = st.values.iter().sum();
        assert!(sum <= 1.0 + 1e-9);
        assert_eq!(st.decode_categorical(&spec), vec![1]);
    }

    #[test]
    fn one_hot_is_a_simplex_vertex() {
        assert_eq!(one_hot(2, 4), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn priors_respect_space_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = SpaceSpec::point_cloud(4, 3, 2).unwrap();
        let prior = Prior { continuous: ContPrior::ZeroCom, categorical: CatPrior::VertexUniform };
        for _ in 0..20 {
            let x = prior.sample(&space, &mut rng);
            assert_eq!(x.dim(), space.total_dim());
            assert_eq!(x.time, 0.0);
            // Centroid removed per spatial dimension.
            for c in 0..3 {
                let m: f64 = (0..4).map(|p| x.values[p * 3 + c]).sum();
                assert!(m.abs() < 1e-12);
            }
            // Every categorical block sits on a vertex.
            for j in 0..space.n_blocks() {
                let b = &x.values[space.block_range(j)];
                assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(b.iter().filter(|&&v| v == 0.0).count(), 1);
            }
        }

        let center = Prior { continuous: ContPrior::Standard, categorical: CatPrior::Center };
        let flat = SpaceSpec::categorical(&[5]).unwrap();
        let x = center.sample(&flat, &mut rng);
        assert!(x.values.iter().all(|&v| v == 0.2));

        // Vertex draws are roughly uniform over classes.
        let mut counts = [0usize; 5];
        for _ in 0..5000 {
            let x = Prior::default().sample(&flat, &mut rng);
            counts[x.decode_categorical(&flat)[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / 5000.0 - 0.2).abs() < 0.03, "{counts:?}");
        }
    }
}
