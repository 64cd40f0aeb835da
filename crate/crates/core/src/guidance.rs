//! Task likelihoods for post-hoc control.
//!
//! A likelihood is a Gaussian observation model around a differentiable
//! property of the endpoint: `y ~ N(f(x1), sigma_y^2)`. Being analytic (no
//! trained classifier), its gradients and the induced fixed points have
//! closed forms the tests can check exactly. Properties read only the
//! continuous block, so gradients live in continuous coordinates.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diff::{leaf_gradients, DiffError, Tape, Tensor, Var};
use crate::metrics::Property;
use crate::path::SpaceSpec;

/// Gaussian observation model `p(y | x1) = N(y; f(x1), sigma_y^2)`.
///
/// Discrete targets (like a mixture-component index) are handled by the
/// property's smooth surrogate, so `f` is differentiable everywhere it is
/// used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyLikelihood {
    pub property: Property,
    pub sigma_y: f64,
    pub target: f64,
}

impl PropertyLikelihood {
    pub fn new(property: Property, sigma_y: f64, target: f64) -> Self {
        assert!(sigma_y > 0.0, "observation noise must be positive");
        PropertyLikelihood { property, sigma_y, target }
    }

    /// Build `log p(y | x1)` on a tape over a `1 x n_continuous` endpoint
    /// row, normalizer included.
    pub fn graph(&self, tape: &mut Tape, x_cont: Var, space: &SpaceSpec) -> Var {
        let f = self.property.graph(tape, x_cont, space);
        let neg = tape.scale(f, -1.0);
        let resid = tape.add_scalar(neg, self.target);
        let sq = tape.mul(resid, resid);
        let quad = tape.scale(sq, -0.5 / (self.sigma_y * self.sigma_y));
        let norm = -0.5
            * num_traits::Float::ln(
                2.0 * core::f64::consts::PI * self.sigma_y * self.sigma_y,
            );
        tape.add_scalar(quad, norm)
    }

    /// `log p(y | x1)` at a concrete endpoint (continuous block of
    /// `values`).
    pub fn log_likelihood(&self, space: &SpaceSpec, values: &[f64]) -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(&values[..space.n_continuous]));
        let ll = self.graph(&mut tape, x, space);
        Ok(tape.value(ll)?.data[0])
    }

    /// `∇_{x1} log p(y | x1)` over the continuous block, by reverse-mode
    /// differentiation: `(y - f(x1)) / sigma_y^2 * ∇f(x1)`.
    pub fn grad_log_likelihood(
        &self,
        space: &SpaceSpec,
        values: &[f64],
    ) -> Result<Vec<f64>, DiffError> {
        let mut tape = Tape::new();
        let x = tape.leaf("x1", Tensor::row(&values[..space.n_continuous]));
        let ll = self.graph(&mut tape, x, space);
        let grads = tape.backward(ll)?;
        Ok(leaf_gradients(&tape, &grads)[0].1.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::diff::check::fd_gradient;
    use crate::metrics::Property;

    const LN_2PI: f64 = 1.8378770664093453;

    #[test]
    fn zero_residual_gives_pure_normalizer() {
        // Coordinate sum is exact: f(x) = 3.0 at x = (1, 2).
        let space = SpaceSpec::continuous(2);
        let lik = PropertyLikelihood::new(Property::CoordinateSum, 0.4, 3.0);
        let ll = lik.log_likelihood(&space, &[1.0, 2.0]).unwrap();
        let expect = -0.5 * num_traits::Float::ln(2.0 * core::f64::consts::PI * 0.16);
        assert!((ll - expect).abs() < 1e-14);

        // And the gradient vanishes at the optimum.
        let g = lik.grad_log_likelihood(&space, &[1.0, 2.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14), "{g:?}");
    }

    #[test]
    fn unit_residual_unit_noise_value() {
        let space = SpaceSpec::continuous(1);
        let lik = PropertyLikelihood::new(Property::CoordinateSum, 1.0, 1.0);
        let ll = lik.log_likelihood(&space, &[0.0]).unwrap();
        assert!((ll - (-0.5 - 0.5 * LN_2PI)).abs() < 1e-14);
    }

    #[test]
    fn widening_the_noise_trades_quadratic_for_normalizer() {
        // Doubling sigma_y helps iff the quadratic term it shrinks outweighs
        // the normalizer it grows; check both regimes numerically.
        let space = SpaceSpec::continuous(1);
        let ll = |sigma: f64, resid: f64| {
            PropertyLikelihood::new(Property::CoordinateSum, sigma, resid)
                .log_likelihood(&space, &[0.0])
                .unwrap()
        };
        // Large residual: doubling sigma_y increases log-likelihood.
        assert!(ll(2.0, 5.0) > ll(1.0, 5.0));
        // Tiny residual: the extra normalizer dominates and it decreases.
        assert!(ll(2.0, 0.1) < ll(1.0, 0.1));
        // Both match the direct formula.
        for (s, r) in [(1.0, 5.0), (2.0, 5.0), (1.0, 0.1), (2.0, 0.1)] {
            let direct = -r * r / (2.0 * s * s)
                - 0.5 * num_traits::Float::ln(2.0 * core::f64::consts::PI * s * s);
            assert!((ll(s, r) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_property_gradient_is_chain_rule() {
        // f = sum of coordinates: slope 1 per coordinate, so the gradient is
        // (y - f(x)) / sigma_y^2 in every coordinate.
        let space = SpaceSpec::continuous(3);
        let lik = PropertyLikelihood::new(Property::CoordinateSum, 0.5, 2.0);
        let x = [0.3, -0.1, 0.6]; // f = 0.8, residual 1.2
        let g = lik.grad_log_likelihood(&space, &x).unwrap();
        let expect = 1.2 / 0.25;
        for v in g {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn circumradius_gradient_matches_finite_differences() {
        let space = SpaceSpec::point_cloud(6, 2, 2).unwrap();
        let lik = PropertyLikelihood::new(Property::Circumradius, 0.3, 1.1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();

        let analytic = lik.grad_log_likelihood(&space, &x).unwrap();
        let fd = fd_gradient(
            |vals| lik.log_likelihood(&space, vals).unwrap(),
            &x,
            1e-6,
        );
        for (a, e) in analytic.iter().zip(&fd) {
            assert!((a - e).abs() < 1e-7, "{a} vs {e}");
        }
    }

    #[test]
    fn invariant_property_gradients_are_equivariant() {
        // Circumradius ignores rotations and point order, so its likelihood
        // gradient must rotate/permute along with the input.
        let space = SpaceSpec::point_cloud(4, 2, 2).unwrap();
        let lik = PropertyLikelihood::new(Property::Circumradius, 0.2, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = lik.grad_log_likelihood(&space, &x).unwrap();

        let theta = 0.77;
        let (c, s) = (num_traits::Float::cos(theta), num_traits::Float::sin(theta));
        let perm = [1usize, 3, 0, 2];
        let mut moved = vec![0.0; 8];
        let mut expected = vec![0.0; 8];
        for (new, &old) in perm.iter().enumerate() {
            moved[new * 2] = c * x[old * 2] - s * x[old * 2 + 1];
            moved[new * 2 + 1] = s * x[old * 2] + c * x[old * 2 + 1];
            expected[new * 2] = c * g[old * 2] - s * g[old * 2 + 1];
            expected[new * 2 + 1] = s * g[old * 2] + c * g[old * 2 + 1];
        }
        let got = lik.grad_log_likelihood(&space, &moved).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn smooth_component_surrogate_gradient_matches_finite_differences() {
        let space = SpaceSpec::continuous(2);
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                let a = core::f64::consts::PI * k as f64 / 2.0;
                vec![
                    2.0 * num_traits::Float::cos(a),
                    2.0 * num_traits::Float::sin(a),
                ]
            })
            .collect();
        let lik = PropertyLikelihood::new(
            Property::NearestCenter { centers, tau: 0.5 },
            0.5,
            2.0,
        );
        let x = [0.9, 0.8];
        let analytic = lik.grad_log_likelihood(&space, &x).unwrap();
        let fd = fd_gradient(|vals| lik.log_likelihood(&space, vals).unwrap(), &x, 1e-6);
        for (a, e) in analytic.iter().zip(&fd) {
            assert!((a - e).abs() < 1e-7, "{a} vs {e}");
        }
    }
}
