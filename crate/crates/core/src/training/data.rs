//! Toy target distributions with analytically known structure.
//!
//! Each family exposes exactly what its evaluation needs: the ring mixture
//! knows its centers, the factorized target its marginals, the polygon
//! clouds their construction tolerances. Samples are endpoint states
//! (`t = 1`), optionally labeled with a control value.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::metrics::Property;
use crate::path::{one_hot, SpaceSpec, State};

/// Two-dimensional Gaussian mixture with components on a circle; labels are
/// component indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingMixture {
    pub n_components: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for RingMixture {
    fn default() -> Self {
        RingMixture { n_components: 8, radius: 3.0, sigma: 0.25 }
    }
}

impl RingMixture {
    pub fn space(&self) -> SpaceSpec {
        SpaceSpec::continuous(2)
    }

    pub fn centers(&self) -> Vec<Vec<f64>> {
        (0..self.n_components)
            .map(|k| {
                let a = 2.0 * core::f64::consts::PI * k as f64 / self.n_components as f64;
                alloc::vec![
                    self.radius * num_traits::Float::cos(a),
                    self.radius * num_traits::Float::sin(a),
                ]
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (State, f64) {
        let k = rng.random_range(0..self.n_components);
        let c = &self.centers()[k];
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        let x = State::new(
            alloc::vec![c[0] + self.sigma * z0, c[1] + self.sigma * z1],
            1.0,
        );
        (x, k as f64)
    }

    /// The property whose value the labels carry.
    pub fn label_property(&self) -> Property {
        Property::NearestCenter { centers: self.centers(), tau: 0.25 }
    }
}

/// Independent categorical factors with fixed non-uniform marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedCategorical {
    pub marginals: Vec<Vec<f64>>,
}

impl FactorizedCategorical {
    /// Rotating-weights construction: block `j` puts probability
    /// proportional to `k - ((i + j) mod k)` on class `i`, so every block is
    /// non-uniform and no two adjacent blocks coincide.
    pub fn standard(blocks: usize, k: usize) -> Self {
        assert!(blocks > 0 && k >= 2);
        let total: f64 = (1..=k).map(|v| v as f64).sum();
        let marginals = (0..blocks)
            .map(|j| {
                (0..k)
                    .map(|i| (k - (i + j) % k) as f64 / total)
                    .collect()
            })
            .collect();
        FactorizedCategorical { marginals }
    }

    pub fn space(&self) -> SpaceSpec {
        SpaceSpec {
            n_continuous: 0,
            categorical: self.marginals.iter().map(|m| m.len()).collect(),
            point_cloud: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> State {
        let mut values = Vec::new();
        for m in &self.marginals {
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut class = m.len() - 1;
            for (i, p) in m.iter().enumerate() {
                acc += p;
                if u < acc {
                    class = i;
                    break;
                }
            }
            values.extend(one_hot(class, m.len()));
        }
        State::new(values, 1.0)
    }
}

/// Noisy regular polygons with alternating point types, in random rotation
/// and random size; labels are the measured circumradius.
///
/// Coordinate noise is a clamped Gaussian: each offset is at most
/// `3 * noise_frac * radius`, so a freshly constructed cloud always passes
/// the validity rule at the default tolerance (worst-case chord error is
/// `2 * sqrt(2) * 3 * noise_frac` relative, 0.17 at the default 0.02).
/// Points are stored in shuffled order to keep readers honest about
/// permutation symmetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonClouds {
    pub n_points: usize,
    pub radius_lo: f64,
    pub radius_hi: f64,
    pub noise_frac: f64,
}

impl Default for PolygonClouds {
    fn default() -> Self {
        PolygonClouds { n_points: 6, radius_lo: 0.8, radius_hi: 1.2, noise_frac: 0.02 }
    }
}

impl PolygonClouds {
    pub fn space(&self) -> SpaceSpec {
        SpaceSpec::point_cloud(self.n_points, 2, 2).expect("valid cloud space")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (State, f64) {
        let n = self.n_points;
        let r = rng.random_range(self.radius_lo..self.radius_hi);
        let phase = rng.random_range(0.0..2.0 * core::f64::consts::PI);
        let sigma = self.noise_frac * r;

        let mut coords = Vec::with_capacity(n * 2);
        for p in 0..n {
            let a = phase + 2.0 * core::f64::consts::PI * p as f64 / n as f64;
            for base in [
                r * num_traits::Float::cos(a),
                r * num_traits::Float::sin(a),
            ] {
                let z: f64 = StandardNormal.sample(rng);
                coords.push(base + sigma * z.clamp(-3.0, 3.0));
            }
        }
        // Exact centering: the translation quotient is fixed at the data.
        for c in 0..2 {
            let mean: f64 = (0..n).map(|p| coords[p * 2 + c]).sum::<f64>() / n as f64;
            for p in 0..n {
                coords[p * 2 + c] -= mean;
            }
        }

        // Fisher-Yates shuffle of point order; types follow their vertex.
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut values = Vec::with_capacity(n * 4);
        for &p in &order {
            values.push(coords[p * 2]);
            values.push(coords[p * 2 + 1]);
        }
        for &p in &order {
            values.extend(one_hot(p % 2, 2));
        }
        let state = State::new(values, 1.0);
        let label = Property::Circumradius.eval(&self.space(), &state.values);
        (state, label)
    }

    pub fn label_property(&self) -> Property {
        Property::Circumradius
    }
}

/// A target distribution over endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Target {
    Ring(RingMixture),
    Factorized(FactorizedCategorical),
    Polygon(PolygonClouds),
}

impl Target {
    pub fn space(&self) -> SpaceSpec {
        match self {
            Target::Ring(t) => t.space(),
            Target::Factorized(t) => t.space(),
            Target::Polygon(t) => t.space(),
        }
    }

    /// One endpoint draw with its label, if this family carries one.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (State, Option<f64>) {
        match self {
            Target::Ring(t) => {
                let (x, y) = t.sample(rng);
                (x, Some(y))
            }
            Target::Factorized(t) => (t.sample(rng), None),
            Target::Polygon(t) => {
                let (x, y) = t.sample(rng);
                (x, Some(y))
            }
        }
    }

    pub fn labeled(&self) -> bool {
        !matches!(self, Target::Factorized(_))
    }

    /// The measurement the labels correspond to, where defined.
    pub fn label_property(&self) -> Option<Property> {
        match self {
            Target::Ring(t) => Some(t.label_property()),
            Target::Factorized(_) => None,
            Target::Polygon(t) => Some(t.label_property()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{marginal_total_variation, polygon_validity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ring_samples_cluster_at_labeled_centers() {
        let ring = RingMixture::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let centers = ring.centers();
        let mut max_dev = 0.0_f64;
        for _ in 0..500 {
            let (x, label) = ring.sample(&mut rng);
            let c = &centers[label as usize];
            let d = num_traits::Float::sqrt(
                (x.values[0] - c[0]).powi(2) + (x.values[1] - c[1]).powi(2),
            );
            max_dev = max_dev.max(d);
            // Label is the nearest center by construction (sigma << spacing).
            let prop = ring.label_property();
            assert_eq!(prop.eval(&ring.space(), &x.values), label);
        }
        assert!(max_dev < 5.0 * ring.sigma, "max deviation {max_dev}");
    }

    #[test]
    fn factorized_marginals_are_normalized_and_recovered() {
        let f = FactorizedCategorical::standard(8, 4);
        assert_eq!(f.marginals.len(), 8);
        for m in &f.marginals {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Rotating weights: every block non-uniform.
            assert!(m.iter().any(|&p| (p - 0.25).abs() > 0.05));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = f.space();
        let decoded: Vec<Vec<usize>> = (0..6000)
            .map(|_| f.sample(&mut rng).decode_categorical(&space))
            .collect();
        let tv = marginal_total_variation(&decoded, &f.marginals);
        assert!(tv < 0.03, "sampling TV {tv}");
    }

    #[test]
    fn polygon_samples_are_always_valid_and_centered() {
        let poly = PolygonClouds::default();
        let space = poly.space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let (x, label) = poly.sample(&mut rng);
            assert!(polygon_validity(&space, &x.values, 0.2));
            assert!((poly.radius_lo - 0.1..=poly.radius_hi + 0.1).contains(&label));
            for c in 0..2 {
                let m: f64 = (0..6).map(|p| x.values[p * 2 + c]).sum();
                assert!(m.abs() < 1e-12);
            }
            // Three points of each type.
            let types = x.decode_categorical(&space);
            assert_eq!(types.iter().filter(|&&t| t == 0).count(), 3);
        }
    }

    #[test]
    fn polygon_point_order_is_shuffled() {
        let poly = PolygonClouds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let space = poly.space();
        // If points were emitted in construction order, types would always
        // read 0,1,0,1,...; across many draws some permutation must differ.
        let mut saw_non_canonical = false;
        for _ in 0..50 {
            let (x, _) = poly.sample(&mut rng);
            let types = x.decode_categorical(&space);
            if types != alloc::vec![0, 1, 0, 1, 0, 1] {
                saw_non_canonical = true;
                break;
            }
        }
        assert!(saw_non_canonical);
    }
}
