//! Evaluation metrics and measurable properties.
//!
//! Distances here are exact (no minibatch estimators): one-dimensional
//! transport cost integrates the quantile functions piecewise, so unequal
//! sample counts need no resampling. Properties double as control targets —
//! each has an exact evaluation and a differentiable surrogate graph for
//! likelihood gradients.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::path::SpaceSpec;

/// Exact squared 2-Wasserstein distance between two one-dimensional
/// empirical distributions, by integrating the squared quantile gap over the
/// union grid of both inverse CDFs. Handles unequal sample counts exactly.
pub fn w2_squared_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);

    let mut total = 0.0;
    let mut u = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < sa.len() && j < sb.len() {
        let next_a = (i + 1) as f64 / na;
        let next_b = (j + 1) as f64 / nb;
        let next = if next_a < next_b { next_a } else { next_b };
        let gap = sa[i] - sb[j];
        total += gap * gap * (next - u);
        u = next;
        if next_a <= next + 1e-18 && next_a <= next_b {
            i += 1;
        }
        if next_b <= next + 1e-18 && next_b <= next_a {
            j += 1;
        }
    }
    total
}

/// Sliced 2-Wasserstein distance: root-mean of exact 1-d squared distances
/// over `n_dirs` random unit projections.
pub fn sliced_w2<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    dim: usize,
    n_dirs: usize,
    rng: &mut R,
) -> f64 {
    assert!(n_dirs > 0);
    assert!(a.iter().chain(b).all(|v| v.len() >= dim));
    let mut acc = 0.0;
    let mut pa = Vec::with_capacity(a.len());
    let mut pb = Vec::with_capacity(b.len());
    for _ in 0..n_dirs {
        let mut dir: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        let norm = num_traits::Float::sqrt(dir.iter().map(|v| v * v).sum::<f64>());
        if norm < 1e-12 {
            continue;
        }
        dir.iter_mut().for_each(|v| *v /= norm);
        pa.clear();
        pb.clear();
        pa.extend(a.iter().map(|x| x[..dim].iter().zip(&dir).map(|(v, d)| v * d).sum::<f64>()));
        pb.extend(b.iter().map(|x| x[..dim].iter().zip(&dir).map(|(v, d)| v * d).sum::<f64>()));
        acc += w2_squared_1d(&pa, &pb);
    }
    num_traits::Float::sqrt(acc / n_dirs as f64)
}

/// Worst-block total variation between empirical class frequencies of
/// decoded samples and reference marginals.
pub fn marginal_total_variation(decoded: &[Vec<usize>], marginals: &[Vec<f64>]) -> f64 {
    assert!(!decoded.is_empty());
    let n = decoded.len() as f64;
    let mut worst = 0.0_f64;
    for (j, probs) in marginals.iter().enumerate() {
        let mut counts = alloc::vec![0.0_f64; probs.len()];
        for d in decoded {
            counts[d[j]] += 1.0;
        }
        let tv: f64 = probs
            .iter()
            .zip(&counts)
            .map(|(p, c)| num_traits::Float::abs(c / n - p))
            .sum::<f64>()
            * 0.5;
        worst = worst.max(tv);
    }
    worst
}

/// Mean absolute error of a measured property against per-sample targets.
pub fn property_mae(measured: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(measured.len(), targets.len());
    assert!(!measured.is_empty());
    measured
        .iter()
        .zip(targets)
        .map(|(m, t)| num_traits::Float::abs(m - t))
        .sum::<f64>()
        / measured.len() as f64
}

/// A scalar, measurable function of an endpoint. Each variant has an exact
/// evaluation and a smooth surrogate graph whose gradient drives guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Property {
    /// Mean distance of cloud points to their centroid.
    Circumradius,
    /// Mean distance over unordered point pairs.
    MeanPairwiseDistance,
    /// Sum of all continuous coordinates.
    CoordinateSum,
    /// Index of the nearest reference center; the surrogate softens the
    /// argmin with temperature `tau`.
    NearestCenter { centers: Vec<Vec<f64>>, tau: f64 },
}

impl Property {
    /// Exact property value of an endpoint's continuous block.
    pub fn eval(&self, space: &SpaceSpec, values: &[f64]) -> f64 {
        let dc = space.n_continuous;
        let cont = &values[..dc];
        match self {
            Property::Circumradius => {
                let pc = space.point_cloud.expect("circumradius needs a point cloud");
                let centered = center_cloud(cont, pc.n, pc.dim);
                (0..pc.n)
                    .map(|p| norm(&centered[p * pc.dim..(p + 1) * pc.dim]))
                    .sum::<f64>()
                    / pc.n as f64
            }
            Property::MeanPairwiseDistance => {
                let pc = space.point_cloud.expect("pair distances need a point cloud");
                let mut total = 0.0;
                let mut count = 0.0;
                for i in 0..pc.n {
                    for j in i + 1..pc.n {
                        let d: f64 = (0..pc.dim)
                            .map(|c| {
                                let g = cont[i * pc.dim + c] - cont[j * pc.dim + c];
                                g * g
                            })
                            .sum();
                        total += num_traits::Float::sqrt(d);
                        count += 1.0;
                    }
                }
                total / count
            }
            Property::CoordinateSum => cont.iter().sum(),
            Property::NearestCenter { centers, .. } => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (k, c) in centers.iter().enumerate() {
                    let d: f64 = c
                        .iter()
                        .zip(cont)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best as f64
            }
        }
    }

    /// Differentiable surrogate of the property as a `1 x 1` graph over a
    /// `1 x n_continuous` variable. Exact for all variants except
    /// [`Property::NearestCenter`], whose argmin is softened.
    pub fn graph(&self, tape: &mut Tape, x_cont: Var, space: &SpaceSpec) -> Var {
        let dc = space.n_continuous;
        assert_eq!(tape.shape(x_cont), (1, dc), "property input is one endpoint row");
        match self {
            Property::Circumradius => {
                let pc = space.point_cloud.expect("circumradius needs a point cloud");
                let pts = tape.reshape(x_cont, pc.n, pc.dim);
                let centered = tape.mean_center_groups(pts, pc.n);
                let sq = tape.mul(centered, centered);
                let d2 = tape.row_sum(sq);
                let d = tape.sqrt(d2);
                let s = tape.sum_all(d);
                tape.scale(s, 1.0 / pc.n as f64)
            }
            Property::MeanPairwiseDistance => {
                let pc = space.point_cloud.expect("pair distances need a point cloud");
                let pts = tape.reshape(x_cont, pc.n, pc.dim);
                let mut ii = Vec::new();
                let mut jj = Vec::new();
                for i in 0..pc.n {
                    for j in i + 1..pc.n {
                        ii.push(i);
                        jj.push(j);
                    }
                }
                let pi = tape.gather(pts, &ii);
                let pj = tape.gather(pts, &jj);
                let diff = tape.sub(pi, pj);
                let sq = tape.mul(diff, diff);
                let d2 = tape.row_sum(sq);
                let d = tape.sqrt(d2);
                let s = tape.sum_all(d);
                tape.scale(s, 1.0 / ii.len() as f64)
            }
            Property::CoordinateSum => tape.sum_all(x_cont),
            Property::NearestCenter { centers, tau } => {
                let k = centers.len();
                let d = centers[0].len();
                assert_eq!(d, dc, "centers live in the continuous space");
                let c = Tensor::new(
                    centers.iter().flat_map(|v| v.iter().copied()).collect(),
                    k,
                    d,
                );
                let cv = tape.constant(c);
                let ones = tape.constant(Tensor::filled(k, 1, 1.0));
                let xrep = tape.matmul(ones, x_cont);
                let diff = tape.sub(xrep, cv);
                let sq = tape.mul(diff, diff);
                let d2 = tape.row_sum(sq);
                let neg = tape.scale(d2, -1.0 / tau);
                let row = tape.transpose(neg);
                let p = tape.softmax_rows(row);
                let idx = tape.constant(Tensor::column(
                    &(0..k).map(|i| i as f64).collect::<Vec<_>>(),
                ));
                tape.matmul(p, idx)
            }
        }
    }
}

/// Rule-based validity for typed regular-polygon clouds: every pairwise
/// distance must sit within `tau` (relative to the measured circumradius) of
/// a chord of the regular `n`-gon, and the two point types must alternate in
/// angular order around the centroid.
pub fn polygon_validity(space: &SpaceSpec, values: &[f64], tau: f64) -> bool {
    let pc = space.point_cloud.expect("validity rule is for point clouds");
    let n = pc.n;
    assert_eq!(pc.dim, 2, "polygon validity is planar");
    assert!(n >= 4 && n % 2 == 0, "alternating types need an even polygon");

    let centered = center_cloud(&values[..n * 2], n, 2);
    let radius = (0..n).map(|p| norm(&centered[p * 2..p * 2 + 2])).sum::<f64>() / n as f64;
    if radius < 1e-9 {
        return false;
    }

    // Chord lengths of the regular n-gon at the measured radius.
    let chords: Vec<f64> = (1..=n / 2)
        .map(|k| 2.0 * radius * num_traits::Float::sin(core::f64::consts::PI * k as f64 / n as f64))
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            let dx = centered[i * 2] - centered[j * 2];
            let dy = centered[i * 2 + 1] - centered[j * 2 + 1];
            let d = num_traits::Float::sqrt(dx * dx + dy * dy);
            let nearest = chords
                .iter()
                .map(|c| num_traits::Float::abs(d - c))
                .fold(f64::INFINITY, f64::min);
            if nearest > tau * radius {
                return false;
            }
        }
    }

    // Types must alternate when points are walked by angle.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let aa = num_traits::Float::atan2(centered[a * 2 + 1], centered[a * 2]);
        let ab = num_traits::Float::atan2(centered[b * 2 + 1], centered[b * 2]);
        aa.total_cmp(&ab)
    });
    let types: Vec<usize> = (0..n)
        .map(|p| {
            let block = &values[space.block_range(p)];
            let mut best = 0;
            for (i, v) in block.iter().enumerate() {
                if *v > block[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    (0..n).all(|i| types[order[i]] != types[order[(i + 1) % n]])
}

/// Fraction of sample rows passing [`polygon_validity`].
pub fn validity_rate(space: &SpaceSpec, samples: &[Vec<f64>], tau: f64) -> f64 {
    assert!(!samples.is_empty());
    let ok = samples.iter().filter(|v| polygon_validity(space, v, tau)).count();
    ok as f64 / samples.len() as f64
}

fn center_cloud(cont: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut out = cont[..n * dim].to_vec();
    for c in 0..dim {
        let mean: f64 = (0..n).map(|p| out[p * dim + c]).sum::<f64>() / n as f64;
        for p in 0..n {
            out[p * dim + c] -= mean;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    num_traits::Float::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::diff::check::fd_gradient;
    use crate::path::{one_hot, SpaceSpec};

    /// Regular n-gon at radius r, optionally rotated, with alternating types
    /// embedded as one-hot blocks.
    fn polygon(n: usize, r: f64, phase: f64) -> Vec<f64> {
        let mut v = Vec::new();
        for p in 0..n {
            let a = phase + 2.0 * core::f64::consts::PI * p as f64 / n as f64;
            v.push(r * num_traits::Float::cos(a));
            v.push(r * num_traits::Float::sin(a));
        }
        for p in 0..n {
            v.extend(one_hot(p % 2, 2));
        }
        v
    }

    #[test]
    fn w2_two_diracs_is_their_gap() {
        // Point masses at 0 and c have transport cost exactly |c|, for any
        // sample counts.
        let c = 2.75;
        let a = vec![0.0; 7];
        let b = vec![c; 3];
        assert!((w2_squared_1d(&a, &b) - c * c).abs() < 1e-12);
        assert!((w2_squared_1d(&b, &a) - c * c).abs() < 1e-12);
        assert_eq!(w2_squared_1d(&a, &a), 0.0);
    }

    #[test]
    fn w2_equal_counts_matches_sorted_pairing() {
        // {0,1} vs {0,2}: quantile gap is 0 on [0,1/2) and 1 on [1/2,1).
        assert!((w2_squared_1d(&[1.0, 0.0], &[2.0, 0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn w2_unequal_counts_union_grid() {
        // {0,1,2} vs {0,3}: pieces (1/3)*1^2 on [1/3,1/2) is... integrated by
        // hand: [0,1/3): 0; [1/3,1/2): (1-0)^2; [1/2,2/3): (1-3)^2;
        // [2/3,1): (2-3)^2  =>  1/6 + 4/6 + 1/3 = 7/6.
        let got = w2_squared_1d(&[0.0, 1.0, 2.0], &[0.0, 3.0]);
        assert!((got - 7.0 / 6.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn sliced_w2_detects_shift_and_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let shift = [3.0, -4.0]; // length 5
        let b: Vec<Vec<f64>> =
            a.iter().map(|v| vec![v[0] + shift[0], v[1] + shift[1]]).collect();

        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let d = sliced_w2(&a, &b, 2, 64, &mut r1);
        // Projected shift is 5*cos(angle); RMS over directions is 5/sqrt(2).
        let expect = 5.0 / num_traits::Float::sqrt(2.0);
        assert!((d - expect).abs() < 0.4, "{d} vs {expect}");

        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(d, sliced_w2(&a, &b, 2, 64, &mut r2));

        let mut r3 = ChaCha8Rng::seed_from_u64(9);
        assert!(sliced_w2(&a, &a, 2, 16, &mut r3) < 1e-12);
    }

    #[test]
    fn marginal_tv_hand_computed() {
        // Block 0: empirical [0.5, 0.5] vs [0.75, 0.25] => TV 0.25.
        // Block 1: empirical [1, 0] vs [0.5, 0.5] => TV 0.5 (worst).
        let decoded = vec![vec![0, 0], vec![1, 0]];
        let marginals = vec![vec![0.75, 0.25], vec![0.5, 0.5]];
        let tv = marginal_total_variation(&decoded, &marginals);
        assert!((tv - 0.5).abs() < 1e-15);
    }

    #[test]
    fn property_values_on_regular_hexagon() {
        let space = SpaceSpec::point_cloud(6, 2, 2).unwrap();
        let r = 1.3;
        let v = polygon(6, r, 0.4);

        let circ = Property::Circumradius.eval(&space, &v);
        assert!((circ - r).abs() < 1e-12);

        // Hexagon chords: 6 edges r, 6 diagonals r*sqrt(3), 3 diameters 2r
        // over 15 pairs: mean = (4 + 2*sqrt(3)) r / 5.
        let mpd = Property::MeanPairwiseDistance.eval(&space, &v);
        let expect = (4.0 + 2.0 * num_traits::Float::sqrt(3.0)) * r / 5.0;
        assert!((mpd - expect).abs() < 1e-12, "{mpd} vs {expect}");
    }

    #[test]
    fn nearest_center_picks_argmin_and_surrogate_approaches_it() {
        let space = SpaceSpec::continuous(2);
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                let a = core::f64::consts::PI * k as f64 / 2.0;
                vec![num_traits::Float::cos(a), num_traits::Float::sin(a)]
            })
            .collect();
        let prop = Property::NearestCenter { centers: centers.clone(), tau: 0.05 };
        let x = [0.1, 0.9]; // closest to center 1 at (0, 1)
        assert_eq!(prop.eval(&space, &x), 1.0);

        let mut tape = Tape::new();
        let xv = tape.leaf("x", Tensor::row(&x));
        let g = prop.graph(&mut tape, xv, &space);
        let soft = tape.value(g).unwrap().data[0];
        assert!((soft - 1.0).abs() < 1e-3, "soft argmin {soft}");
    }

    #[test]
    fn property_surrogate_gradients_match_finite_differences() {
        let space = SpaceSpec::point_cloud(4, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

        for prop in [
            Property::Circumradius,
            Property::MeanPairwiseDistance,
            Property::CoordinateSum,
        ] {
            let eval = |vals: &[f64]| {
                let mut tape = Tape::new();
                let x = tape.leaf("x", Tensor::row(vals));
                let g = prop.graph(&mut tape, x, &space);
                tape.value(g).unwrap().data[0]
            };
            let fd = fd_gradient(eval, &x0, 1e-6);

            let mut tape = Tape::new();
            let x = tape.leaf("x", Tensor::row(&x0));
            let g = prop.graph(&mut tape, x, &space);
            let grads = tape.backward(g).unwrap();
            let analytic = &crate::diff::leaf_gradients(&tape, &grads)[0].1.data;
            for (a, e) in analytic.iter().zip(&fd) {
                assert!((a - e).abs() < 1e-7, "{prop:?}: {a} vs {e}");
            }
            // Surrogate equals the exact value for these variants.
            let exact = prop.eval(&space, &x0);
            assert!((eval(&x0) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn validity_accepts_regular_and_rejects_broken() {
        let space = SpaceSpec::point_cloud(6, 2, 2).unwrap();
        let tau = 0.2;
        assert!(polygon_validity(&space, &polygon(6, 1.0, 0.0), tau));
        assert!(polygon_validity(&space, &polygon(6, 0.85, 2.1), tau));

        // One vertex shoved radially: distances break.
        let mut bent = polygon(6, 1.0, 0.0);
        bent[0] *= 1.6;
        bent[1] *= 1.6;
        assert!(!polygon_validity(&space, &bent, tau));

        // Swap two adjacent types: alternation breaks.
        let mut swapped = polygon(6, 1.0, 0.0);
        let (b0, b1) = (space.block_range(0), space.block_range(1));
        let t0: Vec<f64> = swapped[b0.clone()].to_vec();
        let t1: Vec<f64> = swapped[b1.clone()].to_vec();
        swapped[b0].copy_from_slice(&t1);
        swapped[b1].copy_from_slice(&t0);
        assert!(!polygon_validity(&space, &swapped, tau));

        let rate = validity_rate(
            &space,
            &[polygon(6, 1.0, 0.0), bent.clone(), polygon(6, 1.1, 0.3)],
            tau,
        );
        assert!((rate - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn validity_is_scale_and_rotation_blind() {
        let space = SpaceSpec::point_cloud(6, 2, 2).unwrap();
        for &(r, phase) in &[(0.2, 0.0), (5.0, 1.0), (1.0, -2.4)] {
            assert!(polygon_validity(&space, &polygon(6, r, phase), 0.2));
        }
    }
}
