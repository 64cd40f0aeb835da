//! Equivariant posterior head for typed point clouds.
//!
//! Coordinates only ever move along difference vectors weighted by functions
//! of invariants (squared distances, type features, time), so predicted means
//! commute with rotations/reflections and translations of the input, and
//! type logits are invariant. Point identity enters nowhere — messages are
//! summed — so relabeling points permutes the outputs.
//!
//! Zero-initialized pair weights and type readout pin the initial posterior
//! to "means = current coordinates, uniform types", matching the dense head's
//! contract.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor, Var};
use crate::path::{SpaceSpec, State};

use super::{
    label_feature_rows, time_feature_rows, LabelEmbedding, PosteriorVars, TimeEmbedding,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivariantConfig {
    /// Width of per-point feature vectors.
    pub h_dim: usize,
    /// Width of pair messages.
    pub m_dim: usize,
    /// Message-passing rounds.
    pub rounds: usize,
    pub time: TimeEmbedding,
    pub label: Option<LabelEmbedding>,
}

impl Default for EquivariantConfig {
    fn default() -> Self {
        EquivariantConfig {
            h_dim: 64,
            m_dim: 64,
            rounds: 3,
            time: TimeEmbedding::default(),
            label: None,
        }
    }
}

#[derive(Debug)]
pub struct EquivariantHead {
    space: SpaceSpec,
    cfg: EquivariantConfig,
    params: ParamStore,
    n: usize,
    dim: usize,
    k: usize,
}

impl EquivariantHead {
    /// The space must be a typed point cloud: one categorical block per
    /// point, all of the same cardinality.
    pub fn new<R: Rng + ?Sized>(
        space: SpaceSpec,
        cfg: EquivariantConfig,
        rng: &mut R,
    ) -> Self {
        space.validate().expect("valid space");
        let pc = space.point_cloud.expect("equivariant head needs a point cloud");
        assert_eq!(
            space.categorical.len(),
            pc.n,
            "one categorical type block per point"
        );
        let k = space.categorical[0];
        assert!(
            space.categorical.iter().all(|&c| c == k),
            "all points share one type alphabet"
        );
        assert!(cfg.rounds > 0 && pc.n > 1);

        let mut params = ParamStore::new();
        let in_dim = k + cfg.time.dim();
        params.insert("in.w", super::he_normal(rng, in_dim, cfg.h_dim));
        params.insert("in.b", Tensor::zeros(1, cfg.h_dim));
        for r in 0..cfg.rounds {
            params.insert(
                &format!("round{r}.msg.w"),
                super::he_normal(rng, 2 * cfg.h_dim + 1, cfg.m_dim),
            );
            params.insert(&format!("round{r}.msg.b"), Tensor::zeros(1, cfg.m_dim));
            // Zero pair weights: coordinates are stationary at init.
            params.insert(&format!("round{r}.coord.w"), Tensor::zeros(cfg.m_dim, 1));
            params.insert(&format!("round{r}.coord.b"), Tensor::zeros(1, 1));
            params.insert(
                &format!("round{r}.upd.w"),
                super::he_normal(rng, cfg.h_dim + cfg.m_dim, cfg.h_dim),
            );
            params.insert(&format!("round{r}.upd.b"), Tensor::zeros(1, cfg.h_dim));
        }
        // Zero type readout: uniform class logits at init.
        params.insert("type.w", Tensor::zeros(cfg.h_dim, k));
        params.insert("type.b", Tensor::zeros(1, k));
        if let Some(le) = &cfg.label {
            params.insert("label.w", Tensor::zeros(le.dim(), cfg.h_dim));
        }

        EquivariantHead { n: pc.n, dim: pc.dim, k, space, cfg, params }
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn config(&self) -> &EquivariantConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn conditioned(&self) -> bool {
        self.cfg.label.is_some()
    }

    pub(super) fn graph(
        &self,
        tape: &mut Tape,
        states: &[State],
        labels: &[Option<f64>],
    ) -> PosteriorVars {
        let b = states.len();
        let (n, d, k) = (self.n, self.dim, self.k);
        let rows = b * n;
        assert!(states.iter().all(|s| s.dim() == self.space.total_dim()));

        // Coordinates, centered per cloud outside the tape (inputs carry no
        // gradient); the removed centroid is added back to the final means.
        let mut centered = Vec::with_capacity(rows * d);
        let mut com_rep = Vec::with_capacity(rows * d);
        for s in states {
            let coords = &s.values[..n * d];
            let mut com = alloc::vec![0.0; d];
            for p in 0..n {
                for c in 0..d {
                    com[c] += coords[p * d + c] / n as f64;
                }
            }
            for p in 0..n {
                for c in 0..d {
                    centered.push(coords[p * d + c] - com[c]);
                    com_rep.push(com[c]);
                }
            }
        }
        let mut coords = tape.constant(Tensor::new(centered, rows, d));
        let com_const = tape.constant(Tensor::new(com_rep, rows, d));

        // Per-point invariant inputs: type simplex values and time features.
        let temb = time_feature_rows(&self.cfg.time, states, n);
        let mut hin = Vec::with_capacity(rows * (k + temb.cols));
        for (i, s) in states.iter().enumerate() {
            for p in 0..n {
                let range = self.space.block_range(p);
                hin.extend_from_slice(&s.values[range]);
                hin.extend_from_slice(&temb.data[(i * n + p) * temb.cols..(i * n + p + 1) * temb.cols]);
            }
        }
        let hin = tape.constant(Tensor::new(hin, rows, k + temb.cols));

        let mut pre = {
            let w = self.leaf(tape, "in.w");
            let bias = self.leaf(tape, "in.b");
            let hw = tape.matmul(hin, w);
            tape.add_row_vec(hw, bias)
        };
        if let Some(le) = &self.cfg.label {
            let phi = tape.constant(label_feature_rows(le, labels, n));
            let wl = self.leaf(tape, "label.w");
            let lw = tape.matmul(phi, wl);
            pre = tape.add(pre, lw);
        }
        let mut h = tape.silu(pre);

        // Ordered pairs (i, j), i != j, within each cloud.
        let mut idx_i = Vec::with_capacity(b * n * (n - 1));
        let mut idx_j = Vec::with_capacity(b * n * (n - 1));
        for cloud in 0..b {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        idx_i.push(cloud * n + i);
                        idx_j.push(cloud * n + j);
                    }
                }
            }
        }
        let degree = (n - 1) as f64;

        for r in 0..self.cfg.rounds {
            let ci = tape.gather(coords, &idx_i);
            let cj = tape.gather(coords, &idx_j);
            let diff = tape.sub(ci, cj);
            let d2e = tape.mul(diff, diff);
            let d2 = tape.row_sum(d2e);

            let hi = tape.gather(h, &idx_i);
            let hj = tape.gather(h, &idx_j);
            let min = tape.concat_cols(&[hi, hj, d2]);
            let wm = self.leaf(tape, &format!("round{r}.msg.w"));
            let bm = self.leaf(tape, &format!("round{r}.msg.b"));
            let mw = tape.matmul(min, wm);
            let mb = tape.add_row_vec(mw, bm);
            let msg = tape.silu(mb);

            let wc = self.leaf(tape, &format!("round{r}.coord.w"));
            let bc = self.leaf(tape, &format!("round{r}.coord.b"));
            let pw = tape.matmul(msg, wc);
            let pair_w = tape.add_row_vec(pw, bc);
            let moved = tape.scale_rows(diff, pair_w);
            let agg_c = tape.scatter_add(moved, &idx_i, rows);
            let step = tape.scale(agg_c, 1.0 / degree);
            coords = tape.add(coords, step);

            let agg_m = tape.scatter_add(msg, &idx_i, rows);
            let mean_m = tape.scale(agg_m, 1.0 / degree);
            let cat = tape.concat_cols(&[h, mean_m]);
            let wu = self.leaf(tape, &format!("round{r}.upd.w"));
            let bu = self.leaf(tape, &format!("round{r}.upd.b"));
            let uw = tape.matmul(cat, wu);
            let ub = tape.add_row_vec(uw, bu);
            let upd = tape.silu(ub);
            h = tape.add(h, upd);
        }

        let wt = self.leaf(tape, "type.w");
        let bt = self.leaf(tape, "type.b");
        let tw = tape.matmul(h, wt);
        let logits_pts = tape.add_row_vec(tw, bt);

        let means_pts = tape.add(coords, com_const);
        // Row-major [B*N x d] is already cloud-major, so reshaping to one row
        // per cloud is free and matches the flat state layout.
        let cont_mean = tape.reshape(means_pts, b, n * d);
        let logits = tape.reshape(logits_pts, b, n * k);
        PosteriorVars { cont_mean: Some(cont_mean), logits: Some(logits) }
    }

    fn leaf(&self, tape: &mut Tape, name: &str) -> Var {
        tape.leaf(name, self.params.get(name).clone())
    }
}
