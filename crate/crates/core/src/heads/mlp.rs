//! Fully-connected posterior head.
//!
//! Sees the whole state as a flat vector, so it fits any product space but
//! carries no structural bias. Continuous means are predicted as residuals
//! on the current state; with the zero-initialized output layer the initial
//! posterior is exactly "mean = state, uniform categories".

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{ParamStore, Tape, Tensor};
use crate::path::{SpaceSpec, State};

use super::{
    label_feature_rows, time_feature_rows, LabelEmbedding, PosteriorVars, TimeEmbedding,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub time: TimeEmbedding,
    /// `Some` builds a control pathway into the first hidden layer.
    pub label: Option<LabelEmbedding>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: alloc::vec![128, 128],
            time: TimeEmbedding::default(),
            label: None,
        }
    }
}

#[derive(Debug)]
pub struct MlpHead {
    space: SpaceSpec,
    cfg: MlpConfig,
    params: ParamStore,
}

impl MlpHead {
    /// Initialize weights from `rng`. The label pathway and the output layer
    /// are zero-initialized and consume no randomness, so heads built with
    /// and without a control pathway from the same seed share identical
    /// hidden-layer weights.
    pub fn new<R: Rng + ?Sized>(space: SpaceSpec, cfg: MlpConfig, rng: &mut R) -> Self {
        assert!(!cfg.hidden.is_empty(), "at least one hidden layer");
        space.validate().expect("valid space");
        let d = space.total_dim();
        let out_dim = d; // means for continuous + logits matching block widths
        let mut params = ParamStore::new();

        let mut in_dim = d + cfg.time.dim();
        for (i, &h) in cfg.hidden.iter().enumerate() {
            params.insert(&format!("layer{i}.w"), super::he_normal(rng, in_dim, h));
            params.insert(&format!("layer{i}.b"), Tensor::zeros(1, h));
            in_dim = h;
        }
        params.insert("out.w", Tensor::zeros(in_dim, out_dim));
        params.insert("out.b", Tensor::zeros(1, out_dim));
        if let Some(le) = &cfg.label {
            params.insert("label.w", Tensor::zeros(le.dim(), cfg.hidden[0]));
        }
        MlpHead { space, cfg, params }
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn config(&self) -> &MlpConfig {
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
        let d = self.space.total_dim();
        let dc = self.space.n_continuous;
        let kt: usize = self.space.categorical.iter().sum();
        assert!(states.iter().all(|s| s.dim() == d), "state dimension mismatch");

        // [state values | time features] as one constant input block.
        let temb = time_feature_rows(&self.cfg.time, states, 1);
        let mut data = Vec::with_capacity(b * (d + temb.cols));
        for (i, s) in states.iter().enumerate() {
            data.extend_from_slice(&s.values);
            data.extend_from_slice(&temb.data[i * temb.cols..(i + 1) * temb.cols]);
        }
        let x = tape.constant(Tensor::new(data, b, d + temb.cols));

        let mut pre = {
            let w = tape.leaf("layer0.w", self.params.get("layer0.w").clone());
            let b0 = tape.leaf("layer0.b", self.params.get("layer0.b").clone());
            let xw = tape.matmul(x, w);
            tape.add_row_vec(xw, b0)
        };
        if let Some(le) = &self.cfg.label {
            let phi = tape.constant(label_feature_rows(le, labels, 1));
            let wl = tape.leaf("label.w", self.params.get("label.w").clone());
            let lw = tape.matmul(phi, wl);
            pre = tape.add(pre, lw);
        }
        let mut h = tape.silu(pre);

        for i in 1..self.cfg.hidden.len() {
            let w = tape.leaf(&format!("layer{i}.w"), self.params.get(&format!("layer{i}.w")).clone());
            let bi = tape.leaf(&format!("layer{i}.b"), self.params.get(&format!("layer{i}.b")).clone());
            let hw = tape.matmul(h, w);
            let hb = tape.add_row_vec(hw, bi);
            h = tape.silu(hb);
        }

        let wo = tape.leaf("out.w", self.params.get("out.w").clone());
        let bo = tape.leaf("out.b", self.params.get("out.b").clone());
        let ow = tape.matmul(h, wo);
        let out = tape.add_row_vec(ow, bo);

        let cont_mean = (dc > 0).then(|| {
            let delta = tape.slice_cols(out, 0, dc);
            let xc = tape.constant(Tensor::new(
                states.iter().flat_map(|s| s.values[..dc].iter().copied()).collect(),
                b,
                dc,
            ));
            tape.add(xc, delta)
        });
        let logits = (kt > 0).then(|| tape.slice_cols(out, dc, kt));
        PosteriorVars { cont_mean, logits }
    }
}
