//! Posterior heads: networks mapping a noisy state (and optionally a control
//! value) to the parameters of a factorized endpoint posterior.
//!
//! Both heads emit the same thing — a Gaussian mean per continuous coordinate
//! and logits per categorical factor — so training, sampling, and guidance
//! are head-agnostic. The endpoint velocity only ever consumes the posterior
//! *mean*, which is exact for interpolants linear in the endpoint.
//!
//! Output layers are zero-initialized, pinning the initial posterior to
//! "mean = current state, uniform categories"; tests rely on this contract.

mod egnn;
mod mlp;

pub use egnn::{EquivariantConfig, EquivariantHead};
pub use mlp::{MlpConfig, MlpHead};

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{leaf_gradients, DiffError, ParamStore, Tape, Tensor, Var};
use crate::path::{interpolate, Coupling, SpaceSpec, State};

/// Declared (not learned) posterior scale: `sigma_t = sigma_base * (1 - t)`.
///
/// Positive for every training or sampling time because times are clamped
/// below one; shrinks to zero at the data end so late guidance corrections
/// fade out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_base: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { sigma_base: 1.0 }
    }
}

impl NoiseSchedule {
    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma_base * (1.0 - t)
    }

    pub fn variance(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        s * s
    }
}

/// Sinusoidal time features `[sin(pi 2^k t), cos(pi 2^k t)]`, k < n_freqs.
/// Computed outside the tape; time is never differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub n_freqs: usize,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding { n_freqs: 6 }
    }
}

impl TimeEmbedding {
    pub fn dim(&self) -> usize {
        2 * self.n_freqs
    }

    pub fn write(&self, t: f64, out: &mut Vec<f64>) {
        let mut f = core::f64::consts::PI;
        for _ in 0..self.n_freqs {
            out.push(num_traits::Float::sin(f * t));
            out.push(num_traits::Float::cos(f * t));
            f *= 2.0;
        }
    }
}

/// Control-value features `[1, s*y, sin(pi s y), sin(2 pi s y), ...]`.
///
/// The leading indicator distinguishes "conditioned on y = 0" from "no
/// condition": a masked sample contributes an all-zero row instead of these
/// features, so masked forward passes are bit-identical to a head that never
/// saw a label. The scale is irrational by default so integer-valued labels
/// do not land on sine roots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedding {
    pub n_freqs: usize,
    pub scale: f64,
}

impl Default for LabelEmbedding {
    fn default() -> Self {
        // Golden-ratio conjugate: keeps integer labels off the lattice of
        // sine zeros.
        LabelEmbedding { n_freqs: 4, scale: 0.618_033_988_749_895 }
    }
}

impl LabelEmbedding {
    pub fn dim(&self) -> usize {
        2 + self.n_freqs
    }

    pub fn write(&self, y: f64, out: &mut Vec<f64>) {
        out.push(1.0);
        out.push(self.scale * y);
        let mut f = core::f64::consts::PI * self.scale;
        for _ in 0..self.n_freqs {
            out.push(num_traits::Float::sin(f * y));
            f *= 2.0;
        }
    }
}

/// Graph handles for a batch posterior: continuous means are `B x Dc`,
/// logits are `B x (sum of cardinalities)` in block order. Either can be
/// absent when the space has no such part.
pub struct PosteriorVars {
    pub cont_mean: Option<Var>,
    pub logits: Option<Var>,
}

/// A posterior network. Variants share one calling convention; everything
/// downstream is written against this enum.
#[derive(Debug)]
pub enum Head {
    Mlp(MlpHead),
    Equivariant(EquivariantHead),
}

impl Head {
    pub fn space(&self) -> &SpaceSpec {
        match self {
            Head::Mlp(h) => h.space(),
            Head::Equivariant(h) => h.space(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Head::Mlp(h) => h.params(),
            Head::Equivariant(h) => h.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Head::Mlp(h) => h.params_mut(),
            Head::Equivariant(h) => h.params_mut(),
        }
    }

    /// Whether the head has a control pathway.
    pub fn conditioned(&self) -> bool {
        match self {
            Head::Mlp(h) => h.conditioned(),
            Head::Equivariant(h) => h.conditioned(),
        }
    }

    /// Build the posterior graph for a batch of states. Each state carries
    /// its own time; `labels[i]` is `None` for a masked/unconditioned sample.
    /// Panics if a label is passed to an unconditioned head.
    pub fn posterior_graph(
        &self,
        tape: &mut Tape,
        states: &[State],
        labels: &[Option<f64>],
    ) -> PosteriorVars {
        assert_eq!(states.len(), labels.len(), "one label slot per state");
        assert!(
            self.conditioned() || labels.iter().all(|l| l.is_none()),
            "label passed to an unconditioned head"
        );
        match self {
            Head::Mlp(h) => h.graph(tape, states, labels),
            Head::Equivariant(h) => h.graph(tape, states, labels),
        }
    }

    /// Forward-only posterior mean in embedded coordinates: continuous means
    /// followed by per-block class probabilities. This vector is the
    /// conditional expectation of the endpoint, ready for the endpoint
    /// velocity.
    pub fn posterior_mean_batch(
        &self,
        states: &[State],
        labels: &[Option<f64>],
    ) -> Result<Vec<Vec<f64>>, DiffError> {
        let space = self.space().clone();
        let mut tape = Tape::new();
        let post = self.posterior_graph(&mut tape, states, labels);
        let b = states.len();
        let dc = space.n_continuous;
        let kt: usize = space.categorical.iter().sum();

        let probs = match post.logits {
            Some(logits) => {
                // Blockwise softmax: each factor normalizes independently.
                let mut parts: Vec<Var> = Vec::new();
                let mut off = 0;
                for &k in &space.categorical {
                    let lj = tape.slice_cols(logits, off, k);
                    parts.push(tape.softmax_rows(lj));
                    off += k;
                }
                let cat = tape.concat_cols(&parts);
                Some(tape.value(cat)?.clone())
            }
            None => None,
        };
        let means = match post.cont_mean {
            Some(m) => Some(tape.value(m)?.clone()),
            None => None,
        };

        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mut row = Vec::with_capacity(dc + kt);
            if let Some(m) = &means {
                row.extend((0..dc).map(|c| m.at(i, c)));
            }
            if let Some(p) = &probs {
                row.extend((0..kt).map(|c| p.at(i, c)));
            }
            out.push(row);
        }
        Ok(out)
    }

    pub fn posterior_mean(
        &self,
        state: &State,
        label: Option<f64>,
    ) -> Result<Vec<f64>, DiffError> {
        Ok(self
            .posterior_mean_batch(core::slice::from_ref(state), &[label])?
            .remove(0))
    }
}

/// Scalar loss graph plus its continuous / categorical components.
pub struct LossVars {
    pub total: Var,
    pub continuous: Option<Var>,
    pub categorical: Option<Var>,
}

/// Negative log-likelihood of the endpoints under the predicted posterior,
/// averaged over the batch.
///
/// Continuous factors score under `N(mean, sigma_t^2 I)` including the
/// normalizer, so the reported value is a true NLL; categorical factors score
/// the log-probability of the target vertex. Interpolation to `x_t` happens
/// here, from the couplings and the supplied times.
pub fn nll_loss_graph(
    head: &Head,
    tape: &mut Tape,
    batch: &[Coupling],
    ts: &[f64],
    schedule: &NoiseSchedule,
) -> LossVars {
    assert_eq!(batch.len(), ts.len());
    assert!(!batch.is_empty());
    let space = head.space().clone();
    let b = batch.len();
    let dc = space.n_continuous;

    let mut states = Vec::with_capacity(b);
    let mut labels = Vec::with_capacity(b);
    for (c, &t) in batch.iter().zip(ts) {
        states.push(interpolate(&c.x0, &c.x1, t).expect("coupling endpoints share a space"));
        labels.push(if head.conditioned() { c.label } else { None });
    }
    let post = head.posterior_graph(tape, &states, &labels);

    let mut continuous = None;
    if let Some(mean) = post.cont_mean {
        let x1c = Tensor::new(
            batch.iter().flat_map(|c| c.x1.values[..dc].iter().copied()).collect(),
            b,
            dc,
        );
        let x1c = tape.constant(x1c);
        let err = tape.sub(mean, x1c);
        let sq = tape.mul(err, err);
        let weights =
            Tensor::column(&ts.iter().map(|&t| 0.5 / schedule.variance(t)).collect::<Vec<_>>());
        let wv = tape.constant(weights);
        let weighted = tape.scale_rows(sq, wv);
        let s = tape.sum_all(weighted);
        // Normalizers carry no gradient; added as a constant so the value is
        // the exact Gaussian NLL.
        let log_norm: f64 = ts
            .iter()
            .map(|&t| {
                dc as f64
                    * (num_traits::Float::ln(schedule.sigma(t))
                        + 0.5 * num_traits::Float::ln(2.0 * core::f64::consts::PI))
            })
            .sum();
        let with_norm = tape.add_scalar(s, log_norm);
        continuous = Some(tape.scale(with_norm, 1.0 / b as f64));
    }

    let mut categorical = None;
    if let Some(logits) = post.logits {
        // The endpoint's categorical blocks are one-hot, so multiplying by
        // them and summing picks out each target's log-probability.
        let mut picked: Option<Var> = None;
        let mut off = 0;
        for (j, &k) in space.categorical.iter().enumerate() {
            let lj = tape.slice_cols(logits, off, k);
            let lp = tape.log_softmax_rows(lj);
            let range = space.block_range(j);
            let target = Tensor::new(
                batch.iter().flat_map(|c| c.x1.values[range.clone()].iter().copied()).collect(),
                b,
                k,
            );
            let tv = tape.constant(target);
            let hit = tape.mul(lp, tv);
            let s = tape.sum_all(hit);
            picked = Some(match picked {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
            off += k;
        }
        let total_logp = picked.expect("at least one categorical block");
        categorical = Some(tape.scale(total_logp, -1.0 / b as f64));
    }

    let total = match (continuous, categorical) {
        (Some(c), Some(k)) => tape.add(c, k),
        (Some(c), None) => c,
        (None, Some(k)) => k,
        (None, None) => unreachable!("space has no factors"),
    };
    LossVars { total, continuous, categorical }
}

/// Run backward from a loss and add each leaf gradient into the store.
/// Returns the loss value.
pub fn backprop_into(
    head: &mut Head,
    tape: &mut Tape,
    loss: Var,
) -> Result<f64, DiffError> {
    let value = tape.value(loss)?.data[0];
    let grads = tape.backward(loss)?;
    let pairs: Vec<(alloc::string::String, Tensor)> = leaf_gradients(tape, &grads)
        .into_iter()
        .map(|(n, t)| (alloc::string::String::from(n), t.clone()))
        .collect();
    let params = head.params_mut();
    for (name, grad) in &pairs {
        params.accumulate_grad(name, grad);
    }
    Ok(value)
}

// ---- helpers shared by head implementations ----

/// `N(0, sqrt(2 / fan_in))` weights; fan-in is the row count because inputs
/// multiply from the left.
pub(crate) fn he_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let std = num_traits::Float::sqrt(2.0 / rows as f64);
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(data, rows, cols)
}

/// Time-feature rows for a batch, each state's features repeated
/// `rows_per_state` times (per-point broadcasting for clouds).
pub(crate) fn time_feature_rows(
    emb: &TimeEmbedding,
    states: &[State],
    rows_per_state: usize,
) -> Tensor {
    let mut data = Vec::with_capacity(states.len() * rows_per_state * emb.dim());
    for s in states {
        let mut row = Vec::with_capacity(emb.dim());
        emb.write(s.time, &mut row);
        for _ in 0..rows_per_state {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(data, states.len() * rows_per_state, emb.dim())
}

/// Label-feature rows; masked samples get all-zero rows.
pub(crate) fn label_feature_rows(
    emb: &LabelEmbedding,
    labels: &[Option<f64>],
    rows_per_state: usize,
) -> Tensor {
    let mut data = Vec::with_capacity(labels.len() * rows_per_state * emb.dim());
    for l in labels {
        let mut row = vec![0.0; 0];
        match l {
            Some(y) => emb.write(*y, &mut row),
            None => row.resize(emb.dim(), 0.0),
        }
        for _ in 0..rows_per_state {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(data, labels.len() * rows_per_state, emb.dim())
}
