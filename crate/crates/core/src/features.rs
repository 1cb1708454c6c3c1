//! Region/time-conditioned parameter generation.
//!
//! Instead of one weight matrix shared by every region and time slot, the
//! encoders draw their weights from small base tensors contracted against
//! per-slot time codes and per-region embeddings:
//!
//! * a two-layer MLP turns (time-of-day, day-of-week) into a code vector per
//!   slot, and contracting codes against a base tensor yields per-slot
//!   weights and biases;
//! * a free embedding row per region, contracted the same way, yields
//!   per-region hypergraphs and output transforms;
//! * softmax over the cluster axis of one such generated tensor produces the
//!   region-to-cluster membership hypergraph;
//! * mean-pooling the codes over the window produces the single high-level
//!   hypergraph used by the cross-cluster pass.
//!
//! Everything here is an ordinary tape computation, so gradients flow back
//! into the base tensors and embeddings.

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamBank, ParamId, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Normalized clock position of one time slot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeFeature {
    /// Slot-of-day divided by slots-per-day, in `[0, 1)`.
    pub tod: f64,
    /// Day index divided by 7, in `[0, 1)`.
    pub dow: f64,
}

/// Two-layer MLP head mapping (tod, dow) to a code vector per slot.
///
/// Each consumer that needs its own conditioning (temporal weights, spatial
/// hypergraph, high-level hypergraph, classifier) owns a separate head.
#[derive(Clone, Debug)]
pub struct TimeMlp {
    e_tod: ParamId,
    e_dow: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    code_dim: usize,
}

impl TimeMlp {
    pub fn init<R: Rng>(bank: &mut ParamBank, prefix: &str, code_dim: usize, rng: &mut R) -> Self {
        TimeMlp {
            e_tod: bank.add_uniform(format!("{prefix}.e_tod"), &[code_dim], rng),
            e_dow: bank.add_uniform(format!("{prefix}.e_dow"), &[code_dim], rng),
            w1: bank.add_uniform(format!("{prefix}.w1"), &[code_dim, code_dim], rng),
            b1: bank.add_uniform(format!("{prefix}.b1"), &[code_dim], rng),
            w2: bank.add_uniform(format!("{prefix}.w2"), &[code_dim, code_dim], rng),
            b2: bank.add_uniform(format!("{prefix}.b2"), &[code_dim], rng),
            code_dim,
        }
    }

    /// Code vectors for a run of slots, shape `(T, code_dim)`.
    pub fn codes(&self, s: &mut Session, feats: &[TimeFeature], slope: f64) -> Result<Var> {
        let slots = feats.len();
        let dim = self.code_dim;
        let (e_tod, e_dow) = (s.p(self.e_tod), s.p(self.e_dow));
        let (w1, b1) = (s.p(self.w1), s.p(self.b1));
        let (w2, b2) = (s.p(self.w2), s.p(self.b2));
        let t = &mut s.tape;

        let tod = t.constant(Tensor::new(
            vec![slots, 1],
            feats.iter().map(|f| f.tod).collect(),
        )?);
        let dow = t.constant(Tensor::new(
            vec![slots, 1],
            feats.iter().map(|f| f.dow).collect(),
        )?);

        // input row per slot: tod * e_tod + dow * e_dow
        let e_tod_row = t.reshape(e_tod, &[1, dim])?;
        let e_dow_row = t.reshape(e_dow, &[1, dim])?;
        let tod_full = t.broadcast_to(tod, &[slots, dim])?;
        let dow_full = t.broadcast_to(dow, &[slots, dim])?;
        let e_tod_full = t.broadcast_to(e_tod_row, &[slots, dim])?;
        let e_dow_full = t.broadcast_to(e_dow_row, &[slots, dim])?;
        let tod_term = t.mul(tod_full, e_tod_full)?;
        let dow_term = t.mul(dow_full, e_dow_full)?;
        let input = t.add(tod_term, dow_term)?;

        // two affine layers with a leaky rectifier between
        let pre1 = t.matmul(input, w1)?;
        let b1_row = t.reshape(b1, &[1, dim])?;
        let b1_full = t.broadcast_to(b1_row, &[slots, dim])?;
        let pre1 = t.add(pre1, b1_full)?;
        let hidden = t.leaky_relu(pre1, slope);

        let pre2 = t.matmul(hidden, w2)?;
        let b2_row = t.reshape(b2, &[1, dim])?;
        let b2_full = t.broadcast_to(b2_row, &[slots, dim])?;
        t.add(pre2, b2_full)
    }
}

/// Contracts per-item codes `(N, code_dim)` against a flat base
/// `(code_dim, rows*cols)` into one matrix per item, shape `(N, rows, cols)`.
pub fn conditioned_matrix(
    s: &mut Session,
    codes: Var,
    base: Var,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let n = s.tape.value(codes).shape()[0];
    let flat = s.tape.matmul(codes, base)?;
    s.tape.reshape(flat, &[n, rows, cols])
}

/// Contracts per-item codes against a flat base `(code_dim, len)` into one
/// vector per item, shape `(N, len)`.
pub fn conditioned_vector(s: &mut Session, codes: Var, base: Var) -> Result<Var> {
    s.tape.matmul(codes, base)
}

/// Per-slot region-to-cluster membership hypergraph, shape
/// `(T, clusters, regions)`, normalized over the cluster axis so every
/// region holds a distribution across clusters.
pub fn spatial_hypergraph(
    s: &mut Session,
    codes: Var,
    base: Var,
    clusters: usize,
    regions: usize,
) -> Result<Var> {
    let logits = conditioned_matrix(s, codes, base, clusters, regions)?;
    s.tape.softmax(logits, 1)
}

/// High-level hypergraph over cluster-slot pairs, shape
/// `(edges, clusters*T)`, generated from the mean code over the window.
pub fn highlevel_hypergraph(
    s: &mut Session,
    codes: Var,
    base: Var,
    edges: usize,
) -> Result<Var> {
    let shape = s.tape.value(codes).shape().to_vec();
    let (slots, dim) = (shape[0], shape[1]);
    let summed = s.tape.sum_axis(codes, 0)?;
    let pooled = s.tape.scale(summed, 1.0 / slots as f64);
    let pooled_row = s.tape.reshape(pooled, &[1, dim])?;
    let flat = s.tape.matmul(pooled_row, base)?;
    let width = s.tape.value(flat).numel() / edges;
    s.tape.reshape(flat, &[edges, width])
}

/// Validates a region index against the region count.
pub fn check_region_index(region: usize, regions: usize) -> Result<()> {
    if region >= regions {
        return Err(crate::error::Error::Contract(format!(
            "region index {region} out of range for {regions} regions"
        )));
    }
    Ok(())
}
