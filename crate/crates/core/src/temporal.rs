//! Initial signal embedding and temporal hypergraph encoding.
//!
//! The masked, normalized signal window is first lifted into embedding space
//! by a feature embedding matrix. Each temporal encoder layer then runs a
//! two-stage hypergraph propagation along the time axis of every region —
//! slots to hyperedges and back, with a leaky rectifier after each hop — and
//! finishes with a per-slot affine transform (weights generated from the
//! slot's time code) plus a residual connection to the layer input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{conditioned_matrix, conditioned_vector, TimeFeature, TimeMlp};
use crate::params::{ParamBank, ParamId, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Embeds a masked, normalized window `(R, T, F)` into `(R, T, d)`.
///
/// `visible` holds one factor per `(region, slot)` cell — 1.0 where the cell
/// is visible, 0.0 where it is masked — applied across all features before
/// the embedding matmul, so fully masked cells embed to zero.
pub fn initial_embed(
    s: &mut Session,
    x_norm: &Tensor,
    visible: &[f64],
    embed: Var,
) -> Result<Var> {
    if x_norm.rank() != 3 {
        return Err(Error::Contract(format!(
            "initial_embed expects a (regions, slots, features) window, got {:?}",
            x_norm.shape()
        )));
    }
    x_norm.ensure_finite("normalized input window")?;
    let (regions, slots, feats) = (x_norm.shape()[0], x_norm.shape()[1], x_norm.shape()[2]);
    if visible.len() != regions * slots {
        return Err(Error::Contract(format!(
            "visibility has {} cells, window has {}",
            visible.len(),
            regions * slots
        )));
    }
    let embed_shape = s.tape.value(embed).shape().to_vec();
    if embed_shape.len() != 2 || embed_shape[0] != feats {
        return Err(Error::ShapeMismatch {
            op: "initial_embed",
            lhs: x_norm.shape().to_vec(),
            rhs: embed_shape,
        });
    }
    let dim = embed_shape[1];

    let mut masked = Vec::with_capacity(x_norm.numel());
    for (cell, chunk) in x_norm.data().chunks_exact(feats).enumerate() {
        let keep = visible[cell];
        masked.extend(chunk.iter().map(|&x| keep * x));
    }
    let masked = s
        .tape
        .constant(Tensor::new(vec![regions * slots, feats], masked)?);
    let flat = s.tape.matmul(masked, embed)?;
    s.tape.reshape(flat, &[regions, slots, dim])
}

/// Two-stage hypergraph propagation over the time axis, per region:
/// slots → hyperedges → slots, with a leaky rectifier after each hop.
///
/// `h` is `(R, edges, T)`, `e` is `(R, T, d)`; the result has e's shape.
pub fn hypergraph_propagate(s: &mut Session, h: Var, e: Var, slope: f64) -> Result<Var> {
    let t = &mut s.tape;
    let up = t.bmm(h, e)?;
    let up = t.leaky_relu(up, slope);
    let h_t = t.permute(h, &[0, 2, 1])?;
    let down = t.bmm(h_t, up)?;
    Ok(t.leaky_relu(down, slope))
}

/// Per-slot affine transform with residual: `σ(Ē·W_t + b_t + E)`.
///
/// `propagated` and `e` are `(R, T, d)`; `w_t` is `(T, d, d)`, `b_t` is
/// `(T, d)`. The affine weights vary by slot, so the batch axis is time.
pub fn slot_affine_residual(
    s: &mut Session,
    propagated: Var,
    w_t: Var,
    b_t: Var,
    e: Var,
    slope: f64,
) -> Result<Var> {
    let shape = s.tape.value(e).shape().to_vec();
    let (regions, slots, dim) = (shape[0], shape[1], shape[2]);
    let t = &mut s.tape;
    let by_slot = t.permute(propagated, &[1, 0, 2])?;
    let mixed = t.bmm(by_slot, w_t)?;
    let bias = t.reshape(b_t, &[slots, 1, dim])?;
    let bias = t.broadcast_to(bias, &[slots, regions, dim])?;
    let mixed = t.add(mixed, bias)?;
    let e_by_slot = t.permute(e, &[1, 0, 2])?;
    let summed = t.add(mixed, e_by_slot)?;
    let activated = t.leaky_relu(summed, slope);
    t.permute(activated, &[1, 0, 2])
}

/// One temporal encoder layer with its own time-code head and base tensors.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    mlp: TimeMlp,
    w_base: ParamId,
    b_base: ParamId,
    h_base: ParamId,
    embed_dim: usize,
    edges: usize,
    window: usize,
}

impl TemporalEncoder {
    pub fn init<R: Rng>(
        bank: &mut ParamBank,
        prefix: &str,
        embed_dim: usize,
        code_dim: usize,
        edges: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        TemporalEncoder {
            mlp: TimeMlp::init(bank, &format!("{prefix}.time"), code_dim, rng),
            w_base: bank.add_uniform(
                format!("{prefix}.w_base"),
                &[code_dim, embed_dim * embed_dim],
                rng,
            ),
            b_base: bank.add_uniform(format!("{prefix}.b_base"), &[code_dim, embed_dim], rng),
            h_base: bank.add_uniform(format!("{prefix}.h_base"), &[code_dim, edges * window], rng),
            embed_dim,
            edges,
            window,
        }
    }

    /// Encodes `(R, T, d)` embeddings into `(R, T, d)`.
    pub fn forward(
        &self,
        s: &mut Session,
        region_embeds: Var,
        feats: &[TimeFeature],
        e: Var,
        slope: f64,
    ) -> Result<Var> {
        if feats.len() != self.window {
            return Err(Error::Contract(format!(
                "encoder built for window {}, got {} time features",
                self.window,
                feats.len()
            )));
        }
        let codes = self.mlp.codes(s, feats, slope)?;
        let w_base = s.p(self.w_base);
        let b_base = s.p(self.b_base);
        let h_base = s.p(self.h_base);
        let w_t = conditioned_matrix(s, codes, w_base, self.embed_dim, self.embed_dim)?;
        let b_t = conditioned_vector(s, codes, b_base)?;
        let h_r = conditioned_matrix(s, region_embeds, h_base, self.edges, self.window)?;
        let propagated = hypergraph_propagate(s, h_r, e, slope)?;
        slot_affine_residual(s, propagated, w_t, b_t, e, slope)
    }
}
