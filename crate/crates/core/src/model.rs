//! Assembly of the full pre-training model and its losses.
//!
//! The encoder stacks configurable blocks of two temporal encoders followed
//! by one spatial encoder. A masked window flows through the stack into
//! final region embeddings, and a linear readout maps those back to feature
//! space for reconstruction. The cluster classifier runs beside the encoder
//! on the unmasked window; its probabilities drive the adaptive mask and are
//! pulled toward the (detached) routing assignments of the last block.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::features::TimeFeature;
use crate::mask::{Classifier, MaskPlan};
use crate::params::{ParamBank, ParamId, Session};
use crate::spatial::SpatialEncoder;
use crate::tape::Var;
use crate::temporal::{initial_embed, TemporalEncoder};
use crate::tensor::Tensor;

struct Block {
    temporal: Vec<TemporalEncoder>,
    spatial: SpatialEncoder,
}

/// The pre-training network: embeddings, encoder blocks, classifier, and
/// reconstruction readout. Parameters live in a [`ParamBank`]; the model
/// holds only their handles, so the optimizer can update the bank freely.
pub struct PretrainModel {
    region_embeds: ParamId,
    feat_embed: ParamId,
    blocks: Vec<Block>,
    classifier: Classifier,
    w_out: ParamId,
    b_out: ParamId,
    regions: usize,
    feat_dim: usize,
    cfg: TrainConfig,
}

/// Tape handles produced by one masked forward pass.
pub struct ForwardOut {
    /// Final region embeddings `(R, T, d)`.
    pub zeta: Var,
    /// Reconstruction `(R, T, F)`.
    pub pred: Var,
    /// Last block's merged cluster assignments `(T, clusters, R)`.
    pub merged: Var,
}

impl PretrainModel {
    /// Builds the model and a freshly initialized parameter bank.
    pub fn init<G: Rng>(
        cfg: &TrainConfig,
        regions: usize,
        feat_dim: usize,
        rng: &mut G,
    ) -> Result<(Self, ParamBank)> {
        cfg.validate()?;
        if regions == 0 || feat_dim == 0 {
            return Err(Error::Config(
                "model needs at least one region and one feature".into(),
            ));
        }
        let mut bank = ParamBank::new();
        let region_embeds =
            bank.add_uniform("region_embeds", &[regions, cfg.code_dim], rng);
        let feat_embed = bank.add_uniform("feat_embed", &[feat_dim, cfg.embed_dim], rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let temporal = (0..2)
                .map(|j| {
                    TemporalEncoder::init(
                        &mut bank,
                        &format!("block{b}.t{j}"),
                        cfg.embed_dim,
                        cfg.code_dim,
                        cfg.temporal_edges,
                        cfg.window_len,
                        rng,
                    )
                })
                .collect();
            let spatial = SpatialEncoder::init(
                &mut bank,
                &format!("block{b}.spatial"),
                cfg.embed_dim,
                cfg.code_dim,
                cfg.cluster_edges,
                cfg.highlevel_edges,
                regions,
                cfg.window_len,
                cfg.routing_iters,
                cfg.routing_norm,
                rng,
            );
            blocks.push(Block { temporal, spatial });
        }
        let classifier = Classifier::init(
            &mut bank,
            "classifier",
            feat_dim,
            cfg.embed_dim,
            cfg.code_dim,
            cfg.cluster_edges,
            rng,
        );
        let w_out = bank.add_uniform("readout.weight", &[cfg.embed_dim, feat_dim], rng);
        let b_out = bank.add_uniform("readout.bias", &[feat_dim], rng);
        Ok((
            PretrainModel {
                region_embeds,
                feat_embed,
                blocks,
                classifier,
                w_out,
                b_out,
                regions,
                feat_dim,
                cfg: cfg.clone(),
            },
            bank,
        ))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    /// Runs the encoder stack on a (possibly masked) window, returning the
    /// final embeddings and the last block's merged cluster assignments.
    pub fn encode(
        &self,
        s: &mut Session,
        x_norm: &Tensor,
        visible: &[f64],
        feats: &[TimeFeature],
    ) -> Result<(Var, Var)> {
        let embed = s.p(self.feat_embed);
        let re = s.p(self.region_embeds);
        let mut z = initial_embed(s, x_norm, visible, embed)?;
        let mut merged = None;
        for block in &self.blocks {
            for te in &block.temporal {
                z = te.forward(s, re, feats, z, self.cfg.leaky_slope)?;
            }
            let out = block.spatial.forward(s, re, feats, z, self.cfg.leaky_slope)?;
            z = out.psi;
            merged = Some(out.merged);
        }
        Ok((z, merged.expect("at least one block")))
    }

    /// Embedding of the unmasked window with the encoder's feature
    /// embedding — the raw-representation path used downstream.
    pub fn raw_embedding(&self, s: &mut Session, x_norm: &Tensor) -> Result<Var> {
        let visible = vec![1.0; x_norm.shape()[0] * x_norm.shape()[1]];
        let embed = s.p(self.feat_embed);
        initial_embed(s, x_norm, &visible, embed)
    }

    /// Linear readout from embeddings `(R, T, d)` to features `(R, T, F)`.
    pub fn readout(&self, s: &mut Session, zeta: Var) -> Result<Var> {
        let shape = s.tape.value(zeta).shape().to_vec();
        let (regions, slots, dim) = (shape[0], shape[1], shape[2]);
        let (w, b) = (s.p(self.w_out), s.p(self.b_out));
        let t = &mut s.tape;
        let flat = t.reshape(zeta, &[regions * slots, dim])?;
        let mixed = t.matmul(flat, w)?;
        let bias = t.reshape(b, &[1, self.feat_dim])?;
        let bias = t.broadcast_to(bias, &[regions * slots, self.feat_dim])?;
        let out = t.add(mixed, bias)?;
        t.reshape(out, &[regions, slots, self.feat_dim])
    }

    /// Classifier probabilities `(T, R, clusters)` for the unmasked window.
    pub fn predict_clusters(
        &self,
        s: &mut Session,
        feats: &[TimeFeature],
        x_norm: &Tensor,
    ) -> Result<Var> {
        let re = s.p(self.region_embeds);
        self.classifier
            .predict(s, re, feats, x_norm, self.cfg.leaky_slope)
    }

    /// Masked forward pass: encode under the plan's visibility and read the
    /// reconstruction out.
    pub fn forward_masked(
        &self,
        s: &mut Session,
        x_norm: &Tensor,
        plan: &MaskPlan,
        feats: &[TimeFeature],
    ) -> Result<ForwardOut> {
        let (zeta, merged) = self.encode(s, x_norm, plan.visible_factors(), feats)?;
        let pred = self.readout(s, zeta)?;
        Ok(ForwardOut { zeta, pred, merged })
    }

    /// Merged assignments aligned to classifier layout `(T, R, clusters)`.
    pub fn align_assignments(&self, s: &mut Session, merged: Var) -> Result<Var> {
        s.tape.permute(merged, &[0, 2, 1])
    }
}

/// Masked-reconstruction error: mean absolute deviation over masked entries
/// only, normalized by `R·T·F·mask_ratio` (the nominal masked count).
///
/// `mask` holds 1.0 at visible entries and 0.0 at masked ones, broadcast
/// over features.
pub fn reconstruction_loss(
    s: &mut Session,
    x_norm: &Tensor,
    pred: Var,
    mask: &Tensor,
    mask_ratio: f64,
) -> Result<Var> {
    if !(mask_ratio > 0.0) {
        return Err(Error::Contract(format!(
            "reconstruction loss needs a positive mask ratio, got {mask_ratio}"
        )));
    }
    if x_norm.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: x_norm.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let t = &mut s.tape;
    if t.value(pred).shape() != x_norm.shape() {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: t.value(pred).shape().to_vec(),
            rhs: x_norm.shape().to_vec(),
        });
    }
    let inverted = Tensor::new(
        mask.shape().to_vec(),
        mask.data().iter().map(|&m| 1.0 - m).collect(),
    )?;
    let weight = t.constant(inverted);
    let x = t.constant(x_norm.clone());
    let diff = t.sub(x, pred)?;
    let dev = t.abs(diff);
    let masked = t.mul(weight, dev)?;
    let total = t.sum_all(masked);
    Ok(t.scale(total, 1.0 / (x_norm.numel() as f64 * mask_ratio)))
}

/// `L = L_r + λ·L_kl`.
pub fn total_loss(s: &mut Session, recon: Var, kl: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Contract(format!(
            "loss weight must be nonnegative, got {lambda}"
        )));
    }
    let t = &mut s.tape;
    let weighted = t.scale(kl, lambda);
    t.add(recon, weighted)
}
