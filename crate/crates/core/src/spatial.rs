//! Spatial encoding by capsule-style cluster routing over a generated
//! region-to-cluster hypergraph.
//!
//! Region embeddings are squashed into capsule vectors, transferred toward
//! each cluster through the membership hypergraph, and assigned to clusters
//! by agreement-based dynamic routing. The routing logits are then merged
//! with the hypergraph memberships to form the final assignment weights, the
//! cluster embeddings take one high-level hypergraph pass that mixes
//! information across clusters and time, and the refined cluster embeddings
//! are propagated back to every region through a region-specific affine
//! transform with a residual connection.
//!
//! Written-as-stated normalization: routing weights normalize over the
//! region axis by default (`routing_norm = "regions"`), with a config switch
//! to the classic per-region normalization over clusters.

use rand::Rng;

use crate::config::RoutingNorm;
use crate::error::{Error, Result};
use crate::features::{
    conditioned_matrix, conditioned_vector, highlevel_hypergraph, spatial_hypergraph, TimeFeature,
    TimeMlp,
};
use crate::params::{ParamBank, ParamId, Session};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Tape axis the routing softmax normalizes, for `(T, clusters, regions)`
/// logits.
pub fn routing_axis(norm: RoutingNorm) -> usize {
    match norm {
        RoutingNorm::Regions => 2,
        RoutingNorm::Clusters => 1,
    }
}

/// Capsule embedding: `v = squash(Γ·V + bias)` per region-slot vector.
///
/// `gamma` is `(R, T, d)`; result has the same shape with every vector's
/// norm strictly below one.
pub fn capsule_embed(s: &mut Session, gamma: Var, v_mat: Var, v_bias: Var) -> Result<Var> {
    let shape = s.tape.value(gamma).shape().to_vec();
    let (regions, slots, dim) = (shape[0], shape[1], shape[2]);
    let t = &mut s.tape;
    let flat = t.reshape(gamma, &[regions * slots, dim])?;
    let mixed = t.matmul(flat, v_mat)?;
    let bias = t.reshape(v_bias, &[1, dim])?;
    let bias = t.broadcast_to(bias, &[regions * slots, dim])?;
    let mixed = t.add(mixed, bias)?;
    let squashed = t.squash_last(mixed)?;
    t.reshape(squashed, &[regions, slots, dim])
}

/// Information each region offers each cluster:
/// `v̄ = squash(H′ · v) ⊙ v`, elementwise over the embedding axis.
///
/// `v` is `(R, T, d)`, `membership` is `(T, clusters, R)`; the result is
/// `(T, clusters, R, d)`.
pub fn transfer_info(s: &mut Session, v: Var, membership: Var) -> Result<Var> {
    let vs = s.tape.value(v).shape().to_vec();
    let ms = s.tape.value(membership).shape().to_vec();
    let (regions, slots, dim) = (vs[0], vs[1], vs[2]);
    let clusters = ms[1];
    if ms != [slots, clusters, regions] {
        return Err(Error::ShapeMismatch {
            op: "transfer_info",
            lhs: vs,
            rhs: ms,
        });
    }
    let t = &mut s.tape;
    let v_by_slot = t.permute(v, &[1, 0, 2])?;
    let v4 = t.reshape(v_by_slot, &[slots, 1, regions, dim])?;
    let v4 = t.broadcast_to(v4, &[slots, clusters, regions, dim])?;
    let m4 = t.reshape(membership, &[slots, clusters, regions, 1])?;
    let m4 = t.broadcast_to(m4, &[slots, clusters, regions, dim])?;
    let scaled = t.mul(m4, v4)?;
    let squashed = t.squash_last(scaled)?;
    t.mul(squashed, v4)
}

/// Agreement-based dynamic routing.
///
/// Starting from zero logits, each iteration normalizes the logits into
/// weights, pools the transferred information into cluster embeddings, and
/// reinforces the logits by each region's agreement with the squashed
/// cluster embedding. Returns the final logits, the weights used in the last
/// pooling, and the last cluster embeddings `(T, clusters, d)`.
pub fn dynamic_routing(
    s: &mut Session,
    v: Var,
    transferred: Var,
    iterations: usize,
    norm: RoutingNorm,
) -> Result<(Var, Var, Var)> {
    if iterations == 0 {
        return Err(Error::Contract(
            "dynamic routing needs at least one iteration".into(),
        ));
    }
    let shape = s.tape.value(transferred).shape().to_vec();
    let (slots, clusters, regions, dim) = (shape[0], shape[1], shape[2], shape[3]);
    let axis = routing_axis(norm);

    let t = &mut s.tape;
    let v_by_slot = {
        let v3 = t.permute(v, &[1, 0, 2])?;
        let v4 = t.reshape(v3, &[slots, 1, regions, dim])?;
        t.broadcast_to(v4, &[slots, clusters, regions, dim])?
    };

    let mut logits = t.constant(Tensor::zeros(&[slots, clusters, regions]));
    let mut weights = logits;
    let mut pooled = logits;
    for _ in 0..iterations {
        weights = t.softmax(logits, axis)?;
        let w4 = t.reshape(weights, &[slots, clusters, regions, 1])?;
        let w4 = t.broadcast_to(w4, &[slots, clusters, regions, dim])?;
        let contrib = t.mul(w4, transferred)?;
        pooled = t.sum_axis(contrib, 2)?;
        let squashed = t.squash_last(pooled)?;
        let sq4 = t.reshape(squashed, &[slots, clusters, 1, dim])?;
        let sq4 = t.broadcast_to(sq4, &[slots, clusters, regions, dim])?;
        let agreement = t.mul(v_by_slot, sq4)?;
        let agreement = t.sum_axis(agreement, 3)?;
        logits = t.add(logits, agreement)?;
    }
    Ok((logits, weights, pooled))
}

/// Merges routing logits with hypergraph memberships into the final
/// assignment weights and pools the final cluster embeddings.
pub fn merge_weights(
    s: &mut Session,
    logits: Var,
    membership: Var,
    transferred: Var,
    norm: RoutingNorm,
) -> Result<(Var, Var)> {
    let shape = s.tape.value(transferred).shape().to_vec();
    let (slots, clusters, regions, dim) = (shape[0], shape[1], shape[2], shape[3]);
    let t = &mut s.tape;
    let combined = t.add(logits, membership)?;
    let merged = t.softmax(combined, routing_axis(norm))?;
    let m4 = t.reshape(merged, &[slots, clusters, regions, 1])?;
    let m4 = t.broadcast_to(m4, &[slots, clusters, regions, dim])?;
    let contrib = t.mul(m4, transferred)?;
    let pooled = t.sum_axis(contrib, 2)?;
    Ok((merged, pooled))
}

/// Cross-cluster pass: one hypergraph hop over all cluster-slot pairs with a
/// residual, squashed back onto the unit ball.
///
/// `pooled` is `(T, clusters, d)`; `highlevel` is `(edges, T·clusters)`.
pub fn cross_cluster(s: &mut Session, pooled: Var, highlevel: Var, slope: f64) -> Result<Var> {
    let ps = s.tape.value(pooled).shape().to_vec();
    let (slots, clusters, dim) = (ps[0], ps[1], ps[2]);
    let hs = s.tape.value(highlevel).shape().to_vec();
    if hs.len() != 2 || hs[1] != slots * clusters {
        return Err(Error::ShapeMismatch {
            op: "cross_cluster",
            lhs: ps,
            rhs: hs,
        });
    }
    let t = &mut s.tape;
    let flat = t.reshape(pooled, &[slots * clusters, dim])?;
    let up = t.matmul(highlevel, flat)?;
    let up = t.leaky_relu(up, slope);
    let back = t.permute(highlevel, &[1, 0])?;
    let down = t.matmul(back, up)?;
    let down = t.leaky_relu(down, slope);
    let summed = t.add(down, flat)?;
    let squashed = t.squash_last(summed)?;
    t.reshape(squashed, &[slots, clusters, dim])
}

/// Propagates refined cluster embeddings back to regions:
/// `Ψ = σ(Σ_i weights·ŝ·W_r + b_r + Γ)`.
///
/// `refined` is `(T, clusters, d)`, `weights` is `(T, clusters, R)`,
/// `w_r` is `(R, d, d)`, `b_r` is `(R, d)`, `gamma` is `(R, T, d)`.
pub fn propagate_back(
    s: &mut Session,
    refined: Var,
    weights: Var,
    w_r: Var,
    b_r: Var,
    gamma: Var,
    slope: f64,
) -> Result<Var> {
    let gs = s.tape.value(gamma).shape().to_vec();
    let (regions, slots, dim) = (gs[0], gs[1], gs[2]);
    let clusters = s.tape.value(refined).shape()[1];
    let t = &mut s.tape;

    let by_region = t.permute(weights, &[0, 2, 1])?;
    let w4 = t.reshape(by_region, &[slots, regions, clusters, 1])?;
    let w4 = t.broadcast_to(w4, &[slots, regions, clusters, dim])?;
    let r4 = t.reshape(refined, &[slots, 1, clusters, dim])?;
    let r4 = t.broadcast_to(r4, &[slots, regions, clusters, dim])?;
    let readback = t.mul(w4, r4)?;
    let readback = t.sum_axis(readback, 2)?;

    let by_region = t.permute(readback, &[1, 0, 2])?;
    let mixed = t.bmm(by_region, w_r)?;
    let bias = t.reshape(b_r, &[regions, 1, dim])?;
    let bias = t.broadcast_to(bias, &[regions, slots, dim])?;
    let mixed = t.add(mixed, bias)?;
    let summed = t.add(mixed, gamma)?;
    Ok(t.leaky_relu(summed, slope))
}

/// Everything a spatial encoder layer produces.
pub struct SpatialOut {
    /// Region embeddings `(R, T, d)` after cluster propagation.
    pub psi: Var,
    /// Merged assignment weights `(T, clusters, R)`.
    pub merged: Var,
}

/// One spatial encoder layer with its own hypergraph heads and capsule
/// parameters.
#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    mlp_member: TimeMlp,
    mlp_high: TimeMlp,
    member_base: ParamId,
    high_base: ParamId,
    v_mat: ParamId,
    v_bias: ParamId,
    w_out_base: ParamId,
    b_out_base: ParamId,
    embed_dim: usize,
    clusters: usize,
    regions: usize,
    window: usize,
    high_edges: usize,
    iterations: usize,
    norm: RoutingNorm,
}

impl SpatialEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        bank: &mut ParamBank,
        prefix: &str,
        embed_dim: usize,
        code_dim: usize,
        clusters: usize,
        high_edges: usize,
        regions: usize,
        window: usize,
        iterations: usize,
        norm: RoutingNorm,
        rng: &mut R,
    ) -> Self {
        SpatialEncoder {
            mlp_member: TimeMlp::init(bank, &format!("{prefix}.member_time"), code_dim, rng),
            mlp_high: TimeMlp::init(bank, &format!("{prefix}.high_time"), code_dim, rng),
            member_base: bank.add_uniform(
                format!("{prefix}.member_base"),
                &[code_dim, clusters * regions],
                rng,
            ),
            high_base: bank.add_uniform(
                format!("{prefix}.high_base"),
                &[code_dim, high_edges * clusters * window],
                rng,
            ),
            v_mat: bank.add_uniform(format!("{prefix}.v_mat"), &[embed_dim, embed_dim], rng),
            v_bias: bank.add_uniform(format!("{prefix}.v_bias"), &[embed_dim], rng),
            w_out_base: bank.add_uniform(
                format!("{prefix}.w_out_base"),
                &[code_dim, embed_dim * embed_dim],
                rng,
            ),
            b_out_base: bank.add_uniform(format!("{prefix}.b_out_base"), &[code_dim, embed_dim], rng),
            embed_dim,
            clusters,
            regions,
            window,
            high_edges,
            iterations,
            norm,
        }
    }

    /// Encodes `(R, T, d)` embeddings, returning new region embeddings and
    /// the merged cluster-assignment weights.
    pub fn forward(
        &self,
        s: &mut Session,
        region_embeds: Var,
        feats: &[TimeFeature],
        gamma: Var,
        slope: f64,
    ) -> Result<SpatialOut> {
        if feats.len() != self.window {
            return Err(Error::Contract(format!(
                "encoder built for window {}, got {} time features",
                self.window,
                feats.len()
            )));
        }
        let member_codes = self.mlp_member.codes(s, feats, slope)?;
        let member_base = s.p(self.member_base);
        let membership =
            spatial_hypergraph(s, member_codes, member_base, self.clusters, self.regions)?;

        let high_codes = self.mlp_high.codes(s, feats, slope)?;
        let high_base = s.p(self.high_base);
        let highlevel = highlevel_hypergraph(s, high_codes, high_base, self.high_edges)?;

        let (v_mat, v_bias) = (s.p(self.v_mat), s.p(self.v_bias));
        let v = capsule_embed(s, gamma, v_mat, v_bias)?;
        let transferred = transfer_info(s, v, membership)?;
        let (logits, _, _) = dynamic_routing(s, v, transferred, self.iterations, self.norm)?;
        let (merged, pooled) = merge_weights(s, logits, membership, transferred, self.norm)?;
        let refined = cross_cluster(s, pooled, highlevel, slope)?;

        let (w_out_base, b_out_base) = (s.p(self.w_out_base), s.p(self.b_out_base));
        let w_r = conditioned_matrix(s, region_embeds, w_out_base, self.embed_dim, self.embed_dim)?;
        let b_r = conditioned_vector(s, region_embeds, b_out_base)?;
        let psi = propagate_back(s, refined, merged, w_r, b_r, gamma, slope)?;
        Ok(SpatialOut { psi, merged })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SLOPE: f64 = 0.01;

    fn squash_vec(x: &[f64]) -> Vec<f64> {
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n <= 1e-30 {
            return vec![0.0; x.len()];
        }
        let k = n / (1.0 + n * n);
        x.iter().map(|v| v * k).collect()
    }

    #[test]
    fn capsule_embed_zero_input_zero_bias_is_zero() {
        let mut bank = ParamBank::new();
        bank.add("v_mat", Tensor::filled(&[2, 2], 0.5));
        bank.add("v_bias", Tensor::zeros(&[2]));
        let mut s = bank.session();
        let (vm, vb) = (
            s.p(bank.id_by_name("v_mat").unwrap()),
            s.p(bank.id_by_name("v_bias").unwrap()),
        );
        let gamma = s.tape.constant(Tensor::zeros(&[3, 2, 2]));
        let v = capsule_embed(&mut s, gamma, vm, vb).unwrap();
        assert!(s.tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transfer_with_unit_membership_and_unit_vector() {
        // membership weight 1 and ‖v‖ = 1 force v̄ = squash(v)⊙v = 0.5·(v⊙v)
        let bank = ParamBank::new();
        let mut s = bank.session();
        let v = s
            .tape
            .constant(Tensor::new(vec![1, 1, 2], vec![0.6, 0.8]).unwrap());
        let membership = s.tape.constant(Tensor::filled(&[1, 1, 1], 1.0));
        let vb = transfer_info(&mut s, v, membership).unwrap();
        let got = s.tape.value(vb);
        assert!((got.at(&[0, 0, 0, 0]) - 0.5 * 0.36).abs() < 1e-15);
        assert!((got.at(&[0, 0, 0, 1]) - 0.5 * 0.64).abs() < 1e-15);
    }

    #[test]
    fn transfer_matches_scalar_arithmetic() {
        let (m, vx, vy) = (0.3, 1.0, -2.0);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let v = s
            .tape
            .constant(Tensor::new(vec![1, 1, 2], vec![vx, vy]).unwrap());
        let membership = s.tape.constant(Tensor::filled(&[1, 1, 1], m));
        let vb = transfer_info(&mut s, v, membership).unwrap();
        let got = s.tape.value(vb);

        let sq = squash_vec(&[m * vx, m * vy]);
        assert!((got.at(&[0, 0, 0, 0]) - sq[0] * vx).abs() < 1e-15);
        assert!((got.at(&[0, 0, 0, 1]) - sq[1] * vy).abs() < 1e-15);
    }

    #[test]
    fn first_routing_iteration_weights_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (slots, clusters, regions, dim) = (1usize, 2usize, 3usize, 2usize);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let v = s
            .tape
            .constant(Tensor::uniform_init(&[regions, slots, dim], &mut rng));
        let vb = s.tape.constant(Tensor::uniform_init(
            &[slots, clusters, regions, dim],
            &mut rng,
        ));

        let (_, w, _) = dynamic_routing(&mut s, v, vb, 1, RoutingNorm::Regions).unwrap();
        for &x in s.tape.value(w).data() {
            assert!((x - 1.0 / regions as f64).abs() < 1e-15);
        }
        let (_, w, _) = dynamic_routing(&mut s, v, vb, 1, RoutingNorm::Clusters).unwrap();
        for &x in s.tape.value(w).data() {
            assert!((x - 1.0 / clusters as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_transfer_keeps_logits_zero_and_embeddings_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (slots, clusters, regions, dim) = (2usize, 2usize, 3usize, 2usize);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let v = s
            .tape
            .constant(Tensor::uniform_init(&[regions, slots, dim], &mut rng));
        let vb = s
            .tape
            .constant(Tensor::zeros(&[slots, clusters, regions, dim]));
        let (logits, _, pooled) = dynamic_routing(&mut s, v, vb, 3, RoutingNorm::Regions).unwrap();
        assert!(s.tape.value(logits).data().iter().all(|&x| x == 0.0));
        assert!(s.tape.value(pooled).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn routing_and_merge_match_plain_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (slots, clusters, regions, dim) = (1usize, 2usize, 2usize, 2usize);
        let v_t = Tensor::uniform_init(&[regions, slots, dim], &mut rng);
        let vb_t = Tensor::uniform_init(&[slots, clusters, regions, dim], &mut rng);
        let mem_t = Tensor::uniform_init(&[slots, clusters, regions], &mut rng);

        let bank = ParamBank::new();
        let mut s = bank.session();
        let v = s.tape.constant(v_t.clone());
        let vb = s.tape.constant(vb_t.clone());
        let mem = s.tape.constant(mem_t.clone());
        let (logits, weights, pooled) =
            dynamic_routing(&mut s, v, vb, 2, RoutingNorm::Regions).unwrap();
        let (merged, final_pooled) =
            merge_weights(&mut s, logits, mem, vb, RoutingNorm::Regions).unwrap();

        // independent plain-loop re-implementation
        let mut b = vec![vec![0.0f64; regions]; clusters];
        let mut c = vec![vec![0.0f64; regions]; clusters];
        let mut s_edge = vec![vec![0.0f64; dim]; clusters];
        for _ in 0..2 {
            for i in 0..clusters {
                let z: f64 = (0..regions).map(|r| b[i][r].exp()).sum();
                for r in 0..regions {
                    c[i][r] = b[i][r].exp() / z;
                }
            }
            for i in 0..clusters {
                for k in 0..dim {
                    s_edge[i][k] = (0..regions)
                        .map(|r| c[i][r] * vb_t.at(&[0, i, r, k]))
                        .sum();
                }
            }
            for i in 0..clusters {
                let sq = squash_vec(&s_edge[i]);
                for r in 0..regions {
                    let dot: f64 = (0..dim).map(|k| v_t.at(&[r, 0, k]) * sq[k]).sum();
                    b[i][r] += dot;
                }
            }
        }
        let mut cbar = vec![vec![0.0f64; regions]; clusters];
        for i in 0..clusters {
            let z: f64 = (0..regions)
                .map(|r| (b[i][r] + mem_t.at(&[0, i, r])).exp())
                .sum();
            for r in 0..regions {
                cbar[i][r] = (b[i][r] + mem_t.at(&[0, i, r])).exp() / z;
            }
        }

        for i in 0..clusters {
            for r in 0..regions {
                assert!((s.tape.value(logits).at(&[0, i, r]) - b[i][r]).abs() < 1e-12);
                assert!((s.tape.value(weights).at(&[0, i, r]) - c[i][r]).abs() < 1e-12);
                assert!((s.tape.value(merged).at(&[0, i, r]) - cbar[i][r]).abs() < 1e-12);
            }
            for k in 0..dim {
                assert!((s.tape.value(pooled).at(&[0, i, k]) - s_edge[i][k]).abs() < 1e-12);
                let want: f64 = (0..regions)
                    .map(|r| cbar[i][r] * vb_t.at(&[0, i, r, k]))
                    .sum();
                assert!((s.tape.value(final_pooled).at(&[0, i, k]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn merge_with_zero_membership_is_softmax_of_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let (slots, clusters, regions, dim) = (2usize, 3usize, 4usize, 2usize);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let logits_t = Tensor::uniform_init(&[slots, clusters, regions], &mut rng);
        let logits = s.tape.constant(logits_t);
        let zero_mem = s.tape.constant(Tensor::zeros(&[slots, clusters, regions]));
        let vb = s.tape.constant(Tensor::uniform_init(
            &[slots, clusters, regions, dim],
            &mut rng,
        ));
        let (merged, _) = merge_weights(&mut s, logits, zero_mem, vb, RoutingNorm::Regions).unwrap();
        let direct = s.tape.softmax(logits, 2).unwrap();
        for (a, b) in s
            .tape
            .value(merged)
            .data()
            .iter()
            .zip(s.tape.value(direct).data())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn merge_of_zero_logits_and_uniform_membership_is_uniform() {
        let (slots, clusters, regions, dim) = (1usize, 2usize, 5usize, 2usize);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let logits = s.tape.constant(Tensor::zeros(&[slots, clusters, regions]));
        let mem = s
            .tape
            .constant(Tensor::filled(&[slots, clusters, regions], 1.0 / 2.0));
        let vb = s
            .tape
            .constant(Tensor::zeros(&[slots, clusters, regions, dim]));
        let (merged, _) = merge_weights(&mut s, logits, mem, vb, RoutingNorm::Regions).unwrap();
        for &x in s.tape.value(merged).data() {
            assert!((x - 1.0 / regions as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_cluster_with_zero_highlevel_is_rowwise_squash() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let (slots, clusters, dim, edges) = (2usize, 3usize, 2usize, 2usize);
        let pooled_t = Tensor::uniform_init(&[slots, clusters, dim], &mut rng);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let pooled = s.tape.constant(pooled_t.clone());
        let high = s.tape.constant(Tensor::zeros(&[edges, slots * clusters]));
        let out = cross_cluster(&mut s, pooled, high, SLOPE).unwrap();
        let got = s.tape.value(out);
        for t in 0..slots {
            for i in 0..clusters {
                let row: Vec<f64> = (0..dim).map(|k| pooled_t.at(&[t, i, k])).collect();
                let sq = squash_vec(&row);
                for k in 0..dim {
                    assert!((got.at(&[t, i, k]) - sq[k]).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cross_cluster_outputs_stay_inside_unit_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let (slots, clusters, dim, edges) = (3usize, 4usize, 3usize, 2usize);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let pooled = s.tape.constant(Tensor::new(
            vec![slots, clusters, dim],
            (0..slots * clusters * dim)
                .map(|_| rng.random_range(-5.0..5.0))
                .collect(),
        )
        .unwrap());
        let high = s
            .tape
            .constant(Tensor::uniform_init(&[edges, slots * clusters], &mut rng));
        let out = cross_cluster(&mut s, pooled, high, SLOPE).unwrap();
        let got = s.tape.value(out);
        for t in 0..slots {
            for i in 0..clusters {
                let n: f64 = (0..dim)
                    .map(|k| got.at(&[t, i, k]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(n < 1.0, "norm {n}");
            }
        }
    }

    #[test]
    fn cross_cluster_matches_dense_oracle() {
        let (slots, clusters, dim, edges) = (1usize, 2usize, 2usize, 1usize);
        let pooled_t = Tensor::new(vec![slots, clusters, dim], vec![0.4, -0.2, 0.1, 0.7]).unwrap();
        let high_t = Tensor::new(vec![edges, 2], vec![0.5, -1.0]).unwrap();
        let bank = ParamBank::new();
        let mut s = bank.session();
        let pooled = s.tape.constant(pooled_t.clone());
        let high = s.tape.constant(high_t.clone());
        let out = cross_cluster(&mut s, pooled, high, SLOPE).unwrap();
        let got = s.tape.value(out);

        let leaky = |x: f64| if x > 0.0 { x } else { SLOPE * x };
        // up = σ(high · flat): one edge row
        let up: Vec<f64> = (0..dim)
            .map(|k| leaky(0.5 * pooled_t.at(&[0, 0, k]) + (-1.0) * pooled_t.at(&[0, 1, k])))
            .collect();
        for i in 0..clusters {
            let h = high_t.at(&[0, i]);
            let row: Vec<f64> = (0..dim)
                .map(|k| leaky(h * up[k]) + pooled_t.at(&[0, i, k]))
                .collect();
            let sq = squash_vec(&row);
            for k in 0..dim {
                assert!((got.at(&[0, i, k]) - sq[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn propagate_back_with_zero_weights_is_bias_residual_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (regions, slots, clusters, dim) = (2usize, 2usize, 2usize, 2usize);
        let gamma_t = Tensor::uniform_init(&[regions, slots, dim], &mut rng);
        let b_t = Tensor::uniform_init(&[regions, dim], &mut rng);
        let bank = ParamBank::new();
        let mut s = bank.session();
        let refined = s
            .tape
            .constant(Tensor::uniform_init(&[slots, clusters, dim], &mut rng));
        let weights = s.tape.constant(Tensor::zeros(&[slots, clusters, regions]));
        let w_r = s
            .tape
            .constant(Tensor::uniform_init(&[regions, dim, dim], &mut rng));
        let b_r = s.tape.constant(b_t.clone());
        let gamma = s.tape.constant(gamma_t.clone());
        let psi = propagate_back(&mut s, refined, weights, w_r, b_r, gamma, SLOPE).unwrap();
        let got = s.tape.value(psi);
        let leaky = |x: f64| if x > 0.0 { x } else { SLOPE * x };
        for r in 0..regions {
            for t in 0..slots {
                for k in 0..dim {
                    let want = leaky(b_t.at(&[r, k]) + gamma_t.at(&[r, t, k]));
                    assert!((got.at(&[r, t, k]) - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn propagate_back_single_cluster_unit_weight_oracle() {
        // a single cluster with weight 1 reduces to σ(ŝ·W + b + Γ)
        let (regions, slots, dim) = (1usize, 1usize, 2usize);
        let refined_t = Tensor::new(vec![slots, 1, dim], vec![0.3, -0.5]).unwrap();
        let w_t = Tensor::new(vec![regions, dim, dim], vec![1.0, 0.5, -0.25, 2.0]).unwrap();
        let b_t = Tensor::new(vec![regions, dim], vec![0.1, 0.2]).unwrap();
        let gamma_t = Tensor::new(vec![regions, slots, dim], vec![0.7, 0.4]).unwrap();

        let bank = ParamBank::new();
        let mut s = bank.session();
        let refined = s.tape.constant(refined_t);
        let weights = s.tape.constant(Tensor::filled(&[slots, 1, regions], 1.0));
        let w_r = s.tape.constant(w_t);
        let b_r = s.tape.constant(b_t);
        let gamma = s.tape.constant(gamma_t);
        let psi = propagate_back(&mut s, refined, weights, w_r, b_r, gamma, SLOPE).unwrap();
        let got = s.tape.value(psi);

        let leaky = |x: f64| if x > 0.0 { x } else { SLOPE * x };
        let want0 = leaky(0.3 * 1.0 + (-0.5) * (-0.25) + 0.1 + 0.7);
        let want1 = leaky(0.3 * 0.5 + (-0.5) * 2.0 + 0.2 + 0.4);
        assert!((got.at(&[0, 0, 0]) - want0).abs() < 1e-15);
        assert!((got.at(&[0, 0, 1]) - want1).abs() < 1e-15);
    }

    #[test]
    fn weights_normalize_along_the_chosen_axis_every_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let (slots, clusters, regions, dim) = (2usize, 3usize, 4usize, 2usize);
        for (norm, axis_len, check) in [
            (RoutingNorm::Regions, regions, 2usize),
            (RoutingNorm::Clusters, clusters, 1usize),
        ] {
            for iters in 1..=3usize {
                let bank = ParamBank::new();
                let mut s = bank.session();
                let v = s
                    .tape
                    .constant(Tensor::uniform_init(&[regions, slots, dim], &mut rng));
                let vb = s.tape.constant(Tensor::uniform_init(
                    &[slots, clusters, regions, dim],
                    &mut rng,
                ));
                let mem = s
                    .tape
                    .constant(Tensor::uniform_init(&[slots, clusters, regions], &mut rng));
                let (logits, weights, _) = dynamic_routing(&mut s, v, vb, iters, norm).unwrap();
                let (merged, _) = merge_weights(&mut s, logits, mem, vb, norm).unwrap();
                for which in [weights, merged] {
                    let wv = s.tape.value(which);
                    assert!(wv.data().iter().all(|&x| x >= 0.0));
                    let outer: usize = wv.numel() / axis_len;
                    // sum along `check` axis must be 1 for every lane
                    let shape = wv.shape().to_vec();
                    for flat in 0..outer {
                        let (a, b) = match check {
                            1 => (flat / shape[2], flat % shape[2]),
                            _ => (flat / shape[1], flat % shape[1]),
                        };
                        let total: f64 = (0..axis_len)
                            .map(|j| match check {
                                1 => wv.at(&[a, j, b]),
                                _ => wv.at(&[a, b, j]),
                            })
                            .sum();
                        assert!((total - 1.0).abs() < 1e-12, "lane sum {total}");
                    }
                }
            }
        }
    }

    #[test]
    fn planted_groups_route_to_distinct_clusters() {
        // two groups of regions with identical, mutually orthogonal
        // embeddings and a group-aligned membership prior: every region's
        // strongest merged weight must agree within its group and differ
        // across groups
        let (slots, clusters, regions, dim) = (1usize, 2usize, 4usize, 2usize);
        let mut v_t = Tensor::zeros(&[regions, slots, dim]);
        for r in 0..regions {
            let (i, val) = if r < 2 { (0, 0.6) } else { (1, 0.6) };
            v_t.data_mut()[r * dim + i] = val;
        }
        let mut mem_t = Tensor::zeros(&[slots, clusters, regions]);
        for r in 0..regions {
            let own = usize::from(r >= 2);
            for i in 0..clusters {
                mem_t.data_mut()[i * regions + r] = if i == own { 0.9 } else { 0.1 };
            }
        }

        let bank = ParamBank::new();
        let mut s = bank.session();
        let v = s.tape.constant(v_t);
        let mem = s.tape.constant(mem_t);
        let vb = transfer_info(&mut s, v, mem).unwrap();
        let (logits, _, _) = dynamic_routing(&mut s, v, vb, 2, RoutingNorm::Regions).unwrap();
        let (merged, _) = merge_weights(&mut s, logits, mem, vb, RoutingNorm::Regions).unwrap();
        let m = s.tape.value(merged);

        let assigned: Vec<usize> = (0..regions)
            .map(|r| {
                (0..clusters)
                    .max_by(|&a, &b| m.at(&[0, a, r]).partial_cmp(&m.at(&[0, b, r])).unwrap())
                    .unwrap()
            })
            .collect();
        assert_eq!(assigned[0], assigned[1]);
        assert_eq!(assigned[2], assigned[3]);
        assert_ne!(assigned[0], assigned[2]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        use crate::gradcheck::{EvalMode, EvalOut};

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut bank = ParamBank::new();
        let (dim, code, clusters, high, regions, window) =
            (2usize, 2usize, 2usize, 2usize, 3usize, 2usize);
        let enc = SpatialEncoder::init(
            &mut bank,
            "sp",
            dim,
            code,
            clusters,
            high,
            regions,
            window,
            2,
            RoutingNorm::Regions,
            &mut rng,
        );
        bank.add_uniform("region_embeds", &[regions, code], &mut rng);
        let gamma_t = Tensor::uniform_init(&[regions, window, dim], &mut rng);
        let feats = [
            TimeFeature { tod: 0.2, dow: 0.7 },
            TimeFeature { tod: 0.25, dow: 0.7 },
        ];

        let eval = |bank: &ParamBank, mode: EvalMode| {
            let mut s = bank.session();
            let re = s.p(bank.id_by_name("region_embeds").unwrap());
            let gamma = s.tape.constant(gamma_t.clone());
            let out = enc.forward(&mut s, re, &feats, gamma, SLOPE)?;
            let sq = s.tape.mul(out.psi, out.psi)?;
            let total = s.tape.sum_all(sq);
            let value = s.tape.value(total).as_scalar()?;
            let grads = match mode {
                EvalMode::ValueOnly => None,
                EvalMode::WithGrads => {
                    let g = s.tape.backward(total)?;
                    Some(s.bank_grads(&g, bank))
                }
            };
            Ok(EvalOut { value, grads })
        };
        let report = crate::gradcheck::finite_diff_check(&mut bank, 1e-6, eval).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
