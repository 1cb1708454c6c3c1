//! Cluster-aware adaptive masking, the cluster classifier, and the
//! assignment alignment loss.
//!
//! Each epoch the trainer predicts a cluster label for every (region, slot)
//! cell from the unmasked input, then builds a mask whose difficulty grows
//! over training: an adaptive share of the budget wipes out whole predicted
//! clusters (forcing reconstruction from other clusters), and the remainder
//! is masked uniformly at random. The classifier is trained to agree with
//! the routing assignments through a KL loss whose targets are detached, so
//! the encoder is never dragged toward the classifier.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{conditioned_matrix, conditioned_vector, TimeFeature, TimeMlp};
use crate::params::{ParamBank, ParamId, Session};
use crate::tape::Var;
use crate::temporal::initial_embed;
use crate::tensor::Tensor;

/// Epsilon floor inside the alignment-loss logarithms.
pub const KL_FLOOR: f64 = 1e-12;

/// How a cell ended up in its visibility state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellOrigin {
    /// Left visible.
    Visible,
    /// Masked by the cluster-exhaustive adaptive stage.
    Adaptive,
    /// Masked by the uniform random stage.
    Random,
}

impl CellOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            CellOrigin::Visible => "visible",
            CellOrigin::Adaptive => "adaptive",
            CellOrigin::Random => "random",
        }
    }
}

/// A complete masking decision for one window.
///
/// Cells are (region, slot) pairs indexed region-major; masking always
/// covers all features of a cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    regions: usize,
    slots: usize,
    visible: Vec<f64>,
    origin: Vec<CellOrigin>,
    /// Epoch the plan was built for.
    pub epoch: usize,
    /// Total mask ratio the budget was computed from.
    pub total_ratio: f64,
    /// Adaptive fraction of the budget.
    pub adaptive_fraction: f64,
}

impl MaskPlan {
    /// A plan that masks nothing (used by unmasked forward passes).
    pub fn all_visible(regions: usize, slots: usize) -> Self {
        MaskPlan {
            regions,
            slots,
            visible: vec![1.0; regions * slots],
            origin: vec![CellOrigin::Visible; regions * slots],
            epoch: 0,
            total_ratio: 0.0,
            adaptive_fraction: 0.0,
        }
    }

    /// One factor per cell: 1.0 visible, 0.0 masked.
    pub fn visible_factors(&self) -> &[f64] {
        &self.visible
    }

    pub fn origin(&self, region: usize, slot: usize) -> CellOrigin {
        self.origin[region * self.slots + slot]
    }

    pub fn masked_cells(&self) -> usize {
        self.visible.iter().filter(|&&v| v == 0.0).count()
    }

    pub fn cells_with_origin(&self, origin: CellOrigin) -> usize {
        self.origin.iter().filter(|&&o| o == origin).count()
    }

    /// Audit export: one `region,slot,origin` line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region,slot,origin\n");
        for r in 0..self.regions {
            for t in 0..self.slots {
                out.push_str(&format!("{r},{t},{}\n", self.origin(r, t).as_str()));
            }
        }
        out
    }
}

/// Adaptive share of the mask budget at a given epoch: `(e/E)^gamma`,
/// growing from 0 at epoch 0 to 1 at the final epoch.
pub fn adaptive_ratio(epoch: usize, max_epochs: usize, gamma: f64) -> Result<f64> {
    if max_epochs == 0 {
        return Err(Error::Contract(
            "adaptive ratio needs at least one epoch".into(),
        ));
    }
    if epoch > max_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} beyond schedule end {max_epochs}"
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::Contract(format!(
            "schedule exponent must be positive, got {gamma}"
        )));
    }
    Ok((epoch as f64 / max_epochs as f64).powf(gamma))
}

/// Per-cell cluster labels from classifier probabilities `(T, R, clusters)`,
/// region-major to match [`MaskPlan`] cell order. Ties break toward the
/// lowest cluster index.
pub fn cluster_labels(q: &Tensor) -> Vec<usize> {
    let (slots, regions, clusters) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let mut labels = vec![0usize; regions * slots];
    for t in 0..slots {
        for r in 0..regions {
            let mut best = 0;
            let mut best_val = f64::NEG_INFINITY;
            for i in 0..clusters {
                let v = q.at(&[t, r, i]);
                if v > best_val {
                    best_val = v;
                    best = i;
                }
            }
            labels[r * slots + t] = best;
        }
    }
    labels
}

/// Builds the mask for one window.
///
/// The budget is `m_t = round(cells · total_ratio)` whole cells. An adaptive
/// share `m_a = round(m_t · adaptive_fraction)` is spent cluster-exhaustively:
/// labels' categories are visited in random order until their cumulative
/// size reaches `m_a`; every earlier category is masked completely and the
/// last one partially, uniformly without replacement. The remaining
/// `m_t − m_a` cells are masked uniformly at random among still-visible
/// cells.
pub fn build_mask<G: Rng>(
    labels: &[usize],
    regions: usize,
    slots: usize,
    total_ratio: f64,
    adaptive_fraction: f64,
    epoch: usize,
    rng: &mut G,
) -> Result<MaskPlan> {
    if !(total_ratio > 0.0 && total_ratio < 1.0) {
        return Err(Error::Config(format!(
            "mask_ratio must lie in (0, 1), got {total_ratio}"
        )));
    }
    if !(0.0..=1.0).contains(&adaptive_fraction) {
        return Err(Error::Contract(format!(
            "adaptive fraction must lie in [0, 1], got {adaptive_fraction}"
        )));
    }
    let cells = regions * slots;
    if labels.len() != cells {
        return Err(Error::Contract(format!(
            "{} labels for {} cells",
            labels.len(),
            cells
        )));
    }

    let budget = (cells as f64 * total_ratio).round() as usize;
    let adaptive_budget = (budget as f64 * adaptive_fraction).round() as usize;

    let mut visible = vec![1.0; cells];
    let mut origin = vec![CellOrigin::Visible; cells];

    if adaptive_budget > 0 {
        let mut categories: Vec<usize> = {
            let mut present: Vec<usize> = labels.to_vec();
            present.sort_unstable();
            present.dedup();
            present
        };
        categories.shuffle(rng);

        let mut remaining = adaptive_budget;
        for cat in categories {
            let mut members: Vec<usize> =
                (0..cells).filter(|&c| labels[c] == cat).collect();
            if members.len() >= remaining {
                members.shuffle(rng);
                for &c in members.iter().take(remaining) {
                    visible[c] = 0.0;
                    origin[c] = CellOrigin::Adaptive;
                }
                remaining = 0;
                break;
            }
            for &c in &members {
                visible[c] = 0.0;
                origin[c] = CellOrigin::Adaptive;
            }
            remaining -= members.len();
        }
        debug_assert_eq!(remaining, 0, "labels cover every cell");
    }

    let random_budget = budget - adaptive_budget;
    if random_budget > 0 {
        let mut candidates: Vec<usize> =
            (0..cells).filter(|&c| visible[c] == 1.0).collect();
        candidates.shuffle(rng);
        for &c in candidates.iter().take(random_budget) {
            visible[c] = 0.0;
            origin[c] = CellOrigin::Random;
        }
    }

    Ok(MaskPlan {
        regions,
        slots,
        visible,
        origin,
        epoch,
        total_ratio,
        adaptive_fraction,
    })
}

/// Applies a plan to a normalized window `(R, T, F)`, returning the masked
/// window and the 0/1 mask tensor broadcast over features.
pub fn apply_mask(x_norm: &Tensor, plan: &MaskPlan) -> Result<(Tensor, Tensor)> {
    let shape = x_norm.shape();
    if shape.len() != 3 || shape[0] != plan.regions || shape[1] != plan.slots {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: shape.to_vec(),
            rhs: vec![plan.regions, plan.slots],
        });
    }
    let feats = shape[2];
    let mut masked = Vec::with_capacity(x_norm.numel());
    let mut mask = Vec::with_capacity(x_norm.numel());
    for (cell, chunk) in x_norm.data().chunks_exact(feats).enumerate() {
        let keep = plan.visible[cell];
        for &x in chunk {
            masked.push(keep * x);
            mask.push(keep);
        }
    }
    Ok((
        Tensor::new(shape.to_vec(), masked)?,
        Tensor::new(shape.to_vec(), mask)?,
    ))
}

/// Two-layer classifier with conditioned weights predicting each cell's
/// cluster from the unmasked normalized input.
#[derive(Clone, Debug)]
pub struct Classifier {
    embed: ParamId,
    mlp: TimeMlp,
    w_region_base: ParamId,
    b_region_base: ParamId,
    w_time_base: ParamId,
    b_time_base: ParamId,
    w_head: ParamId,
    b_head: ParamId,
    embed_dim: usize,
    clusters: usize,
}

impl Classifier {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        bank: &mut ParamBank,
        prefix: &str,
        feat_dim: usize,
        embed_dim: usize,
        code_dim: usize,
        clusters: usize,
        rng: &mut R,
    ) -> Self {
        Classifier {
            embed: bank.add_uniform(format!("{prefix}.embed"), &[feat_dim, embed_dim], rng),
            mlp: TimeMlp::init(bank, &format!("{prefix}.time"), code_dim, rng),
            w_region_base: bank.add_uniform(
                format!("{prefix}.w_region_base"),
                &[code_dim, embed_dim * embed_dim],
                rng,
            ),
            b_region_base: bank.add_uniform(
                format!("{prefix}.b_region_base"),
                &[code_dim, embed_dim],
                rng,
            ),
            w_time_base: bank.add_uniform(
                format!("{prefix}.w_time_base"),
                &[code_dim, embed_dim * embed_dim],
                rng,
            ),
            b_time_base: bank.add_uniform(
                format!("{prefix}.b_time_base"),
                &[code_dim, embed_dim],
                rng,
            ),
            w_head: bank.add_uniform(format!("{prefix}.w_head"), &[embed_dim, clusters], rng),
            b_head: bank.add_uniform(format!("{prefix}.b_head"), &[clusters], rng),
            embed_dim,
            clusters,
        }
    }

    /// Cluster probabilities `(T, R, clusters)` from the unmasked window.
    pub fn predict(
        &self,
        s: &mut Session,
        region_embeds: Var,
        feats: &[TimeFeature],
        x_norm: &Tensor,
        slope: f64,
    ) -> Result<Var> {
        let (regions, slots) = (x_norm.shape()[0], x_norm.shape()[1]);
        let dim = self.embed_dim;
        let all_visible = vec![1.0; regions * slots];
        let embed = s.p(self.embed);
        let e_p = initial_embed(s, x_norm, &all_visible, embed)?;

        // region-conditioned layer
        let w_region_base = s.p(self.w_region_base);
        let b_region_base = s.p(self.b_region_base);
        let w_r = conditioned_matrix(s, region_embeds, w_region_base, dim, dim)?;
        let b_r = conditioned_vector(s, region_embeds, b_region_base)?;
        let t = &mut s.tape;
        let mixed = t.bmm(e_p, w_r)?;
        let bias = t.reshape(b_r, &[regions, 1, dim])?;
        let bias = t.broadcast_to(bias, &[regions, slots, dim])?;
        let pre = t.add(mixed, bias)?;
        let hidden = t.leaky_relu(pre, slope);

        // time-conditioned layer
        let codes = self.mlp.codes(s, feats, slope)?;
        let w_time_base = s.p(self.w_time_base);
        let b_time_base = s.p(self.b_time_base);
        let w_t = conditioned_matrix(s, codes, w_time_base, dim, dim)?;
        let b_t = conditioned_vector(s, codes, b_time_base)?;
        let t = &mut s.tape;
        let by_slot = t.permute(hidden, &[1, 0, 2])?;
        let mixed = t.bmm(by_slot, w_t)?;
        let bias = t.reshape(b_t, &[slots, 1, dim])?;
        let bias = t.broadcast_to(bias, &[slots, regions, dim])?;
        let pre = t.add(mixed, bias)?;
        let q_state = t.leaky_relu(pre, slope);

        // linear head, probabilities over clusters
        let (w_head, b_head) = (s.p(self.w_head), s.p(self.b_head));
        let t = &mut s.tape;
        let flat = t.reshape(q_state, &[slots * regions, dim])?;
        let logits = t.matmul(flat, w_head)?;
        let head_bias = t.reshape(b_head, &[1, self.clusters])?;
        let head_bias = t.broadcast_to(head_bias, &[slots * regions, self.clusters])?;
        let logits = t.add(logits, head_bias)?;
        let logits = t.reshape(logits, &[slots, regions, self.clusters])?;
        t.softmax(logits, 2)
    }
}

/// KL divergence from the detached routing assignments to the classifier
/// probabilities: `Σ target·(ln target − ln q)`, summed over every cell and
/// cluster, with an epsilon floor inside the logarithms.
///
/// Targets are detached here, so no gradient flows to their producers.
pub fn kl_alignment_loss(s: &mut Session, target: Var, q: Var) -> Result<Var> {
    let t = &mut s.tape;
    if t.value(target).shape() != t.value(q).shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_alignment_loss",
            lhs: t.value(target).shape().to_vec(),
            rhs: t.value(q).shape().to_vec(),
        });
    }
    let frozen = t.detach(target);
    let log_t = t.ln_clamped(frozen, KL_FLOOR)?;
    let log_q = t.ln_clamped(q, KL_FLOOR)?;
    let diff = t.sub(log_t, log_q)?;
    let weighted = t.mul(frozen, diff)?;
    Ok(t.sum_all(weighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SLOPE: f64 = 0.01;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(adaptive_ratio(0, 10, 1.0).unwrap(), 0.0);
        assert_eq!(adaptive_ratio(10, 10, 1.0).unwrap(), 1.0);
        assert!((adaptive_ratio(5, 10, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((adaptive_ratio(5, 10, 2.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone() {
        for gamma in [0.5, 1.0, 2.0] {
            let mut prev = -1.0;
            for e in 0..=20 {
                let r = adaptive_ratio(e, 20, gamma).unwrap();
                assert!(r >= prev);
                assert!((0.0..=1.0).contains(&r));
                prev = r;
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(adaptive_ratio(0, 0, 1.0).is_err());
        assert!(adaptive_ratio(11, 10, 1.0).is_err());
        assert!(adaptive_ratio(1, 10, 0.0).is_err());
    }

    #[test]
    fn mask_budget_exact_at_quarter_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let labels: Vec<usize> = (0..1000).map(|_| rng.random_range(0..4usize)).collect();
        let plan = build_mask(&labels, 40, 25, 0.25, 0.5, 3, &mut rng).unwrap();
        assert_eq!(plan.masked_cells(), 250);
    }

    #[test]
    fn zero_adaptive_fraction_masks_purely_at_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let labels: Vec<usize> = (0..48).map(|_| rng.random_range(0..3usize)).collect();
        let plan = build_mask(&labels, 6, 8, 0.25, 0.0, 0, &mut rng).unwrap();
        assert_eq!(plan.masked_cells(), 12);
        assert_eq!(plan.cells_with_origin(CellOrigin::Adaptive), 0);
        assert_eq!(plan.cells_with_origin(CellOrigin::Random), 12);
    }

    #[test]
    fn full_adaptive_fraction_exhausts_single_category_exactly() {
        // one category holds exactly the whole budget: it must be fully
        // masked with nothing left for the random stage
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let labels = vec![0usize; 4];
        let plan = build_mask(&labels, 2, 2, 0.999, 1.0, 9, &mut rng).unwrap();
        assert_eq!(plan.masked_cells(), 4);
        assert_eq!(plan.cells_with_origin(CellOrigin::Adaptive), 4);
        assert_eq!(plan.cells_with_origin(CellOrigin::Random), 0);
    }

    #[test]
    fn adaptive_stage_prefers_whole_categories() {
        // two categories of 6 and 2 cells, adaptive budget 8 of 9: whichever
        // order is drawn, both categories fit inside the adaptive budget, so
        // 8 adaptive cells span exactly categories plus a partial one
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut labels = vec![0usize; 6];
        labels.extend([1usize; 6]);
        // budget: 12 cells, ratio 0.75 -> 9; adaptive 8/9
        let plan = build_mask(&labels, 3, 4, 0.75, 8.0 / 9.0, 1, &mut rng).unwrap();
        assert_eq!(plan.masked_cells(), 9);
        assert_eq!(plan.cells_with_origin(CellOrigin::Adaptive), 8);
        assert_eq!(plan.cells_with_origin(CellOrigin::Random), 1);
        // the first-drawn category of size 6 is fully adaptive-masked
        let adaptive_zero = (0..6)
            .filter(|&c| plan.origin(c / 4, c % 4) == CellOrigin::Adaptive)
            .count();
        let adaptive_one = (6..12)
            .filter(|&c| plan.origin(c / 4, c % 4) == CellOrigin::Adaptive)
            .count();
        assert!(
            (adaptive_zero == 6 && adaptive_one == 2)
                || (adaptive_zero == 2 && adaptive_one == 6)
        );
    }

    #[test]
    fn same_seed_reproduces_the_same_plan() {
        let labels: Vec<usize> = (0..60).map(|c| c % 5).collect();
        let a = build_mask(
            &labels,
            6,
            10,
            0.3,
            0.6,
            2,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        let b = build_mask(
            &labels,
            6,
            10,
            0.3,
            0.6,
            2,
            &mut ChaCha8Rng::seed_from_u64(99),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_outside_unit_interval_is_rejected() {
        let labels = vec![0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            build_mask(&labels, 2, 2, 0.0, 0.5, 0, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_mask(&labels, 2, 2, 1.0, 0.5, 0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn mask_budgets_hold_for_random_configurations(
            regions in 1usize..12,
            slots in 1usize..12,
            ratio in 0.05f64..0.95,
            adaptive in 0.0f64..1.0,
            categories in 1usize..6,
            seed in 0u64..u64::MAX,
        ) {
            let cells = regions * slots;
            let mut label_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let labels: Vec<usize> =
                (0..cells).map(|_| label_rng.random_range(0..categories)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = build_mask(&labels, regions, slots, ratio, adaptive, 1, &mut rng).unwrap();

            let budget = (cells as f64 * ratio).round() as usize;
            let adaptive_budget = (budget as f64 * adaptive).round() as usize;
            prop_assert_eq!(plan.masked_cells(), budget);
            prop_assert_eq!(plan.cells_with_origin(CellOrigin::Adaptive), adaptive_budget);
            prop_assert_eq!(
                plan.cells_with_origin(CellOrigin::Random),
                budget - adaptive_budget
            );

            let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
            let again = build_mask(&labels, regions, slots, ratio, adaptive, 1, &mut rng2).unwrap();
            prop_assert_eq!(plan, again);
        }
    }

    #[test]
    fn apply_mask_identity_zero_and_masked_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let x = Tensor::uniform_init(&[3, 4, 2], &mut rng);

        let open = MaskPlan::all_visible(3, 4);
        let (same, m) = apply_mask(&x, &open).unwrap();
        assert_eq!(same.data(), x.data());
        assert!(m.data().iter().all(|&v| v == 1.0));

        let labels = vec![0usize; 12];
        let plan = build_mask(&labels, 3, 4, 0.5, 0.5, 1, &mut rng).unwrap();
        let (masked, m) = apply_mask(&x, &plan).unwrap();
        for r in 0..3 {
            for t in 0..4 {
                let hidden = plan.origin(r, t) != CellOrigin::Visible;
                for f in 0..2 {
                    if hidden {
                        assert_eq!(masked.at(&[r, t, f]), 0.0);
                        assert_eq!(m.at(&[r, t, f]), 0.0);
                    } else {
                        assert_eq!(masked.at(&[r, t, f]), x.at(&[r, t, f]));
                        assert_eq!(m.at(&[r, t, f]), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn labels_come_from_strongest_cluster() {
        let q = Tensor::new(
            vec![1, 2, 3],
            vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3],
        )
        .unwrap();
        // region-major cells: region 0 slot 0 -> cluster 1; region 1 slot 0 -> cluster 0
        assert_eq!(cluster_labels(&q), vec![1, 0]);
    }

    fn classifier_fixture(seed: u64) -> (ParamBank, Classifier) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = ParamBank::new();
        let clf = Classifier::init(&mut bank, "clf", 2, 3, 2, 4, &mut rng);
        bank.add_uniform("region_embeds", &[3, 2], &mut rng);
        (bank, clf)
    }

    #[test]
    fn classifier_probabilities_normalize() {
        let (bank, clf) = classifier_fixture(70);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = Tensor::uniform_init(&[3, 2, 2], &mut rng);
        let feats = [
            TimeFeature { tod: 0.1, dow: 0.5 },
            TimeFeature { tod: 0.2, dow: 0.5 },
        ];
        let mut s = bank.session();
        let re = s.p(bank.id_by_name("region_embeds").unwrap());
        let q = clf.predict(&mut s, re, &feats, &x, SLOPE).unwrap();
        let qv = s.tape.value(q);
        assert_eq!(qv.shape(), &[2, 3, 4]);
        for t in 0..2 {
            for r in 0..3 {
                let total: f64 = (0..4).map(|i| qv.at(&[t, r, i])).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_classifier_weights_give_uniform_probabilities() {
        let (mut bank, clf) = classifier_fixture(72);
        for name in [
            "clf.w_region_base",
            "clf.b_region_base",
            "clf.w_time_base",
            "clf.b_time_base",
            "clf.w_head",
            "clf.b_head",
        ] {
            let shape = bank.get(bank.id_by_name(name).unwrap()).shape().to_vec();
            bank.set_by_name(name, Tensor::zeros(&shape)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let x = Tensor::uniform_init(&[3, 2, 2], &mut rng);
        let feats = [
            TimeFeature { tod: 0.1, dow: 0.5 },
            TimeFeature { tod: 0.9, dow: 0.5 },
        ];
        let mut s = bank.session();
        let re = s.p(bank.id_by_name("region_embeds").unwrap());
        let q = clf.predict(&mut s, re, &feats, &x, SLOPE).unwrap();
        for &v in s.tape.value(q).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn alignment_loss_zero_at_equality() {
        let bank = ParamBank::new();
        let mut s = bank.session();
        let p = Tensor::new(vec![2, 1, 2], vec![0.3, 0.7, 0.6, 0.4]).unwrap();
        let a = s.tape.constant(p.clone());
        let b = s.tape.constant(p);
        let loss = kl_alignment_loss(&mut s, a, b).unwrap();
        assert!(s.tape.value(loss).as_scalar().unwrap().abs() < 1e-14);
    }

    #[test]
    fn alignment_loss_hand_value() {
        let bank = ParamBank::new();
        let mut s = bank.session();
        let target = s
            .tape
            .constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let q = s
            .tape
            .constant(Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap());
        let loss = kl_alignment_loss(&mut s, target, q).unwrap();
        let got = s.tape.value(loss).as_scalar().unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn alignment_loss_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let bank = ParamBank::new();
        let mut s = bank.session();
        for _ in 0..100 {
            let normalize = |v: Vec<f64>| {
                let z: f64 = v.iter().sum();
                v.into_iter().map(|x| x / z).collect::<Vec<f64>>()
            };
            let t: Vec<f64> = normalize((0..3).map(|_| rng.random_range(0.01..1.0)).collect());
            let q: Vec<f64> = normalize((0..3).map(|_| rng.random_range(0.01..1.0)).collect());
            let tv = s.tape.constant(Tensor::new(vec![1, 1, 3], t).unwrap());
            let qv = s.tape.constant(Tensor::new(vec![1, 1, 3], q).unwrap());
            let loss = kl_alignment_loss(&mut s, tv, qv).unwrap();
            assert!(s.tape.value(loss).as_scalar().unwrap() >= -1e-12);
        }
    }

    #[test]
    fn alignment_loss_sends_no_gradient_to_target_producers() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut bank = ParamBank::new();
        bank.add_uniform("target_logits", &[1, 1, 3], &mut rng);
        bank.add_uniform("q_logits", &[1, 1, 3], &mut rng);
        let mut s = bank.session();
        let tl = s.p(bank.id_by_name("target_logits").unwrap());
        let ql = s.p(bank.id_by_name("q_logits").unwrap());
        let target = s.tape.softmax(tl, 2).unwrap();
        let q = s.tape.softmax(ql, 2).unwrap();
        let loss = kl_alignment_loss(&mut s, target, q).unwrap();
        let grads = s.tape.backward(loss).unwrap();
        let bg = s.bank_grads(&grads, &bank);
        assert!(
            bg[0].data().iter().all(|&g| g == 0.0),
            "target producers must stay gradient-free"
        );
        assert!(bg[1].data().iter().any(|&g| g != 0.0));
    }
}
