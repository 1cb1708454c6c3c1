//! Pre-training loop: per-epoch cluster-aware masking, masked reconstruction
//! with an assignment-alignment penalty, gradient clipping, and retention of
//! the parameters that score best on a fixed validation mask set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{MaskMode, OptimizerKind, TrainConfig};
use crate::data::{split_windows, training_slice, Dataset};
use crate::error::{Error, Result};
use crate::features::TimeFeature;
use crate::mask::{
    adaptive_ratio, apply_mask, build_mask, cluster_labels, kl_alignment_loss, MaskPlan,
};
use crate::model::{reconstruction_loss, total_loss, PretrainModel};
use crate::norm::NormStats;
use crate::params::{ParamBank, ParamId};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Stream ids carving independent deterministic generators out of one seed.
const STREAM_INIT: u64 = 0;
const STREAM_VAL_MASKS: u64 = 1;
const STREAM_EPOCH_BASE: u64 = 2;

/// Named random stream derived from the run seed.
pub(crate) fn seed_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Scales `grads` in place so their joint L2 norm does not exceed `max`
/// (non-positive `max` disables clipping). Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if max > 0.0 && norm > max {
        let scale = max / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Parameter-update rule applied after each accumulated batch.
///
/// `Sgd` is the plain rule `θ ← θ − η·∂L/∂θ`; `Adam` keeps per-coordinate
/// first/second moment estimates with bias correction (β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8).
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: usize,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, bank: &ParamBank) -> Self {
        let moments: Vec<Tensor> = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => (0..bank.len())
                .map(|i| Tensor::zeros(bank.get(ParamId(i)).shape()))
                .collect(),
        };
        Optimizer {
            kind,
            lr,
            steps: 0,
            first: moments.clone(),
            second: moments,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Applies one update from gradients given in bank order. A non-finite
    /// gradient aborts the run, naming the offending parameter.
    pub fn step(&mut self, bank: &mut ParamBank, grads: &[Tensor]) -> Result<()> {
        if grads.len() != bank.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                bank.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for \"{}\"",
                    bank.name(ParamId(i))
                )));
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, g) in grads.iter().enumerate() {
                    let w = bank.get_mut(ParamId(i)).data_mut();
                    for (w, g) in w.iter_mut().zip(g.data()) {
                        *w -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let c1 = 1.0 - B1.powi(self.steps as i32);
                let c2 = 1.0 - B2.powi(self.steps as i32);
                for (i, g) in grads.iter().enumerate() {
                    let gd = g.data();
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let w = bank.get_mut(ParamId(i)).data_mut();
                    for j in 0..w.len() {
                        m[j] = B1 * m[j] + (1.0 - B1) * gd[j];
                        v[j] = B2 * v[j] + (1.0 - B2) * gd[j] * gd[j];
                        w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// One line of the per-epoch loss trace. All means are over train windows.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Mean masked-reconstruction error.
    pub recon: f64,
    /// Mean assignment-alignment divergence.
    pub alignment: f64,
    /// Mean combined loss.
    pub total: f64,
    /// Masked-reconstruction error on the fixed validation mask set (falls
    /// back to `recon` when the series is too short for a validation split).
    pub val_error: f64,
}

/// Result of a pre-training run.
pub struct TrainOutcome {
    /// The assembled encoder; its parameter handles index into `bank`.
    pub model: PretrainModel,
    /// Parameters restored to the best-validation checkpoint.
    pub bank: ParamBank,
    /// Normalizer fitted on the training split only.
    pub stats: NormStats,
    pub trace: Vec<EpochRecord>,
    /// Epoch whose parameters `bank` holds (0 means initialization).
    pub best_epoch: usize,
    pub best_val: f64,
}

struct ValFixture {
    x: Tensor,
    feats: Vec<TimeFeature>,
    plan: MaskPlan,
    mask: Tensor,
}

struct StepOut {
    recon: f64,
    alignment: f64,
    total: f64,
    grads: Vec<Tensor>,
}

fn non_finite_diagnostic(tape: &Tape) -> String {
    match tape.first_non_finite() {
        Some((idx, op, name, shape)) => match name {
            Some(n) => format!("first non-finite tensor: node {idx}, {op} \"{n}\", shape {shape:?}"),
            None => format!("first non-finite tensor: node {idx}, {op}, shape {shape:?}"),
        },
        None => "loss is non-finite yet every recorded tensor is finite".into(),
    }
}

/// One training window: predict soft assignments on the unmasked input, build
/// this window's mask from them, run the masked forward pass, and return the
/// losses plus parameter gradients.
fn train_step(
    model: &PretrainModel,
    bank: &ParamBank,
    cfg: &TrainConfig,
    x: &Tensor,
    feats: &[TimeFeature],
    epoch: usize,
    adaptive_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOut> {
    let mut s = bank.session();
    let q = model.predict_clusters(&mut s, feats, x)?;
    let labels = cluster_labels(s.tape.value(q));
    let plan = build_mask(
        &labels,
        model.regions(),
        cfg.window_len,
        cfg.mask_ratio,
        adaptive_fraction,
        epoch,
        rng,
    )?;
    let (_, mask) = apply_mask(x, &plan)?;
    let out = model.forward_masked(&mut s, x, &plan, feats)?;
    let recon = reconstruction_loss(&mut s, x, out.pred, &mask, cfg.mask_ratio)?;
    let target = model.align_assignments(&mut s, out.merged)?;
    let alignment = kl_alignment_loss(&mut s, target, q)?;
    let loss = total_loss(&mut s, recon, alignment, cfg.loss_balance)?;
    let total = s.tape.value(loss).as_scalar()?;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss diverged at epoch {epoch}; {}",
            non_finite_diagnostic(&s.tape)
        )));
    }
    let recon_v = s.tape.value(recon).as_scalar()?;
    let alignment_v = s.tape.value(alignment).as_scalar()?;
    let grads = s.tape.backward(loss)?;
    Ok(StepOut {
        recon: recon_v,
        alignment: alignment_v,
        total,
        grads: s.bank_grads(&grads, bank),
    })
}

/// Mean masked-reconstruction error over the fixed validation fixtures.
fn validation_error(
    model: &PretrainModel,
    bank: &ParamBank,
    fixtures: &[ValFixture],
    mask_ratio: f64,
) -> Result<Option<f64>> {
    if fixtures.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for f in fixtures {
        let mut s = bank.session();
        let out = model.forward_masked(&mut s, &f.x, &f.plan, &f.feats)?;
        let recon = reconstruction_loss(&mut s, &f.x, out.pred, &f.mask, mask_ratio)?;
        sum += s.tape.value(recon).as_scalar()?;
    }
    Ok(Some(sum / fixtures.len() as f64))
}

/// Runs the full pre-training procedure on `dataset`.
///
/// Per epoch: shuffle the training windows, and for each window predict soft
/// cluster assignments from the unmasked input, derive the mask (the adaptive
/// share grows as `(epoch/epochs)^gamma`; `mask_mode = "random"` keeps it at
/// zero), reconstruct the masked entries, and take an optimizer step per
/// batch of windows with global-norm gradient clipping. Validation masks are
/// drawn once up front so epoch scores are comparable; the parameters with
/// the lowest validation error are the ones returned.
///
/// `progress` receives each epoch record as it is produced.
pub fn pretrain<F>(dataset: &Dataset, cfg: &TrainConfig, mut progress: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    let split = split_windows(dataset.total_slots(), cfg.window_len, cfg.window_stride)?;
    let stats = NormStats::fit(&training_slice(dataset)?)?;
    let normalized = Dataset::new(
        stats.apply(&dataset.series)?,
        dataset.slots_per_day,
        dataset.start_dow,
    )?;
    let regions = dataset.regions();

    let mut init_rng = seed_stream(cfg.seed, STREAM_INIT);
    let (model, mut bank) = PretrainModel::init(cfg, regions, dataset.features(), &mut init_rng)?;

    // Validation masks are random (no adaptive share): the schedule under
    // evaluation must not influence its own yardstick.
    let mut val_rng = seed_stream(cfg.seed, STREAM_VAL_MASKS);
    let plain_labels = vec![0usize; regions * cfg.window_len];
    let mut fixtures = Vec::with_capacity(split.val.len());
    for &start in &split.val {
        let (x, feats) = normalized.window(start, cfg.window_len)?;
        let plan = build_mask(
            &plain_labels,
            regions,
            cfg.window_len,
            cfg.mask_ratio,
            0.0,
            0,
            &mut val_rng,
        )?;
        let (_, mask) = apply_mask(&x, &plan)?;
        fixtures.push(ValFixture { x, feats, plan, mask });
    }

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &bank);
    let mut best = bank.snapshot();
    let mut best_epoch = 0usize;
    let mut best_val = validation_error(&model, &bank, &fixtures, cfg.mask_ratio)?
        .unwrap_or(f64::INFINITY);
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let adaptive_fraction = match cfg.mask_mode {
            MaskMode::Adaptive => adaptive_ratio(epoch, cfg.epochs, cfg.adaptive_gamma)?,
            MaskMode::Random => 0.0,
        };
        let mut rng = seed_stream(cfg.seed, STREAM_EPOCH_BASE + epoch as u64);
        let mut order = split.train.clone();
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut acc: Vec<Tensor> = (0..bank.len())
                .map(|i| Tensor::zeros(bank.get(ParamId(i)).shape()))
                .collect();
            for &start in batch {
                let (x, feats) = normalized.window(start, cfg.window_len)?;
                let step = train_step(
                    &model,
                    &bank,
                    cfg,
                    &x,
                    &feats,
                    epoch,
                    adaptive_fraction,
                    &mut rng,
                )?;
                sums.0 += step.recon;
                sums.1 += step.alignment;
                sums.2 += step.total;
                for (a, g) in acc.iter_mut().zip(&step.grads) {
                    for (a, g) in a.data_mut().iter_mut().zip(g.data()) {
                        *a += g;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for a in acc.iter_mut() {
                for v in a.data_mut() {
                    *v *= inv;
                }
            }
            clip_global_norm(&mut acc, cfg.grad_clip);
            opt.step(&mut bank, &acc)?;
        }

        let n = split.train.len() as f64;
        let recon = sums.0 / n;
        let val_error = validation_error(&model, &bank, &fixtures, cfg.mask_ratio)?
            .unwrap_or(recon);
        if !val_error.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation error diverged at epoch {epoch}"
            )));
        }
        let record = EpochRecord {
            epoch,
            recon,
            alignment: sums.1 / n,
            total: sums.2 / n,
            val_error,
        };
        if val_error < best_val {
            best_val = val_error;
            best_epoch = epoch;
            best = bank.snapshot();
        }
        progress(&record);
        trace.push(record);
    }

    bank.restore(&best);
    Ok(TrainOutcome {
        model,
        bank,
        stats,
        trace,
        best_epoch,
        best_val,
    })
}
