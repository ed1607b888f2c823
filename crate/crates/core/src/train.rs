//! Training engine: SGD-with-momentum and AdamW, a cosine learning-rate
//! schedule, and the four operations every experiment is assembled from
//! (encoder pretraining, linear/MLP probing, full finetuning, and
//! distillation), all running through one shared instrumented loop.
//!
//! The loop is written so that distillation with a pure task objective
//! (mixing weight 0, no synthetic samples) replays finetuning exactly,
//! parameter bit for parameter bit: both modes draw the same batches,
//! apply the same augmentation with the same RNG stream, and the convex
//! loss combination at weight 0 *is* the task node, not a rescaled copy.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_augmentation, sample_batch, AugBatch, AugmentationSpec, AugmentedDataset,
    LabeledDataset, Provenance, SlotRef,
};
use crate::error::{Error, Result};
use crate::losses::{
    argmax_rows, combine, dkd_loss, hard_label_kd, kd_loss, task_loss, LossConfig, LossKind,
};
use crate::nn::{EncoderSpec, HeadKind, HeadSpec, Model, PretrainedEncoder};
use crate::tensor::{NodeId, Tape, Tensor};

/// RNG stream for batch sampling and augmentation, disjoint from the
/// streams the data generator and the mixers use.
const ENGINE_STREAM: u64 = 6;

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptKind {
    SgdMomentum,
    AdamW,
}

/// Flat optimizer description; `momentum` applies to SGD only, `betas`
/// and `eps` to AdamW only.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub kind: OptKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            kind: OptKind::AdamW,
            lr: 1e-3,
            weight_decay: 1e-4,
            momentum: 0.9,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is deliberately allowed: a zero-rate run is the
        // cheapest way to assert that nothing else mutates the model.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({b1}, {b2})"
            )));
        }
        if self.eps <= 0.0 || self.eps.is_nan() {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

enum SlotState {
    Sgd { v: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
}

/// Stateful optimizer over a fixed list of parameter tensors. State is
/// allocated lazily on the first step so the caller never has to
/// pre-declare shapes.
pub struct Optimizer {
    spec: OptimizerSpec,
    state: Vec<SlotState>,
    /// AdamW bias-correction step count (1-based after the first step).
    t: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Result<Optimizer> {
        spec.validate()?;
        Ok(Optimizer {
            spec,
            state: Vec::new(),
            t: 0,
        })
    }

    fn init_state(&mut self, grads: &[Vec<f64>]) {
        for g in grads {
            let zeros = vec![0.0; g.len()];
            self.state.push(match self.spec.kind {
                OptKind::SgdMomentum => SlotState::Sgd { v: zeros },
                OptKind::AdamW => SlotState::Adam {
                    m: zeros.clone(),
                    v: zeros,
                },
            });
        }
    }

    /// One update over all parameter tensors with the per-step rate
    /// `lr_t` from the schedule. `step` is the global step index,
    /// reported when a non-finite gradient aborts the run.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Vec<f64>],
        lr_t: f64,
        step: usize,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.state.is_empty() {
            self.init_state(grads);
        }
        if self.state.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state holds {} tensors, step got {}",
                self.state.len(),
                params.len()
            )));
        }
        for g in grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step });
            }
        }
        let wd = self.spec.weight_decay;
        match self.spec.kind {
            OptKind::SgdMomentum => {
                let mu = self.spec.momentum;
                for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.state) {
                    let SlotState::Sgd { v } = st else {
                        return Err(Error::Contract("optimizer kind changed mid-run".into()));
                    };
                    for ((pv, &gv), vv) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                        // Decay folds into the gradient (classic L2
                        // coupling), so it passes through momentum.
                        let eff = gv + wd * *pv;
                        *vv = mu * *vv + eff;
                        *pv -= lr_t * *vv;
                    }
                }
            }
            OptKind::AdamW => {
                self.t += 1;
                let (b1, b2) = self.spec.betas;
                let eps = self.spec.eps;
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.state) {
                    let SlotState::Adam { m, v } = st else {
                        return Err(Error::Contract("optimizer kind changed mid-run".into()));
                    };
                    for (((pv, &gv), mv), vv) in
                        p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        // Decoupled decay: applied directly to the
                        // parameter, not through the moments.
                        *pv -= lr_t * (mhat / (vhat.sqrt() + eps)) + lr_t * wd * *pv;
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
#[derive(Default)]
pub enum Scheduler {
    #[default]
    Cosine,
    Constant,
}


/// Half-cosine decay from `lr0` at step 0 to exactly 0 at
/// `total_steps`: lr0 * 0.5 * (1 + cos(pi * step / total_steps)).
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * frac).cos())
}

// ---------------------------------------------------------------------------
// Run configuration and outcome
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub scheduler: Scheduler,
    pub loss: LossConfig,
    pub seed: u64,
    /// Synthetic samples flow into the distillation term.
    pub use_synthetic_for_kd: bool,
    /// Labeled synthetic samples additionally flow into the task term.
    pub use_synthetic_for_task: bool,
    pub augmentation: AugmentationSpec,
    /// Global-norm gradient clip threshold; absent means no clipping.
    pub grad_clip: Option<f64>,
    /// Exact half/half batch composition instead of per-slot coin flips.
    pub strict_batches: bool,
    /// Record a full-model checksum after every optimizer step.
    pub trace_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            batch_size: 32,
            optimizer: OptimizerSpec::default(),
            scheduler: Scheduler::Cosine,
            loss: LossConfig::default(),
            seed: 0,
            use_synthetic_for_kd: true,
            use_synthetic_for_task: false,
            augmentation: AugmentationSpec::default(),
            grad_clip: None,
            strict_batches: false,
            trace_params: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        if let Some(c) = self.grad_clip {
            if c <= 0.0 || c.is_nan() {
                return Err(Error::Config(format!(
                    "grad_clip must be positive when set, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
    /// Mean per-step task-loss value (0 when the objective has none).
    pub task_loss: f64,
    /// Mean per-step distillation-loss value (0 when there is none).
    pub kd_loss: f64,
    pub val_accuracy: f64,
}

/// Counters that make the routing contracts checkable from outside:
/// tests assert on these instead of trusting the loop.
#[derive(Debug, Clone, Default)]
pub struct Instrumentation {
    /// Synthetic samples whose loss contribution included the task term.
    pub synthetic_in_task: usize,
    /// Synthetic samples that entered the distillation term.
    pub synthetic_in_kd: usize,
    /// Ground-truth targets consumed by the loss path; stays 0 for a
    /// label-free objective.
    pub label_reads: usize,
    /// Synthetic rows that received a Mixup partner (must stay 0).
    pub mixup_violations: usize,
    /// Batches where teacher and student saw different bytes (must stay 0).
    pub batch_hash_mismatches: usize,
    /// Full-model checksum after every step, when tracing is on.
    pub param_trace: Vec<u64>,
    /// Teacher checksum never moved during the run (vacuously true
    /// without a teacher).
    pub teacher_constant: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub instr: Instrumentation,
}

/// Top-1 accuracy of the model on a labeled dataset; argmax ties go to
/// the lowest class index.
pub fn evaluate_accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let logits = model.forward_eval(&ds.features_matrix())?;
    let pred = argmax_rows(&logits);
    let hits = pred
        .iter()
        .zip(ds.samples.iter())
        .filter(|(p, s)| Some(**p) == s.label)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

// ---------------------------------------------------------------------------
// The shared loop
// ---------------------------------------------------------------------------

fn hash_bits(data: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// What one batch contributed to the objective, for logging and
/// instrumentation.
struct BatchTerms {
    loss_node: NodeId,
    task_val: f64,
    kd_val: f64,
    synthetic_in_task: usize,
    synthetic_in_kd: usize,
    label_reads: usize,
}

/// Per-batch loss assembly. Returns the scalar loss node plus the raw
/// task/distillation component values for logging and the number of
/// synthetic rows that reached each term.
#[allow(clippy::too_many_arguments)]
fn batch_objective(
    tape: &mut Tape,
    logits: NodeId,
    batch: &AugBatch,
    slots: &[SlotRef],
    aug: &AugmentedDataset,
    teacher_logits: Option<&Tensor>,
    cfg: &TrainConfig,
) -> Result<BatchTerms> {
    let b = batch.rows.len();
    let k = aug.originals.num_classes;
    let lc = &cfg.loss;

    // Rows eligible for the task term: anything with a target
    // distribution, except unlabeled synthetics (by construction) and
    // labeled synthetics when they are not routed to the task loss.
    let needs_task = !matches!(lc.kind, LossKind::Kd);
    let mut task_rows = Vec::new();
    if needs_task {
        for (i, row) in batch.rows.iter().enumerate() {
            if row.target.is_none() {
                continue;
            }
            if row.provenance == Provenance::Synthetic && !cfg.use_synthetic_for_task {
                continue;
            }
            task_rows.push(i);
        }
    }
    let synthetic_in_task = task_rows
        .iter()
        .filter(|&&i| batch.rows[i].provenance == Provenance::Synthetic)
        .count();

    // Build the task node first so its tape region is identical whether
    // or not a distillation term follows it.
    let task_node = if needs_task && !task_rows.is_empty() {
        let sel = if task_rows.len() == b {
            logits
        } else {
            tape.select_rows(logits, &task_rows)?
        };
        let mut tdata = Vec::with_capacity(task_rows.len() * k);
        for &i in &task_rows {
            tdata.extend_from_slice(batch.rows[i].target.as_ref().unwrap());
        }
        let targets = Tensor::new(vec![task_rows.len(), k], tdata)?;
        Some(task_loss(tape, sel, &targets)?)
    } else {
        None
    };

    // Rows eligible for the distillation term.
    let needs_kd = !matches!(lc.kind, LossKind::TaskOnly);
    let mut kd_rows = Vec::new();
    if needs_kd {
        for (i, row) in batch.rows.iter().enumerate() {
            if row.provenance == Provenance::Synthetic && !cfg.use_synthetic_for_kd {
                continue;
            }
            // The split divergence needs a ground-truth class; rows
            // without one cannot enter it.
            if matches!(lc.kind, LossKind::Dkd) && aug.get(slots[i]).label.is_none() {
                continue;
            }
            kd_rows.push(i);
        }
    }
    let synthetic_in_kd = kd_rows
        .iter()
        .filter(|&&i| batch.rows[i].provenance == Provenance::Synthetic)
        .count();

    let kd_node = if needs_kd && !kd_rows.is_empty() {
        let t = teacher_logits.ok_or_else(|| {
            Error::Contract("distillation objective configured without a teacher".into())
        })?;
        let (s_sel, t_sel) = if kd_rows.len() == b {
            (logits, t.clone())
        } else {
            let mut td = Vec::with_capacity(kd_rows.len() * k);
            for &i in &kd_rows {
                td.extend_from_slice(&t.data[i * k..(i + 1) * k]);
            }
            (
                tape.select_rows(logits, &kd_rows)?,
                Tensor::new(vec![kd_rows.len(), k], td)?,
            )
        };
        Some(match lc.kind {
            LossKind::Kd | LossKind::Combined => {
                kd_loss(tape, s_sel, &t_sel, lc.temperature, lc.kd_direction)?
            }
            LossKind::HardLabelKd => hard_label_kd(tape, s_sel, &t_sel)?,
            LossKind::Dkd => {
                let labels: Vec<usize> = kd_rows
                    .iter()
                    .map(|&i| aug.get(slots[i]).label.unwrap())
                    .collect();
                dkd_loss(
                    tape,
                    s_sel,
                    &t_sel,
                    &labels,
                    lc.temperature,
                    lc.dkd_alpha,
                    lc.dkd_beta,
                )?
            }
            LossKind::TaskOnly => unreachable!(),
        })
    } else {
        None
    };

    let task_val = task_node.map_or(0.0, |n| tape.value(n).data[0]);
    let kd_val = kd_node.map_or(0.0, |n| tape.value(n).data[0]);

    let loss_node = match (task_node, kd_node) {
        (Some(t), Some(d)) => match lc.kind {
            LossKind::Kd => d,
            LossKind::TaskOnly => t,
            _ => combine(tape, t, d, lc.alpha)?,
        },
        (Some(t), None) => t,
        (None, Some(d)) => d,
        (None, None) => {
            return Err(Error::Contract(
                "batch produced neither a task nor a distillation term".into(),
            ))
        }
    };
    // The split divergence reads a ground-truth class per row on top of
    // whatever the task term consumed.
    let dkd_reads = if matches!(lc.kind, LossKind::Dkd) {
        kd_rows.len()
    } else {
        0
    };
    Ok(BatchTerms {
        loss_node,
        task_val,
        kd_val,
        synthetic_in_task,
        synthetic_in_kd,
        label_reads: task_rows.len() + dkd_reads,
    })
}

/// Scale all gradients by c/||g|| when the global norm exceeds c.
fn clip_gradients(grads: &mut [Vec<f64>], clip: f64) {
    let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

fn run_loop(
    mut model: Model,
    aug: &AugmentedDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
    teacher: Option<&Model>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let needs_kd = !matches!(cfg.loss.kind, LossKind::TaskOnly);
    if needs_kd && teacher.is_none() {
        return Err(Error::Contract(
            "distillation objective configured without a teacher".into(),
        ));
    }
    if let Some(t) = teacher {
        if t.head_spec.n_out != model.head_spec.n_out {
            return Err(Error::ShapeMismatch {
                op: "distill",
                lhs: vec![t.head_spec.n_out],
                rhs: vec![model.head_spec.n_out],
            });
        }
    }
    if aug.originals.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }

    let teacher_sum_before = teacher.map(Model::checksum);
    let use_synthetic = (cfg.use_synthetic_for_kd || cfg.use_synthetic_for_task)
        && !aug.synthetics.is_empty();

    // Epoch length counts original samples only, so runs with and
    // without synthetics take the same number of optimizer steps.
    let steps_per_epoch = aug.originals.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(ENGINE_STREAM);
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut instr = Instrumentation {
        teacher_constant: true,
        ..Instrumentation::default()
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut task_sum = 0.0;
        let mut kd_sum = 0.0;
        let mut epoch_lr = cfg.optimizer.lr;
        for s in 0..steps_per_epoch {
            let lr_t = match cfg.scheduler {
                Scheduler::Cosine => cosine_lr(step, total_steps, cfg.optimizer.lr),
                Scheduler::Constant => cfg.optimizer.lr,
            };
            if s == 0 {
                epoch_lr = lr_t;
            }

            let slots = sample_batch(
                aug,
                cfg.batch_size,
                use_synthetic,
                cfg.strict_batches,
                &mut rng,
            )?;
            let samples: Vec<&crate::data::Sample> =
                slots.iter().map(|&sl| aug.get(sl)).collect();
            let batch = apply_augmentation(
                &samples,
                aug.originals.num_classes,
                &cfg.augmentation,
                &mut rng,
            )?;
            instr.mixup_violations += batch.mixup_violations();

            // Teacher and student consume the same tensor; hash it at
            // both call sites so the contract is checked, not assumed.
            let teacher_logits = match teacher {
                Some(t) if needs_kd => {
                    let h_teacher = hash_bits(&batch.features.data);
                    let out = t.forward_eval(&batch.features)?;
                    let h_student = hash_bits(&batch.features.data);
                    if h_teacher != h_student {
                        instr.batch_hash_mismatches += 1;
                    }
                    Some(out)
                }
                _ => None,
            };

            let outcome = (|| -> Result<(Vec<Vec<f64>>, BatchTerms)> {
                let mut tape = Tape::new();
                let x = tape.leaf(batch.features.clone(), false);
                let (logits, trainable) = model.forward_train(&mut tape, x)?;
                let terms = batch_objective(
                    &mut tape,
                    logits,
                    &batch,
                    &slots,
                    aug,
                    teacher_logits.as_ref(),
                    cfg,
                )?;
                tape.backward(terms.loss_node)?;
                let grads: Vec<Vec<f64>> = trainable
                    .iter()
                    .map(|&id| {
                        tape.grad(id)
                            .map(<[f64]>::to_vec)
                            .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
                    })
                    .collect();
                Ok((grads, terms))
            })();
            let (mut grads, terms) = match outcome {
                Ok(v) => v,
                // A non-finite value anywhere in the forward or backward
                // pass means the run has diverged at this step.
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            };

            if let Some(c) = cfg.grad_clip {
                clip_gradients(&mut grads, c);
            }
            let mut params = model.trainable_params_mut();
            opt.step(&mut params, &grads, lr_t, step)?;

            instr.synthetic_in_task += terms.synthetic_in_task;
            instr.synthetic_in_kd += terms.synthetic_in_kd;
            instr.label_reads += terms.label_reads;
            task_sum += terms.task_val;
            kd_sum += terms.kd_val;
            if cfg.trace_params {
                instr.param_trace.push(model.checksum());
            }
            step += 1;
        }
        let val_accuracy = evaluate_accuracy(&model, val)?;
        log.push(EpochRecord {
            epoch,
            lr: epoch_lr,
            task_loss: task_sum / steps_per_epoch as f64,
            kd_loss: kd_sum / steps_per_epoch as f64,
            val_accuracy,
        });
    }

    if let (Some(before), Some(t)) = (teacher_sum_before, teacher) {
        instr.teacher_constant = t.checksum() == before;
    }
    Ok(TrainOutcome { model, log, instr })
}

// ---------------------------------------------------------------------------
// The four operations
// ---------------------------------------------------------------------------

/// Train an encoder on the broad labeled corpus through a temporary
/// linear head, then discard the head. With `epochs = 0` the returned
/// encoder equals its seeded initialization.
pub fn pretrain_encoder(
    corpus: &LabeledDataset,
    spec: &EncoderSpec,
    cfg: &TrainConfig,
) -> Result<PretrainedEncoder> {
    spec.validate()?;
    if !matches!(cfg.loss.kind, LossKind::TaskOnly) {
        return Err(Error::Contract(
            "encoder pretraining uses the task objective only".into(),
        ));
    }
    let head_spec = HeadSpec {
        kind: HeadKind::Linear,
        n_in: spec.output_dim,
        n_out: corpus.num_classes,
        n_hidden: None,
        activation: Default::default(),
    };
    let model = Model::build(spec.clone(), head_spec, cfg.seed, cfg.seed)?;
    let aug = AugmentedDataset::originals_only(corpus.clone());
    let out = run_loop(model, &aug, corpus, cfg, None)?;
    Ok(PretrainedEncoder {
        spec: spec.clone(),
        seed: cfg.seed,
        mlp: out.model.encoder,
    })
}

/// Train a fresh head on top of a frozen encoder. The returned model
/// keeps the frozen flag set; its encoder checksum is unchanged.
pub fn probe(
    encoder: &PretrainedEncoder,
    train: &LabeledDataset,
    val: &LabeledDataset,
    head_spec: HeadSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !matches!(cfg.loss.kind, LossKind::TaskOnly) {
        return Err(Error::Contract("probing uses the task objective only".into()));
    }
    let model = Model::assemble(encoder, head_spec, cfg.seed, true)?;
    let aug = AugmentedDataset::originals_only(train.clone());
    run_loop(model, &aug, val, cfg, None)
}

/// Update every parameter of the model on the task objective. Unfreezes
/// the encoder: finetuning by definition trains the whole network.
pub fn finetune(
    mut model: Model,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !matches!(cfg.loss.kind, LossKind::TaskOnly) {
        return Err(Error::Contract("finetuning uses the task objective only".into()));
    }
    model.set_frozen(false);
    let aug = AugmentedDataset::originals_only(train.clone());
    run_loop(model, &aug, val, cfg, None)
}

/// Finetune over an augmented dataset, so labeled synthetic samples can
/// serve as extra supervision (`use_synthetic_for_task`). Plain
/// finetuning is the special case with an empty synthetic pool.
pub fn finetune_on(
    mut model: Model,
    aug: &AugmentedDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if !matches!(cfg.loss.kind, LossKind::TaskOnly) {
        return Err(Error::Contract("finetuning uses the task objective only".into()));
    }
    model.set_frozen(false);
    run_loop(model, aug, val, cfg, None)
}

/// Train the student against the teacher's per-step logits on the
/// augmented dataset. The teacher is read-only throughout; its logits
/// are recomputed for every batch after augmentation.
pub fn distill(
    student: Model,
    teacher: &Model,
    aug: &AugmentedDataset,
    val: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    run_loop(student, aug, val, cfg, Some(teacher))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_augmented, generate_task, MixerKind, MixerSpec, TaskGenConfig};
    use crate::losses::KdDirection;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1, 1], vec![v]).unwrap()
    }

    // -- optimizer oracles --------------------------------------------------

    #[test]
    fn sgd_single_step_matches_hand_computation() {
        let spec = OptimizerSpec {
            kind: OptKind::SgdMomentum,
            lr: 0.1,
            weight_decay: 0.0,
            momentum: 0.0,
            ..OptimizerSpec::default()
        };
        let mut opt = Optimizer::new(spec).unwrap();
        let mut p = scalar(0.0);
        opt.step(&mut [&mut p], &[vec![1.0]], 0.1, 0).unwrap();
        assert!((p.data[0] - (-0.1)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let spec = OptimizerSpec {
            kind: OptKind::SgdMomentum,
            lr: 0.1,
            weight_decay: 0.0,
            momentum: 0.9,
            ..OptimizerSpec::default()
        };
        let mut opt = Optimizer::new(spec).unwrap();
        let mut p = scalar(0.0);
        opt.step(&mut [&mut p], &[vec![1.0]], 0.1, 0).unwrap();
        // v1 = 1, p1 = -0.1
        assert!((p.data[0] + 0.1).abs() < 1e-15);
        opt.step(&mut [&mut p], &[vec![1.0]], 0.1, 1).unwrap();
        // v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        assert!((p.data[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero_even_without_gradient() {
        let spec = OptimizerSpec {
            kind: OptKind::SgdMomentum,
            lr: 0.5,
            weight_decay: 0.1,
            momentum: 0.0,
            ..OptimizerSpec::default()
        };
        let mut opt = Optimizer::new(spec).unwrap();
        let mut p = scalar(2.0);
        opt.step(&mut [&mut p], &[vec![0.0]], 0.5, 0).unwrap();
        // eff = 0 + 0.1 * 2 = 0.2; p = 2 - 0.5 * 0.2 = 1.9
        assert!((p.data[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_zero_decay_is_a_no_op() {
        let spec = OptimizerSpec {
            kind: OptKind::SgdMomentum,
            lr: 0.5,
            weight_decay: 0.0,
            momentum: 0.9,
            ..OptimizerSpec::default()
        };
        let mut opt = Optimizer::new(spec).unwrap();
        let mut p = scalar(1.234_567_89);
        let before = p.data[0].to_bits();
        for s in 0..3 {
            opt.step(&mut [&mut p], &[vec![0.0]], 0.5, s).unwrap();
        }
        assert_eq!(p.data[0].to_bits(), before);
    }

    #[test]
    fn adamw_single_step_matches_scalar_oracle() {
        let (lr, wd, b1, b2, eps) = (0.01, 0.1, 0.9, 0.999, 1e-8);
        let spec = OptimizerSpec {
            kind: OptKind::AdamW,
            lr,
            weight_decay: wd,
            betas: (b1, b2),
            eps,
            ..OptimizerSpec::default()
        };
        let mut opt = Optimizer::new(spec).unwrap();
        let (p0, g) = (0.7, 0.3);
        let mut p = scalar(p0);
        opt.step(&mut [&mut p], &[vec![g]], lr, 0).unwrap();

        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1);
        let vhat = v / (1.0 - b2);
        let expect = p0 - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * p0;
        assert!((p.data[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn adamw_two_steps_match_scalar_oracle() {
        let (lr, wd, b1, b2, eps) = (0.02, 0.05, 0.9, 0.999, 1e-8);
        let spec = OptimizerSpec {
            kind: OptKind::AdamW,
            lr,
            weight_decay: wd,
            betas: (b1, b2),
            eps,
            ..OptimizerSpec::default()
        };
        let mut opt = Optimizer::new(spec).unwrap();
        let mut p = scalar(-0.4);
        let gs = [0.25, -0.6];
        for (s, &g) in gs.iter().enumerate() {
            opt.step(&mut [&mut p], &[vec![g]], lr, s).unwrap();
        }

        let (mut m, mut v, mut q) = (0.0, 0.0, -0.4_f64);
        for (t, &g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32 + 1));
            let vhat = v / (1.0 - b2.powi(t as i32 + 1));
            q = q - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * q;
        }
        assert!((p.data[0] - q).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_reports_the_step() {
        let spec = OptimizerSpec {
            kind: OptKind::SgdMomentum,
            ..OptimizerSpec::default()
        };
        let mut opt = Optimizer::new(spec).unwrap();
        let mut p = scalar(0.0);
        let err = opt
            .step(&mut [&mut p], &[vec![f64::NAN]], 0.1, 17)
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 17 }));
    }

    #[test]
    fn negative_lr_is_rejected() {
        let spec = OptimizerSpec {
            lr: -0.1,
            ..OptimizerSpec::default()
        };
        assert!(Optimizer::new(spec).is_err());
    }

    // -- schedule -----------------------------------------------------------

    #[test]
    fn cosine_schedule_hits_its_endpoints() {
        assert!((cosine_lr(0, 100, 0.4) - 0.4).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.4) - 0.2).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 0.4).abs() < 1e-16);
    }

    #[test]
    fn cosine_schedule_is_monotonically_non_increasing() {
        let total = 313;
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, 1.0);
            assert!(lr <= prev + 1e-15, "lr rose at step {s}");
            assert!(lr >= 0.0);
            prev = lr;
        }
    }

    // -- training operations ------------------------------------------------

    /// Small task for engine tests: 4 classes, 2 superclasses, 8 dims.
    fn tiny_task() -> crate::data::TaskData {
        let cfg = TaskGenConfig {
            d_in: 8,
            num_superclasses: 2,
            num_classes: 4,
            pretrain_per_class: 20,
            train_per_class: 12,
            val_per_class: 8,
            test_per_class: 8,
            center_scale: 3.0,
            offset_scale: 1.5,
            noise_sigma: 0.7,
        };
        generate_task(&cfg, 11).unwrap()
    }

    fn tiny_encoder_spec() -> EncoderSpec {
        EncoderSpec {
            input_dim: 8,
            hidden_widths: vec![16],
            activation: Default::default(),
            output_dim: 8,
        }
    }

    fn head_for(n_in: usize, n_out: usize) -> HeadSpec {
        HeadSpec {
            kind: HeadKind::Linear,
            n_in,
            n_out,
            n_hidden: None,
            activation: Default::default(),
        }
    }

    fn quick_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: OptimizerSpec {
                kind: OptKind::AdamW,
                lr: 5e-3,
                weight_decay: 1e-4,
                ..OptimizerSpec::default()
            },
            scheduler: Scheduler::Cosine,
            loss: LossConfig {
                kind: LossKind::TaskOnly,
                ..LossConfig::default()
            },
            seed,
            use_synthetic_for_kd: false,
            use_synthetic_for_task: false,
            augmentation: AugmentationSpec {
                mixup_alpha: 0.0,
                ..AugmentationSpec::default()
            },
            grad_clip: None,
            strict_batches: false,
            trace_params: false,
        }
    }

    #[test]
    fn pretrain_zero_epochs_returns_the_initialization() {
        let task = tiny_task();
        let spec = tiny_encoder_spec();
        let cfg = quick_cfg(0, 3);
        let pre = pretrain_encoder(&task.pretrain, &spec, &cfg).unwrap();
        let fresh = crate::nn::build_encoder(&spec, 3).unwrap();
        let fresh_sum = {
            let pe = PretrainedEncoder {
                spec: spec.clone(),
                seed: 3,
                mlp: fresh,
            };
            pe.checksum()
        };
        assert_eq!(pre.checksum(), fresh_sum);
    }

    #[test]
    fn pretrain_different_seeds_differ() {
        let task = tiny_task();
        let spec = tiny_encoder_spec();
        let a = pretrain_encoder(&task.pretrain, &spec, &quick_cfg(2, 0)).unwrap();
        let b = pretrain_encoder(&task.pretrain, &spec, &quick_cfg(2, 1)).unwrap();
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn probe_leaves_the_encoder_untouched_and_beats_majority_rate() {
        let task = tiny_task();
        let spec = tiny_encoder_spec();
        let pre = pretrain_encoder(&task.pretrain, &spec, &quick_cfg(10, 5)).unwrap();
        let enc_sum = pre.checksum();

        let cfg = quick_cfg(15, 5);
        let out = probe(
            &pre,
            &task.train,
            &task.val,
            head_for(8, task.train.num_classes),
            &cfg,
        )
        .unwrap();
        assert!(out.model.encoder_frozen);
        // Both checksums hash the encoder parameters in layer order, so
        // the freeze contract is a bit-level equality.
        assert_eq!(out.model.encoder_checksum(), enc_sum);
        assert_eq!(out.log.len(), 15);

        // Majority-class rate from the actual label counts.
        let labels = task.val.labels();
        let mut counts = vec![0usize; task.val.num_classes];
        for l in labels {
            counts[l] += 1;
        }
        let majority = *counts.iter().max().unwrap() as f64 / task.val.len() as f64;
        let acc = out.log.last().unwrap().val_accuracy;
        assert!(
            acc > majority,
            "probe accuracy {acc} does not beat majority rate {majority}"
        );
    }

    #[test]
    fn probe_with_zero_lr_keeps_the_head_at_initialization() {
        let task = tiny_task();
        let spec = tiny_encoder_spec();
        let pre = pretrain_encoder(&task.pretrain, &spec, &quick_cfg(0, 7)).unwrap();
        let mut cfg = quick_cfg(3, 7);
        cfg.optimizer.lr = 0.0;
        cfg.optimizer.weight_decay = 0.0;
        let out = probe(
            &pre,
            &task.train,
            &task.val,
            head_for(8, task.train.num_classes),
            &cfg,
        )
        .unwrap();
        let fresh = Model::assemble(&pre, head_for(8, task.train.num_classes), 7, true).unwrap();
        assert_eq!(out.model.checksum(), fresh.checksum());
    }

    #[test]
    fn finetune_with_zero_lr_is_a_no_op() {
        let task = tiny_task();
        let model = Model::build(
            tiny_encoder_spec(),
            head_for(8, task.train.num_classes),
            1,
            2,
        )
        .unwrap();
        let before = model.checksum();
        let mut cfg = quick_cfg(2, 9);
        cfg.optimizer.lr = 0.0;
        cfg.optimizer.weight_decay = 0.0;
        let out = finetune(model, &task.train, &task.val, &cfg).unwrap();
        assert_eq!(out.model.checksum(), before);
    }

    #[test]
    fn same_seed_same_run() {
        let task = tiny_task();
        let build = || {
            Model::build(
                tiny_encoder_spec(),
                head_for(8, task.train.num_classes),
                1,
                2,
            )
            .unwrap()
        };
        let cfg = quick_cfg(3, 13);
        let a = finetune(build(), &task.train, &task.val, &cfg).unwrap();
        let b = finetune(build(), &task.train, &task.val, &cfg).unwrap();
        assert_eq!(a.model.checksum(), b.model.checksum());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.task_loss.to_bits(), rb.task_loss.to_bits());
            assert_eq!(ra.val_accuracy.to_bits(), rb.val_accuracy.to_bits());
        }
    }

    #[test]
    fn finetune_improves_train_accuracy_over_probe() {
        let task = tiny_task();
        let spec = tiny_encoder_spec();
        let pre = pretrain_encoder(&task.pretrain, &spec, &quick_cfg(8, 21)).unwrap();
        let head = head_for(8, task.train.num_classes);

        let cfg = quick_cfg(12, 21);
        let probed = probe(&pre, &task.train, &task.train, head.clone(), &cfg).unwrap();
        let student = Model::assemble(&pre, head, cfg.seed, false).unwrap();
        let tuned = finetune(student, &task.train, &task.train, &cfg).unwrap();

        let probe_acc = probed.log.last().unwrap().val_accuracy;
        let tune_acc = tuned.log.last().unwrap().val_accuracy;
        assert!(
            tune_acc >= probe_acc,
            "finetune train accuracy {tune_acc} below probe {probe_acc}"
        );
    }

    /// A teacher for distillation tests: probed on top of a briefly
    /// pretrained encoder.
    fn quick_teacher(task: &crate::data::TaskData) -> Model {
        let spec = tiny_encoder_spec();
        let pre = pretrain_encoder(&task.pretrain, &spec, &quick_cfg(8, 31)).unwrap();
        probe(
            &pre,
            &task.train,
            &task.val,
            head_for(8, task.train.num_classes),
            &quick_cfg(10, 31),
        )
        .unwrap()
        .model
    }

    fn distill_cfg(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                kind: LossKind::Combined,
                alpha: 0.5,
                temperature: 2.0,
                ..LossConfig::default()
            },
            use_synthetic_for_kd: true,
            use_synthetic_for_task: false,
            ..quick_cfg(epochs, seed)
        }
    }

    fn tiny_dsd(task: &crate::data::TaskData) -> AugmentedDataset {
        let mixer = MixerSpec {
            kind: MixerKind::InterClass,
            ..MixerSpec::default()
        };
        build_augmented(&task.train, &mixer, task.train.len(), 41, None).unwrap()
    }

    #[test]
    fn distill_reduces_to_finetune_at_alpha_zero() {
        let task = tiny_task();
        let teacher = quick_teacher(&task);
        let build = || {
            Model::build(
                tiny_encoder_spec(),
                head_for(8, task.train.num_classes),
                4,
                5,
            )
            .unwrap()
        };

        let mut ft_cfg = quick_cfg(2, 17);
        ft_cfg.trace_params = true;
        let ft = finetune(build(), &task.train, &task.val, &ft_cfg).unwrap();

        let mut kd_cfg = distill_cfg(2, 17);
        kd_cfg.loss.alpha = 0.0;
        kd_cfg.use_synthetic_for_kd = false;
        kd_cfg.use_synthetic_for_task = false;
        kd_cfg.trace_params = true;
        let aug = AugmentedDataset::originals_only(task.train.clone());
        let kd = distill(build(), &teacher, &aug, &task.val, &kd_cfg).unwrap();

        assert_eq!(ft.instr.param_trace, kd.instr.param_trace);
        assert_eq!(ft.model.checksum(), kd.model.checksum());
    }

    #[test]
    fn distill_never_mutates_the_teacher() {
        let task = tiny_task();
        let teacher = quick_teacher(&task);
        let before = teacher.checksum();
        let student = Model::build(
            tiny_encoder_spec(),
            head_for(8, task.train.num_classes),
            6,
            7,
        )
        .unwrap();
        let aug = tiny_dsd(&task);
        let out = distill(student, &teacher, &aug, &task.val, &distill_cfg(2, 19)).unwrap();
        assert_eq!(teacher.checksum(), before);
        assert!(out.instr.teacher_constant);
        assert_eq!(out.instr.batch_hash_mismatches, 0);
    }

    #[test]
    fn synthetic_samples_stay_out_of_the_task_term_by_default() {
        let task = tiny_task();
        let teacher = quick_teacher(&task);
        let student = Model::build(
            tiny_encoder_spec(),
            head_for(8, task.train.num_classes),
            6,
            7,
        )
        .unwrap();
        let aug = tiny_dsd(&task);
        let out = distill(student, &teacher, &aug, &task.val, &distill_cfg(2, 23)).unwrap();
        assert_eq!(out.instr.synthetic_in_task, 0);
        assert!(out.instr.synthetic_in_kd > 0);
        assert_eq!(out.instr.mixup_violations, 0);
    }

    #[test]
    fn labeled_synthetics_can_be_routed_into_the_task_term() {
        let task = tiny_task();
        let teacher = quick_teacher(&task);
        let student = Model::build(
            tiny_encoder_spec(),
            head_for(8, task.train.num_classes),
            6,
            7,
        )
        .unwrap();
        let mixer = MixerSpec {
            kind: MixerKind::IntraClass,
            ..MixerSpec::default()
        };
        let aug = build_augmented(&task.train, &mixer, task.train.len(), 43, None).unwrap();
        let mut cfg = distill_cfg(2, 29);
        cfg.use_synthetic_for_task = true;
        let out = distill(student, &teacher, &aug, &task.val, &cfg).unwrap();
        assert!(out.instr.synthetic_in_task > 0);
    }

    #[test]
    fn hard_label_and_split_objectives_run() {
        let task = tiny_task();
        let teacher = quick_teacher(&task);
        let aug = tiny_dsd(&task);
        for kind in [LossKind::HardLabelKd, LossKind::Dkd, LossKind::Kd] {
            let student = Model::build(
                tiny_encoder_spec(),
                head_for(8, task.train.num_classes),
                6,
                7,
            )
            .unwrap();
            let mut cfg = distill_cfg(1, 37);
            cfg.loss.kind = kind;
            let out = distill(student, &teacher, &aug, &task.val, &cfg).unwrap();
            assert!(out.log[0].kd_loss.is_finite());
        }
    }

    #[test]
    fn kd_direction_changes_the_trajectory() {
        let task = tiny_task();
        let teacher = quick_teacher(&task);
        let aug = tiny_dsd(&task);
        let build = || {
            Model::build(
                tiny_encoder_spec(),
                head_for(8, task.train.num_classes),
                6,
                7,
            )
            .unwrap()
        };
        let mut cfg = distill_cfg(1, 39);
        cfg.loss.kd_direction = KdDirection::TeacherStudent;
        let a = distill(build(), &teacher, &aug, &task.val, &cfg).unwrap();
        cfg.loss.kd_direction = KdDirection::StudentTeacher;
        let b = distill(build(), &teacher, &aug, &task.val, &cfg).unwrap();
        assert_ne!(a.model.checksum(), b.model.checksum());
    }

    #[test]
    fn mismatched_class_counts_are_rejected() {
        let task = tiny_task();
        let teacher = quick_teacher(&task);
        let student = Model::build(
            tiny_encoder_spec(),
            head_for(8, task.train.num_classes + 1),
            6,
            7,
        )
        .unwrap();
        let aug = tiny_dsd(&task);
        let err = distill(student, &teacher, &aug, &task.val, &distill_cfg(1, 3)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn runaway_learning_rate_diverges_with_a_step_index() {
        let task = tiny_task();
        let model = Model::build(
            tiny_encoder_spec(),
            head_for(8, task.train.num_classes),
            1,
            2,
        )
        .unwrap();
        let mut cfg = quick_cfg(4, 47);
        cfg.optimizer = OptimizerSpec {
            kind: OptKind::SgdMomentum,
            lr: 1e14,
            weight_decay: 0.0,
            momentum: 0.0,
            ..OptimizerSpec::default()
        };
        cfg.scheduler = Scheduler::Constant;
        let err = finetune(model, &task.train, &task.val, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn grad_clip_bounds_the_update_norm() {
        let mut grads = vec![vec![3.0, 4.0]];
        clip_gradients(&mut grads, 1.0);
        let norm: f64 = grads[0].iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // Direction preserved.
        assert!((grads[0][0] / grads[0][1] - 0.75).abs() < 1e-12);

        // Below the threshold nothing changes.
        let mut small = vec![vec![0.3, 0.4]];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0], vec![0.3, 0.4]);
    }

    #[test]
    fn epoch_log_reports_the_schedule() {
        let task = tiny_task();
        let model = Model::build(
            tiny_encoder_spec(),
            head_for(8, task.train.num_classes),
            1,
            2,
        )
        .unwrap();
        let cfg = quick_cfg(4, 51);
        let out = finetune(model, &task.train, &task.val, &cfg).unwrap();
        assert_eq!(out.log.len(), 4);
        assert!((out.log[0].lr - cfg.optimizer.lr).abs() < 1e-15);
        for w in out.log.windows(2) {
            assert!(w[1].lr <= w[0].lr);
        }
        for (i, rec) in out.log.iter().enumerate() {
            assert_eq!(rec.epoch, i);
            assert_eq!(rec.kd_loss, 0.0);
            assert!(rec.task_loss.is_finite());
        }
    }

    #[test]
    fn probing_rejects_distillation_objectives() {
        let task = tiny_task();
        let spec = tiny_encoder_spec();
        let pre = pretrain_encoder(&task.pretrain, &spec, &quick_cfg(0, 1)).unwrap();
        let mut cfg = quick_cfg(1, 1);
        cfg.loss.kind = LossKind::Combined;
        let err = probe(
            &pre,
            &task.train,
            &task.val,
            head_for(8, task.train.num_classes),
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }
}
