//! Training objectives: batch-mean cross-entropy against label
//! distributions, temperature-scaled distillation KL (both argument
//! orders), their convex combination, cross-entropy against teacher hard
//! labels, and a target/non-target split divergence.
//!
//! Teacher outputs enter every distillation loss as plain data, never as
//! tape nodes, so no gradient can reach the teacher by construction.
//! Teacher-side constants are computed with the same kernels and the
//! same accumulation order as the student-side tape ops; this is what
//! makes the identity cases (student == teacher) come out exactly zero
//! instead of merely small.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, softmax_rows, NodeId, Tape, Tensor, LOG_CLAMP};
use serde::{Deserialize, Serialize};

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Cross-entropy on labeled samples only.
    TaskOnly,
    /// Distillation KL only; labels are never read.
    Kd,
    /// (1-alpha) * task + alpha * kd.
    Combined,
    /// Combined objective with the KL term replaced by cross-entropy
    /// against the teacher's argmax predictions.
    HardLabelKd,
    /// Combined objective with the KL term replaced by the
    /// target/non-target split divergence.
    Dkd,
}

/// Argument order of the distillation KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdDirection {
    /// KL(teacher || student): student-logit gradient T*(p_s - p_t)/b.
    /// The conventional choice and the default.
    TeacherStudent,
    /// KL(student || teacher).
    StudentTeacher,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub temperature: f64,
    pub alpha: f64,
    pub dkd_alpha: f64,
    pub dkd_beta: f64,
    pub kd_direction: KdDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Combined,
            temperature: 2.0,
            alpha: 0.5,
            dkd_alpha: 1.0,
            dkd_beta: 2.0,
            kd_direction: KdDirection::TeacherStudent,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || self.temperature.is_nan() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.dkd_alpha < 0.0 || self.dkd_beta < 0.0 {
            return Err(Error::Config(
                "dkd weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn check_same_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if a.len() != 2 || a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1]))
}

/// Batch-mean cross-entropy of `logits` against per-row label
/// distributions (one-hot for hard labels, two-hot for mixed samples).
pub fn task_loss(tape: &mut Tape, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
    let (b, k) = check_same_shape(&tape.value(logits).shape, &targets.shape, "task_loss")?;
    for (i, row) in targets.data.chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "task_loss target row {i} sums to {s}, expected 1"
            )));
        }
    }
    let lp = tape.log_softmax(logits)?;
    let tgt = tape.constant(targets.clone());
    let prod = tape.mul(lp, tgt)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f64)
}

/// Batch-mean temperature-scaled KL between teacher and student
/// predictive distributions, multiplied by T^2 so the student-logit
/// gradient magnitude stays O(1) as T grows.
///
/// Both logits are divided by T before the softmax. The teacher side is
/// a constant. With [`KdDirection::TeacherStudent`] the gradient w.r.t.
/// the student logits is T*(p_s - p_t)/b.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: NodeId,
    teacher_logits: &Tensor,
    temperature: f64,
    direction: KdDirection,
) -> Result<NodeId> {
    let (b, k) = check_same_shape(
        &tape.value(student_logits).shape,
        &teacher_logits.shape,
        "kd_loss",
    )?;
    if temperature <= 0.0 || temperature.is_nan() {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let inv_t = 1.0 / temperature;
    let scaled_t: Vec<f64> = teacher_logits.data.iter().map(|v| v * inv_t).collect();
    let p_t = softmax_rows(&scaled_t, k);
    let lp_t = log_softmax_rows(&scaled_t, k);

    let zs = tape.scale(student_logits, inv_t)?;
    let lp_s = tape.log_softmax(zs)?;
    let w = temperature * temperature / b as f64;
    match direction {
        KdDirection::TeacherStudent => {
            let clp_t = tape.constant(Tensor::new(vec![b, k], lp_t)?);
            let cp_t = tape.constant(Tensor::new(vec![b, k], p_t)?);
            let diff = tape.sub(clp_t, lp_s)?;
            let prod = tape.mul(cp_t, diff)?;
            let s = tape.sum(prod)?;
            tape.scale(s, w)
        }
        KdDirection::StudentTeacher => {
            let clp_t = tape.constant(Tensor::new(vec![b, k], lp_t)?);
            let p_s = tape.softmax(zs)?;
            let diff = tape.sub(lp_s, clp_t)?;
            let prod = tape.mul(p_s, diff)?;
            let s = tape.sum(prod)?;
            tape.scale(s, w)
        }
    }
}

/// Convex combination (1-alpha)*task + alpha*kd. At the endpoints the
/// corresponding component node is returned as-is, so an alpha of 0 or 1
/// is bit-identical to the pure objective, not just numerically close.
pub fn combine(tape: &mut Tape, task: NodeId, kd: NodeId, alpha: f64) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if alpha == 0.0 {
        return Ok(task);
    }
    if alpha == 1.0 {
        return Ok(kd);
    }
    let wt = tape.scale(task, 1.0 - alpha)?;
    let wk = tape.scale(kd, alpha)?;
    tape.add(wt, wk)
}

/// Task + distillation objective over one set of rows. Callers that
/// route different sample subsets into the two terms (labeled originals
/// into the task term, everything into the KL term) compute the parts
/// separately and use [`combine`].
pub fn combined_loss(
    tape: &mut Tape,
    student_logits: NodeId,
    teacher_logits: &Tensor,
    targets: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let task = task_loss(tape, student_logits, targets)?;
    let kd = kd_loss(
        tape,
        student_logits,
        teacher_logits,
        cfg.temperature,
        cfg.kd_direction,
    )?;
    combine(tape, task, kd, cfg.alpha)
}

/// Per-row argmax with ties broken toward the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape[1];
    logits
        .data
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Batch-mean cross-entropy of the student against the teacher's argmax
/// predictions (no temperature; hard targets carry none).
pub fn hard_label_kd(
    tape: &mut Tape,
    student_logits: NodeId,
    teacher_logits: &Tensor,
) -> Result<NodeId> {
    let (b, k) = check_same_shape(
        &tape.value(student_logits).shape,
        &teacher_logits.shape,
        "hard_label_kd",
    )?;
    let labels = argmax_rows(teacher_logits);
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let tgt = tape.constant(Tensor::new(vec![b, k], onehot)?);
    let lp = tape.log_softmax(student_logits)?;
    let prod = tape.mul(lp, tgt)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f64)
}

/// Split divergence at temperature T: `dkd_alpha` times the binary KL
/// between target/non-target mass, plus `dkd_beta` times the KL between
/// the distributions renormalized over non-target classes. Both parts
/// are T^2-scaled batch means, like [`kd_loss`].
pub fn dkd_loss(
    tape: &mut Tape,
    student_logits: NodeId,
    teacher_logits: &Tensor,
    hard_labels: &[usize],
    temperature: f64,
    dkd_alpha: f64,
    dkd_beta: f64,
) -> Result<NodeId> {
    let (b, k) = check_same_shape(
        &tape.value(student_logits).shape,
        &teacher_logits.shape,
        "dkd_loss",
    )?;
    if k < 2 {
        return Err(Error::Contract(
            "dkd_loss needs at least 2 classes; the non-target distribution is undefined otherwise"
                .into(),
        ));
    }
    if hard_labels.len() != b {
        return Err(Error::Contract(format!(
            "dkd_loss got {} labels for {} rows",
            hard_labels.len(),
            b
        )));
    }
    if let Some(&bad) = hard_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "dkd_loss label {bad} out of range for {k} classes"
        )));
    }
    let inv_t = 1.0 / temperature;
    let scaled_t: Vec<f64> = teacher_logits.data.iter().map(|v| v * inv_t).collect();
    let p_t = softmax_rows(&scaled_t, k);
    let lp_t = log_softmax_rows(&scaled_t, k);

    let mut mask = vec![0.0; b * k];
    for (i, &l) in hard_labels.iter().enumerate() {
        mask[i * k + l] = 1.0;
    }

    // Teacher-side constants, mirroring the student tape ops term by term
    // (same products, same accumulation order) so equal logits cancel
    // exactly in the additions below.
    let mut tmass = vec![0.0; b];
    for i in 0..b {
        let mut acc = 0.0;
        for j in 0..k {
            acc += p_t[i * k + j] * mask[i * k + j];
        }
        tmass[i] = acc;
    }
    let nmass: Vec<f64> = tmass.iter().map(|&x| -x + 1.0).collect();
    let ln_tmass: Vec<f64> = tmass.iter().map(|&x| x.max(LOG_CLAMP).ln()).collect();
    let ln_nmass: Vec<f64> = nmass.iter().map(|&x| x.max(LOG_CLAMP).ln()).collect();
    let binary_const: f64 = tmass
        .iter()
        .zip(&ln_tmass)
        .map(|(a, l)| a * l)
        .sum::<f64>()
        + nmass.iter().zip(&ln_nmass).map(|(a, l)| a * l).sum::<f64>();

    let mut qhat = vec![0.0; b * k];
    for (i, &l) in hard_labels.iter().enumerate() {
        for j in 0..k {
            if j != l {
                qhat[i * k + j] = p_t[i * k + j] / nmass[i];
            }
        }
    }
    let cross: f64 = qhat.iter().zip(&lp_t).map(|(q, l)| q * l).sum();
    let renorm: f64 = ln_nmass.iter().sum();
    let nontarget_const = cross - renorm;

    // Student side.
    let zs = tape.scale(student_logits, inv_t)?;
    let p_s = tape.softmax(zs)?;
    let lp_s = tape.log_softmax(zs)?;
    let cmask = tape.constant(Tensor::new(vec![b, k], mask)?);
    let masked = tape.mul(p_s, cmask)?;
    let tmass_s = tape.rowsum(masked)?;
    let neg_tmass = tape.scale(tmass_s, -1.0)?;
    let nmass_s = tape.add_scalar(neg_tmass, 1.0)?;
    let ln_tmass_s = tape.log(tmass_s)?;
    let ln_nmass_s = tape.log(nmass_s)?;

    // Binary target/non-target KL, summed over rows.
    let ctm = tape.constant(Tensor::new(vec![b, 1], tmass)?);
    let cnm = tape.constant(Tensor::new(vec![b, 1], nmass)?);
    let ma = tape.mul(ctm, ln_tmass_s)?;
    let sa = tape.sum(ma)?;
    let mb = tape.mul(cnm, ln_nmass_s)?;
    let sb = tape.sum(mb)?;
    let sab = tape.add(sa, sb)?;
    let neg_sab = tape.scale(sab, -1.0)?;
    let binary_kl = tape.add_scalar(neg_sab, binary_const)?;

    // Non-target KL, summed over rows.
    let cq = tape.constant(Tensor::new(vec![b, k], qhat)?);
    let mq = tape.mul(cq, lp_s)?;
    let t1 = tape.sum(mq)?;
    let t2 = tape.sum(ln_nmass_s)?;
    let neg_t1 = tape.scale(t1, -1.0)?;
    let inner = tape.add(neg_t1, t2)?;
    let nontarget_kl = tape.add_scalar(inner, nontarget_const)?;

    let w = temperature * temperature / b as f64;
    let wt = tape.scale(binary_kl, dkd_alpha * w)?;
    let wn = tape.scale(nontarget_kl, dkd_beta * w)?;
    tape.add(wt, wn)
}
