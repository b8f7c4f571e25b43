//! Supervised, distillation, and blended training objectives.
//!
//! All losses are batch means. Teacher logits enter as plain tensors and are
//! never differentiated.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Argument order of the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(teacher || student)`: cross-entropy against soft targets.
    #[default]
    TeacherStudent,
    /// `KL(student || teacher)`.
    StudentTeacher,
}

fn default_temperature() -> f64 {
    2.0
}

fn default_alpha() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: default_temperature(),
            alpha: default_alpha(),
            kl_direction: KlDirection::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")))
    }
}

/// Temperature-softened class probabilities.
pub fn softmax_t(tape: &mut Tape, logits: Var, temperature: f64) -> Result<Var> {
    tape.softmax(logits, temperature)
}

/// Plain-value counterpart of [`softmax_t`].
pub fn softmax_t_values(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let cols = *logits.shape().last().unwrap_or(&1);
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), cols, temperature))
}

fn logits_dims(tape: &Tape, logits: Var) -> Result<(usize, usize)> {
    match *tape.shape(logits) {
        [b, c] => Ok((b, c)),
        ref other => Err(Error::shape("logits", other, &[])),
    }
}

/// Mean cross-entropy of `labels` under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, classes) = logits_dims(tape, logits)?;
    if labels.len() != batch {
        return Err(Error::shape("cross_entropy", &[batch, classes], &[labels.len()]));
    }
    let mut onehot = vec![0.0; batch * classes];
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Data(format!(
                "label {label} at row {row} out of range for {classes} classes"
            )));
        }
        onehot[row * classes + label] = 1.0;
    }
    tape.soft_target_loss(logits, &onehot, None, 1.0, 1.0)
}

/// `T^2`-scaled KL divergence between softened student and teacher outputs.
pub fn kd_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var> {
    check_temperature(temperature)?;
    let (batch, classes) = logits_dims(tape, student_logits)?;
    if teacher_logits.shape() != [batch, classes] {
        return Err(Error::shape("kd_loss", &[batch, classes], teacher_logits.shape()));
    }
    let teacher_log_probs = log_softmax_rows(teacher_logits.data(), classes, temperature);
    let t2 = temperature * temperature;
    match direction {
        KlDirection::TeacherStudent => {
            let teacher_probs: Vec<f64> = teacher_log_probs.iter().map(|l| l.exp()).collect();
            tape.soft_target_loss(
                student_logits,
                &teacher_probs,
                Some(&teacher_log_probs),
                temperature,
                t2,
            )
        }
        KlDirection::StudentTeacher => {
            let log_ps = tape.log_softmax(student_logits, temperature)?;
            let ps = tape.exp(log_ps)?;
            let log_pt = tape.constant(&Tensor::new(vec![batch, classes], teacher_log_probs)?);
            let diff = tape.sub(log_ps, log_pt)?;
            let weighted = tape.mul(ps, diff)?;
            let total = tape.sum(weighted)?;
            tape.scale(total, t2 / batch as f64)
        }
    }
}

/// `(1 - alpha) * CE + alpha * KD`. Teacher logits may be absent only when `alpha == 0`.
pub fn total_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: Option<&Tensor>,
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return cross_entropy(tape, student_logits, labels);
    }
    let teacher = teacher_logits.ok_or_else(|| {
        Error::Config(format!("alpha = {} requires teacher logits", cfg.alpha))
    })?;
    if cfg.alpha == 1.0 {
        return kd_loss(tape, student_logits, teacher, cfg.temperature, cfg.kl_direction);
    }
    let ce = cross_entropy(tape, student_logits, labels)?;
    let kd = kd_loss(tape, student_logits, teacher, cfg.temperature, cfg.kl_direction)?;
    let ce = tape.scale(ce, 1.0 - cfg.alpha)?;
    let kd = tape.scale(kd, cfg.alpha)?;
    tape.add(ce, kd)
}
