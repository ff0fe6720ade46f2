//! Training objectives: map BCE, the per-view camera-frame cross-entropy,
//! the teacher-masked mutual loss between the two streams, and their total.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Scalar, Tape, Var};
use crate::bevgrid::VOID;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{logits} logit maps for {labels} label maps")]
    ViewCountMismatch { logits: usize, labels: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MutualForm {
    /// Binary cross-entropy against the binarized teacher.
    Ce,
    /// Bernoulli KL divergence from the soft teacher.
    Kl,
    /// Mean squared error against the soft teacher.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    LvOnly,
    GvOnly,
    Synchronous,
    Asynchronous,
}

/// Which stream acts as teacher in a mutual-loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Teacher {
    #[serde(rename = "LV")]
    Lv,
    #[serde(rename = "GV")]
    Gv,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    /// Epoch from which the global stream also teaches (asynchronous mode).
    pub aml_start_epoch: usize,
    pub mutual_form: MutualForm,
    pub fg_threshold: f64,
    pub ablate_asl: bool,
    pub ablate_aml: bool,
    pub teacher_mode: TeacherMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            aml_start_epoch: 5,
            mutual_form: MutualForm::Ce,
            fg_threshold: 0.5,
            ablate_asl: false,
            ablate_aml: false,
            teacher_mode: TeacherMode::Asynchronous,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::Config(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.fg_threshold > 0.0 && self.fg_threshold < 1.0) {
            return Err(LossError::Config(format!(
                "fg_threshold {} must lie in (0, 1)",
                self.fg_threshold
            )));
        }
        Ok(())
    }

    /// Teaching streams at `epoch`, before any ablation.
    pub fn scheduled_teachers(&self, epoch: usize) -> Vec<Teacher> {
        match self.teacher_mode {
            TeacherMode::LvOnly => vec![Teacher::Lv],
            TeacherMode::GvOnly => vec![Teacher::Gv],
            TeacherMode::Synchronous => vec![Teacher::Lv, Teacher::Gv],
            TeacherMode::Asynchronous if epoch < self.aml_start_epoch => vec![Teacher::Lv],
            TeacherMode::Asynchronous => vec![Teacher::Lv, Teacher::Gv],
        }
    }

    /// Teachers whose terms enter the total at `epoch`.
    pub fn active_teachers(&self, epoch: usize) -> Vec<Teacher> {
        if self.ablate_aml {
            Vec::new()
        } else {
            self.scheduled_teachers(epoch)
        }
    }
}

/// Mean BCE of per-class probabilities against binary targets, over cells
/// where `mask` is true.
pub fn bce_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    targets: Var,
    mask: Arc<Vec<bool>>,
) -> Result<Var, LossError> {
    let n = tape.value(probs).len();
    let p = tape.reshape(probs, &[n])?;
    let y = tape.reshape(targets, &[n])?;
    Ok(tape.bce(p, y, Some(mask))?)
}

/// Sum over views of the mean per-cell softmax cross-entropy of camera-frame
/// logits, skipping VOID cells.
pub fn across_space_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[Var],
    labels: &[Arc<Vec<u8>>],
) -> Result<Var, LossError> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(LossError::ViewCountMismatch {
            logits: logits.len(),
            labels: labels.len(),
        });
    }
    let mut total: Option<Var> = None;
    for (&l, y) in logits.iter().zip(labels) {
        let ce = tape.cross_entropy(l, y.clone(), VOID)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    Ok(total.expect("non-empty"))
}

/// One directed term: the student is pulled toward the detached teacher.
pub fn mutual_term<T: Scalar>(
    tape: &mut Tape<T>,
    teacher: Var,
    student: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    let t = tape.stop_gradient(teacher);
    Ok(match cfg.mutual_form {
        MutualForm::Ce => {
            let mask = tape.threshold(t, T::lit(cfg.fg_threshold));
            tape.bce(student, mask, None)?
        }
        MutualForm::Kl => tape.binary_kl(t, student)?,
        MutualForm::L2 => tape.mse(student, t)?,
    })
}

/// Mutual loss between the two foreground maps.
#[derive(Debug, Clone)]
pub struct MutualParts {
    /// Sum of the scheduled terms.
    pub total: Var,
    /// Each scheduled term with the teacher that produced it.
    pub terms: Vec<(Teacher, Var)>,
}

/// Scheduled mutual terms at `epoch`. The LV-taught term has the global
/// stream as student; the GV-taught term has the local stream as student.
pub fn mutual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    fg_gv: Var,
    fg_lv: Var,
    epoch: usize,
    cfg: &LossConfig,
) -> Result<MutualParts, LossError> {
    let mut terms = Vec::new();
    for teacher in cfg.scheduled_teachers(epoch) {
        let v = match teacher {
            Teacher::Lv => mutual_term(tape, fg_lv, fg_gv, cfg)?,
            Teacher::Gv => mutual_term(tape, fg_gv, fg_lv, cfg)?,
        };
        terms.push((teacher, v));
    }
    let mut total = terms[0].1;
    for &(_, v) in &terms[1..] {
        total = tape.add(total, v)?;
    }
    Ok(MutualParts { total, terms })
}

/// Per-step loss values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bce: f64,
    pub asl: f64,
    pub mutual: f64,
    pub total: f64,
    pub active_teachers: Vec<Teacher>,
}

/// `bce + asl + alpha * mutual`, leaving ablated terms out of the graph.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    bce: Var,
    asl: Var,
    mutual: Var,
    epoch: usize,
    cfg: &LossConfig,
) -> Result<(Var, LossReport), LossError> {
    let mut total = bce;
    if !cfg.ablate_asl {
        total = tape.add(total, asl)?;
    }
    if !cfg.ablate_aml {
        let m = tape.scale(mutual, T::lit(cfg.alpha));
        total = tape.add(total, m)?;
    }
    let f = |v: Var| tape.item(v).to_f64().unwrap_or(f64::NAN);
    let report = LossReport {
        bce: f(bce),
        asl: f(asl),
        mutual: f(mutual),
        total: f(total),
        active_teachers: cfg.active_teachers(epoch),
    };
    Ok((total, report))
}
