//! Optimisation loop: Adam with a step learning-rate decay, per-epoch
//! mutual-learning schedule, JSON-lines logging and held-out evaluation.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ResampleTaps, Scalar, Tape, Tensor, Var};
use crate::losses::{
    across_space_loss, bce_loss, mutual_loss, total_loss, LossConfig, LossError, LossReport,
    Teacher,
};
use crate::metrics::{EvalReport, Evaluator, MetricsError};
use crate::model::{BiMapperModel, Checkpoint, FrameInput, ModelError, Stream, StreamOutputs};
use crate::synthworld::{ego_taps, Dataset, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training split is empty")]
    DatasetEmpty,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter {index}: shape {param:?} but gradient {grad:?}")]
    ShapeMismatch {
        index: usize,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing training log: {0}")]
    Log(#[from] std::io::Error),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates for a list of tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.m[index], &self.v[index])
    }

    /// One bias-corrected update of every parameter. A missing gradient is
    /// treated as zero.
    pub fn step<'a>(
        &mut self,
        lr: f64,
        params: impl IntoIterator<Item = (&'a mut Tensor<T>, Option<&'a Tensor<T>>)>,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(lr), T::lit(c.eps));
        for (i, (p, g)) in params.into_iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(TrainError::ShapeMismatch {
                        index: i,
                        param: p.shape().to_vec(),
                        grad: g.shape().to_vec(),
                    });
                }
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let gd = g.map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = gd.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Also log the gradient norm each active teacher term sends into its
    /// own (teacher) stream. Costs one extra backward pass per term.
    pub detach_probe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 10,
            batch_size: 1,
            seed: 0,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            detach_probe: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.lr_decay_epoch > self.epochs {
            return bad("lr_decay_epoch must not exceed epochs");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_grad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClass<V> {
    pub divider: V,
    pub ped_crossing: V,
    pub boundary: V,
    pub all: V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iou: PerClass<f64>,
    pub cd: PerClass<Option<f64>>,
}

impl EpochRecord {
    pub fn new(epoch: usize, r: &EvalReport) -> Self {
        Self {
            epoch,
            iou: PerClass {
                divider: r.divider.iou,
                ped_crossing: r.ped_crossing.iou,
                boundary: r.boundary.iou,
                all: r.all.iou,
            },
            cd: PerClass {
                divider: r.divider.cd,
                ped_crossing: r.ped_crossing.cd,
                boundary: r.boundary.cd,
                all: r.all.cd,
            },
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Losses of one frame, built on the caller's tape.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub total: Var,
    pub report: LossReport,
    /// Scheduled mutual terms by teacher, whether or not they enter `total`.
    pub mutual_terms: Vec<(Teacher, Var)>,
    pub outputs: StreamOutputs,
}

pub fn sample_loss<T: Scalar>(
    model: &BiMapperModel,
    tape: &mut Tape<T>,
    p: &[Var],
    input: &FrameInput,
    epoch: usize,
    cfg: &LossConfig,
) -> Result<SampleLoss, TrainError> {
    let out = model.forward(tape, p, input)?;
    let targets = tape.constant(input.targets.cast());
    let bce = bce_loss(tape, out.probs, targets, input.target_mask.clone())?;
    let asl = across_space_loss(tape, &out.per_view_lv_logits, &input.camera_labels)?;
    let mutual = mutual_loss(tape, out.fg_gv, out.fg_lv, epoch, cfg)?;
    let (total, report) = total_loss(tape, bce, asl, mutual.total, epoch, cfg)?;
    Ok(SampleLoss {
        total,
        report,
        mutual_terms: mutual.terms,
        outputs: out,
    })
}

/// Squared gradient norm over parameters of one stream.
fn stream_sq_norm<T: Scalar>(
    model: &BiMapperModel,
    p: &[Var],
    g: &Gradients<T>,
    stream: Stream,
) -> f64 {
    model
        .params()
        .iter()
        .zip(p)
        .filter(|(param, _)| param.stream() == Some(stream))
        .filter_map(|(_, v)| g.get(*v))
        .map(|t| t.sum_squares().to_f64().unwrap_or(f64::NAN))
        .sum()
}

/// Precomputes model inputs for every frame of the dataset.
pub fn prepare_inputs(
    model: &BiMapperModel,
    dataset: &Dataset,
) -> Result<Vec<FrameInput>, TrainError> {
    let world = dataset.config();
    let cfg = model.config();
    // rigs are usually shared; build each distinct gather table once
    let mut tables: Vec<(crate::synthworld::CameraRig, Arc<ResampleTaps>)> = Vec::new();
    dataset
        .frames
        .iter()
        .map(|f| {
            let taps = match tables.iter().find(|(r, _)| *r == f.rig) {
                Some((_, t)) => t.clone(),
                None => {
                    let t = Arc::new(ResampleTaps {
                        out_shape: cfg.grid_size,
                        taps: ego_taps(&world.grid, &f.rig, &world.ipm),
                    });
                    tables.push((f.rig.clone(), t.clone()));
                    t
                }
            };
            Ok(FrameInput::with_taps(f, world, cfg, taps)?)
        })
        .collect()
}

/// Dataset-level metrics of the model on `inputs`.
pub fn evaluate(
    model: &BiMapperModel,
    inputs: &[&FrameInput],
    resolution: f64,
) -> Result<EvalReport, TrainError> {
    let preds = inputs
        .par_iter()
        .map(|i| model.predict(i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut ev = Evaluator::new(resolution);
    for (p, i) in preds.iter().zip(inputs) {
        ev.add(p, &i.ego_gt)?;
    }
    Ok(ev.report())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Held-out metrics after the last epoch.
    pub final_eval: EvalReport,
}

/// Trains `model` on the training split and evaluates on the held-out split
/// after every epoch. Log lines are also written to `sink` as they occur.
pub fn train(
    mut model: BiMapperModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_idx = dataset.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::DatasetEmpty);
    }
    let val_idx = dataset.split_indices(Split::Val);
    let inputs = prepare_inputs(&model, dataset)?;
    let val: Vec<&FrameInput> = val_idx.iter().map(|&i| &inputs[i]).collect();
    let resolution = dataset.config().grid.resolution;

    let mut adam = Adam::<f32>::new(cfg.adam, model.params().iter().map(|p| p.value.len()));
    let mut log = Vec::new();
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<(), TrainError> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        log.push(rec);
        Ok(())
    };

    let mut step = 0usize;
    let mut last_eval = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<f32>::new();
            let p = model.bind(&mut tape, true);
            let mut totals = Vec::with_capacity(batch.len());
            let mut reports = Vec::with_capacity(batch.len());
            let mut probe = 0.0f64;
            for &i in batch {
                let s = sample_loss(&model, &mut tape, &p, &inputs[i], epoch, &cfg.loss)?;
                if cfg.detach_probe {
                    for &(teacher, term) in &s.mutual_terms {
                        if !s.report.active_teachers.contains(&teacher) {
                            continue;
                        }
                        let g = tape.backward(term)?;
                        let stream = match teacher {
                            Teacher::Lv => Stream::Local,
                            Teacher::Gv => Stream::Global,
                        };
                        probe += stream_sq_norm(&model, &p, &g, stream);
                    }
                }
                totals.push(s.total);
                reports.push(s.report);
            }
            let mut sum = totals[0];
            for &t in &totals[1..] {
                sum = tape.add(sum, t)?;
            }
            let loss = tape.scale(sum, 1.0 / batch.len() as f32);
            if !tape.item(loss).is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = p.iter().map(|&v| grads.take(v)).collect();
            adam.step(
                lr,
                model
                    .params_mut()
                    .iter_mut()
                    .zip(&grads)
                    .map(|(param, g)| (&mut param.value, g.as_ref())),
            )?;

            let n = reports.len() as f64;
            let mean = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
            let losses = LossReport {
                bce: mean(|r| r.bce),
                asl: mean(|r| r.asl),
                mutual: mean(|r| r.mutual),
                total: mean(|r| r.total),
                active_teachers: reports[0].active_teachers.clone(),
            };
            let rec = StepRecord {
                epoch,
                step,
                lr,
                losses,
                teacher_grad: cfg.detach_probe.then(|| probe.sqrt()),
            };
            emit(LogRecord::Step(rec), &mut log)?;
            step += 1;
        }

        let report = evaluate(&model, &val, resolution)?;
        emit(LogRecord::Epoch(EpochRecord::new(epoch, &report)), &mut log)?;
        last_eval = Some(report);
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            epoch: cfg.epochs,
            seed: cfg.seed,
        },
        log,
        final_eval: last_eval.expect("at least one epoch"),
    })
}
