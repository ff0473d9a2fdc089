use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::eval::{evaluate, predict_logits};
use super::{Adam, TrainConfig};
use crate::diffcore::{ParamId, Tape, Tensor, Var};
use crate::distill::{distill_objective, DistillSignal};
use crate::encoder::{Batch, DualEncoderModel};
use crate::error::{Error, Result};
use crate::peft::{self, PeftVariant};
use crate::synthdata::{Dataset, Splits};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    /// Weights from the best validation epoch.
    pub model: DualEncoderModel,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub valid_accuracy: f64,
    pub history: Vec<EpochLog>,
}

fn mean_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let log_p = tape.log_softmax(logits)?;
    let picked = tape.pick(log_p, labels)?;
    let nll = tape.scale(picked, -1.0);
    Ok(tape.mean(nll))
}

/// Shared minibatch loop. `objective` builds the scalar loss for one batch;
/// its last argument holds the batch's positions within `train`.
fn fit<F>(
    mut model: DualEncoderModel,
    data: &Dataset,
    train: &[usize],
    valid: &[usize],
    cfg: &TrainConfig,
    mut objective: F,
) -> Result<Trained>
where
    F: FnMut(&mut Tape, &DualEncoderModel, &Batch, &[usize]) -> Result<Var>,
{
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    let head: HashSet<ParamId> = model.head_ids().into_iter().collect();
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, DualEncoderModel)> = None;
    let mut history = Vec::new();
    model.store.zero_grad();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (step, pos) in order.chunks(cfg.batch_size).enumerate() {
            let idx: Vec<usize> = pos.iter().map(|&p| train[p]).collect();
            let batch = data.batch(&idx);
            let mut tape = Tape::new();
            let loss = objective(&mut tape, &model, &batch, pos)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss became {value} at epoch {epoch}, step {step}")));
            }
            total += value * idx.len() as f64;
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store, |id| if head.contains(&id) { cfg.lr_head } else { cfg.lr_backbone });
        }
        let valid_accuracy = evaluate(&model, data, valid, None)?.accuracy;
        history.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            valid_accuracy,
        });
        if best.as_ref().is_none_or(|(_, acc, _)| valid_accuracy > *acc) {
            best = Some((epoch, valid_accuracy, model.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if cfg.patience > 0 && epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(match best {
        Some((epoch, acc, mut m)) => {
            m.store.zero_grad();
            Trained {
                model: m,
                best_epoch: Some(epoch),
                valid_accuracy: acc,
                history,
            }
        }
        None => Trained {
            valid_accuracy: evaluate(&model, data, valid, None)?.accuracy,
            model,
            best_epoch: None,
            history,
        },
    })
}

/// Full fine-tuning with cross-entropy on the teacher's partition.
pub fn train_teacher(model: DualEncoderModel, data: &Dataset, splits: &Splits, cfg: &TrainConfig) -> Result<Trained> {
    if model.attachment().is_some() {
        return Err(Error::invalid("the teacher is fully fine-tuned and must not carry a PEFT attachment"));
    }
    if let Some((_, name, _)) = model.store.iter().find(|(_, _, t)| !t.is_trainable()) {
        return Err(Error::invalid(format!("teacher tensor {name} is frozen")));
    }
    data.spec.check_encoder(&model.config)?;
    fit(model, data, &splits.teacher_train, &splits.valid_teacher, cfg, |tape, m, batch, _| {
        let out = m.forward(tape, batch, false)?;
        mean_ce(tape, out.logits, &batch.labels)
    })
}

/// Attaches `variant` to a copy of `backbone` and trains only the PEFT blocks
/// and the head on the student partition under `cfg.gate`.
pub fn train_student(
    backbone: &DualEncoderModel,
    variant: PeftVariant,
    teacher: &DualEncoderModel,
    data: &Dataset,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<Trained> {
    if teacher.config != backbone.config {
        return Err(Error::Config(format!(
            "teacher encoder {:?} does not match student backbone {:?}",
            teacher.config, backbone.config
        )));
    }
    if backbone.attachment().is_some() {
        return Err(Error::invalid("student backbone already carries a PEFT attachment"));
    }
    data.spec.check_encoder(&backbone.config)?;
    let mut student = backbone.clone();
    peft::attach(&mut student, variant, cfg.seed)?;

    let train = &splits.student_train;
    let cached = if cfg.cache_teacher_logits {
        Some(predict_logits(teacher, data, train)?)
    } else {
        None
    };
    let policy = cfg.gate.clone();
    fit(student, data, train, &splits.valid_student, cfg, |tape, m, batch, pos| {
        let teacher_logits = match &cached {
            Some(all) => {
                let c = all.shape()[1];
                let rows = pos.iter().flat_map(|&p| all.row(p).iter().copied()).collect();
                Tensor::new(&[pos.len(), c], rows)?
            }
            None => teacher.logits(batch)?,
        };
        let signal = DistillSignal::new(&teacher_logits, policy.temperature)?;
        let out = m.forward(tape, batch, false)?;
        Ok(distill_objective(tape, out.logits, &signal, &batch.labels, &policy)?.loss)
    })
}
