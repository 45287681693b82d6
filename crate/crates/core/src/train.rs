//! Speaker-prediction pretraining and task training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AdamConfig, AdamState, ParamStore, Tape};
use crate::dialogue::{Dialogue, NodeSequence};
use crate::encoder::EmbedMode;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::PolarModel;
use crate::tagger::sequence_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global L2 norm bound on each batch gradient.
    pub grad_clip: Option<f64>,
    pub psp_epochs: usize,
    /// Stop once dev F1 over all arguments reaches this value.
    pub early_stop_f1: Option<f64>,
    /// Emit one record per optimizer step.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            seed: 7,
            adam: AdamConfig::default(),
            grad_clip: Some(5.0),
            psp_epochs: 2,
            early_stop_f1: None,
            log_steps: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    PspEpoch {
        epoch: usize,
        loss: f64,
        accuracy: f64,
    },
    Step {
        epoch: usize,
        step: usize,
        loss: f64,
        alpha: f64,
    },
    Epoch {
        epoch: usize,
        loss: f64,
        alpha: f64,
        dev_f1_all: Option<f64>,
        dev_f1_cross: Option<f64>,
        dev_f1_intra: Option<f64>,
    },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_dev: Option<EvalReport>,
}

fn set_trainable(store: &mut ParamStore, trainable: impl Fn(&str) -> bool) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        p.requires_grad = trainable(&p.name);
    }
}

fn clip(store: &mut ParamStore, max_norm: f64) {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
}

fn apply(model: &mut PolarModel, adam: &mut AdamState, clip_norm: Option<f64>) -> Result<()> {
    model.store.ensure_grads();
    if let Some(c) = clip_norm {
        clip(&mut model.store, c);
    }
    adam.step(&mut model.store)
}

fn psp_batch_loss<R: Rng + ?Sized>(
    model: &PolarModel,
    seq: &NodeSequence,
    train: bool,
    rng: &mut R,
) -> Result<(Tape, crate::Var)> {
    let mut tape = Tape::new();
    let ids = model.encoder.ids(seq, &model.vocab, EmbedMode::Psp)?;
    let h = model.encoder.encode(&mut tape, &model.store, &ids, model.config.dropout, train, rng)?;
    let loss = model.encoder.psp_loss(&mut tape, &model.store, h, &seq.pronouns)?;
    Ok((tape, loss))
}

/// Fraction of labelled pronouns whose referent speaker is predicted.
pub fn psp_accuracy(model: &PolarModel, seqs: &[NodeSequence]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seq in seqs.iter().filter(|s| !s.pronouns.is_empty()) {
        let mut tape = Tape::new();
        let ids = model.encoder.ids(seq, &model.vocab, EmbedMode::Psp)?;
        let h = model.encoder.encode(&mut tape, &model.store, &ids, 0.0, false, &mut rng)?;
        let rows: Vec<usize> = seq.pronouns.iter().map(|&(r, _)| r).collect();
        let lp = model.encoder.psp_log_probs(&mut tape, &model.store, h, &rows)?;
        let lp = tape.value(lp);
        for (i, &(_, referent)) in seq.pronouns.iter().enumerate() {
            let row = lp.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            hit += usize::from(best == referent);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Trains the encoder and speaker head on pronoun referents.
pub fn psp_pretrain(
    model: &mut PolarModel,
    dialogues: &[Dialogue],
    config: &TrainConfig,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    config.validate()?;
    let seqs: Vec<NodeSequence> = dialogues
        .iter()
        .map(|d| model.linearize(d))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|s| !s.pronouns.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(Error::Empty("psp_pretrain: no labelled pronouns"));
    }
    set_trainable(&mut model.store, |n| n.starts_with("enc.") || n.starts_with("psp."));
    let mut adam = AdamState::new(&model.store, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5053_5000);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::new();
    let result = (|| {
        for epoch in 1..=config.psp_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for (step, batch) in order.chunks(config.batch_size).enumerate() {
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let (mut tape, loss) = psp_batch_loss(model, &seqs[i], true, &mut rng)?;
                    let l = tape.value(loss).item();
                    if !l.is_finite() {
                        return Err(Error::Diverged { epoch, step, loss: l });
                    }
                    total += l;
                    tape.backward(loss)?.accumulate_into(&mut model.store, scale);
                }
                apply(model, &mut adam, config.grad_clip)?;
            }
            let rec = LogRecord::PspEpoch {
                epoch,
                loss: total / seqs.len() as f64,
                accuracy: psp_accuracy(model, &seqs)?,
            };
            on_record(&rec);
            log.push(rec);
        }
        Ok(())
    })();
    model.store.zero_grads();
    set_trainable(&mut model.store, |_| true);
    result.map(|_| log)
}

/// Predicted copies of `dialogues` with roles replaced by decoded spans.
pub fn predict_dialogues(model: &PolarModel, dialogues: &[Dialogue]) -> Result<Vec<Dialogue>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    dialogues
        .iter()
        .map(|d| {
            let mut out = d.clone();
            out.roles = model.predict(d, &mut rng)?;
            Ok(out)
        })
        .collect()
}

pub fn evaluate_model(model: &PolarModel, dialogues: &[Dialogue]) -> Result<EvalReport> {
    evaluate(&predict_dialogues(model, dialogues)?, dialogues)
}

fn task_trainable(model: &PolarModel) -> impl Fn(&str) -> bool {
    let gated = model.fusion.mode == crate::gcn::FusionMode::Gated;
    move |n: &str| !n.starts_with("psp.") && (gated || !n.starts_with("fusion.gate"))
}

/// Task training with per-epoch dev evaluation; the best-dev parameters are
/// restored at the end.
pub fn train(
    model: &mut PolarModel,
    train_set: &[Dialogue],
    dev_set: Option<&[Dialogue]>,
    config: &TrainConfig,
    on_record: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let seqs: Vec<NodeSequence> = train_set.iter().map(|d| model.linearize(d)).collect::<Result<_>>()?;
    if seqs.is_empty() {
        return Err(Error::Empty("train: training corpus"));
    }
    let trainable = task_trainable(model);
    set_trainable(&mut model.store, &trainable);
    let mut adam = AdamState::new(&model.store, config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, EvalReport, ParamStore)> = None;
    let mut epochs_run = 0;
    let mut step = 0;

    let result = (|| {
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                let mut batch_loss = 0.0;
                for &i in batch {
                    let seq = &seqs[i];
                    let mut tape = Tape::new();
                    let out = model.forward(&mut tape, seq, true, &mut rng)?;
                    let loss = sequence_loss(&mut tape, out.log_probs, &seq.labels)?;
                    let l = tape.value(loss).item();
                    if !l.is_finite() {
                        return Err(Error::Diverged { epoch, step, loss: l });
                    }
                    batch_loss += l;
                    tape.backward(loss)?.accumulate_into(&mut model.store, scale);
                }
                apply(model, &mut adam, config.grad_clip)?;
                step += 1;
                total += batch_loss;
                if config.log_steps {
                    let rec = LogRecord::Step {
                        epoch,
                        step,
                        loss: batch_loss * scale,
                        alpha: model.alpha_value(),
                    };
                    on_record(&rec);
                    log.push(rec);
                }
            }
            epochs_run = epoch;
            let dev = dev_set.map(|d| evaluate_model(model, d)).transpose()?;
            let rec = LogRecord::Epoch {
                epoch,
                loss: total / seqs.len() as f64,
                alpha: model.alpha_value(),
                dev_f1_all: dev.as_ref().map(|r| r.all.f1),
                dev_f1_cross: dev.as_ref().map(|r| r.cross.f1),
                dev_f1_intra: dev.as_ref().map(|r| r.intra.f1),
            };
            on_record(&rec);
            log.push(rec);
            if let Some(report) = dev {
                let f1 = report.all.f1;
                if best.as_ref().is_none_or(|(_, b, _)| f1 > b.all.f1) {
                    best = Some((epoch, report, model.store.clone()));
                }
                if config.early_stop_f1.is_some_and(|t| f1 >= t) {
                    break;
                }
            }
        }
        Ok(())
    })();
    model.store.zero_grads();
    set_trainable(&mut model.store, |_| true);
    result?;
    let (best_epoch, best_dev) = match best {
        Some((epoch, report, store)) => {
            model.store = store;
            model.store.zero_grads();
            set_trainable(&mut model.store, |_| true);
            (Some(epoch), Some(report))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        log,
        epochs_run,
        best_epoch,
        best_dev,
    })
}

/// Line-delimited JSON rendering of a metrics log.
pub fn log_to_jsonl(log: &[LogRecord]) -> Result<String> {
    let mut s = String::new();
    for r in log {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}
