//! Training: RMS-prop over shuffled mini-batches, regulation weights refreshed
//! from the current item embeddings each epoch (optionally each batch), early
//! stopping on the validation score with best-weight restore, and a
//! finite-difference audit of the analytic gradients.

use crate::config::{derive_seed, RunConfig, Task, Variant};
use crate::dataset::{build_bundle, sample_negatives_rng, DatasetBundle, Interaction, Split};
use crate::disentangle::apply_bn_updates;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, primary_score, EvalResult};
use crate::model::{Model, TrainSample};
use crate::params::{Grads, RmsProp};
use crate::regulate::effective_alpha;
use crate::tape::{DetachMode, Graph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::rc::Rc;
use std::time::Instant;

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_loss: f64,
    /// Mean contrastive bound over the batches that trained it.
    pub mi: Option<f64>,
    /// Mean negated head log-likelihood over the same batches.
    pub lld: Option<f64>,
    /// Validation score in "lower is better" form.
    pub val_score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub task: String,
    pub variant: String,
    pub seed: u64,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_seconds: f64,
    /// Validation metrics at the restored best weights.
    pub validation: EvalResult,
}

/// Patience-based stopping on a "lower is better" score. An epoch counts as
/// an improvement only when it strictly beats the best seen so far, so
/// plateaus run the patience down rather than resetting it.
pub struct EarlyStopper {
    patience: usize,
    seen: usize,
    bad: usize,
    pub best_score: f64,
    pub best_epoch: usize,
}

pub struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper {
            patience,
            seen: 0,
            bad: 0,
            best_score: f64::INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> Verdict {
        let epoch = self.seen;
        self.seen += 1;
        if score < self.best_score {
            self.best_score = score;
            self.best_epoch = epoch;
            self.bad = 0;
            Verdict {
                improved: true,
                stop: false,
            }
        } else {
            self.bad += 1;
            Verdict {
                improved: false,
                stop: self.bad >= self.patience,
            }
        }
    }
}

/// Materialize one epoch of training examples. Rating: every train record.
/// Ranking: every train record as a positive plus `train_negatives` fresh
/// negatives, resampled per epoch. Regulation weights are filled in later.
fn epoch_samples(bundle: &DatasetBundle, cfg: &RunConfig, epoch: usize) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    match cfg.task {
        Task::Rating => {
            for r in bundle.split_records(Split::Train) {
                out.push(TrainSample {
                    user: r.user,
                    item: r.item,
                    target: r.rating as f64,
                    alpha: 0.0,
                });
            }
        }
        Task::Ranking => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                cfg.seed,
                &format!("train-neg:{epoch}"),
            ));
            for r in bundle.split_records(Split::Train) {
                out.push(TrainSample {
                    user: r.user,
                    item: r.item,
                    target: 1.0,
                    alpha: 0.0,
                });
                for neg in
                    sample_negatives_rng(bundle, r.user, cfg.train_negatives, &[r.item], &mut rng)
                {
                    out.push(TrainSample {
                        user: r.user,
                        item: neg,
                        target: 0.0,
                        alpha: 0.0,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Train("train split is empty".into()));
    }
    Ok(out)
}

/// Fill in each sample's regulation weight under the current item embeddings.
/// The pinned variants never need the embedding table.
fn assign_alphas(model: &Model, bundle: &DatasetBundle, samples: &mut [TrainSample]) {
    let variant = model.cfg.variant;
    let table = match variant {
        Variant::Full | Variant::NoMi => model.item_interest_table(bundle),
        Variant::NoWt | Variant::NoSl => Vec::new(),
    };
    for s in samples.iter_mut() {
        s.alpha = effective_alpha(
            variant,
            bundle,
            &table,
            s.user,
            s.item,
            model.cfg.similarity_threshold,
        );
    }
}

/// Fit the model on the bundle's train split, early-stopping on the
/// validation split, and leave the best-epoch weights in the model.
pub fn train(model: &mut Model, bundle: &DatasetBundle) -> Result<TrainReport> {
    let cfg = model.cfg.clone();
    let started = Instant::now();
    if bundle.split_records(Split::Validation).next().is_none() {
        return Err(Error::Train(
            "early stopping needs a non-empty validation split".into(),
        ));
    }

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut opt = RmsProp::new(&model.store, cfg.rms_decay, cfg.rms_eps);
    let mut grads = Grads::zeros_like(&model.store);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut history: Vec<EpochStats> = Vec::new();
    let mut epochs_run = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        let mut samples = epoch_samples(bundle, &cfg, epoch)?;
        if !cfg.alpha_per_batch {
            assign_alphas(model, bundle, &mut samples);
        }
        samples.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut task_sum = 0.0;
        let mut mi_sum = 0.0;
        let mut lld_sum = 0.0;
        let mut batches = 0usize;
        let mut mi_batches = 0usize;

        let mut start = 0usize;
        while start < samples.len() {
            let end = (start + cfg.batch_size).min(samples.len());
            if cfg.alpha_per_batch {
                assign_alphas(model, bundle, &mut samples[start..end]);
            }
            let batch = &samples[start..end];

            let mut g = Graph::new(&model.store);
            let fwd = model.forward_batch(
                &mut g,
                bundle,
                batch,
                true,
                Some(&mut dropout_rng),
                cfg.variant.uses_mi(),
            )?;
            grads.reset();
            g.backward(fwd.loss, &mut grads);
            loss_sum += g.scalar(fwd.loss);
            task_sum += g.scalar(fwd.task_loss);
            if let Some(mi) = fwd.mi {
                mi_sum += g.scalar(mi);
                mi_batches += 1;
            }
            if let Some(lld) = fwd.lld {
                lld_sum += g.scalar(lld);
            }
            batches += 1;
            let bn = fwd.bn_updates;
            drop(g);

            opt.step(&mut model.store, &grads, cfg.learning_rate);
            apply_bn_updates(&mut model.store, &bn);
            start = end;
        }

        let val = evaluate(model, bundle, Split::Validation)?;
        let score = primary_score(&val);
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            task_loss: task_sum / batches as f64,
            mi: (mi_batches > 0).then(|| mi_sum / mi_batches as f64),
            lld: (mi_batches > 0).then(|| lld_sum / mi_batches as f64),
            val_score: score,
        });

        let verdict = stopper.observe(score);
        if verdict.improved {
            best_store = model.store.clone();
        }
        if verdict.stop {
            stopped_early = true;
            break;
        }
    }

    model.store = best_store;
    let validation = evaluate(model, bundle, Split::Validation)?;
    Ok(TrainReport {
        task: cfg.task.name().to_string(),
        variant: cfg.variant.name().to_string(),
        seed: cfg.seed,
        history,
        best_epoch: stopper.best_epoch,
        epochs_run,
        stopped_early,
        train_seconds: started.elapsed().as_secs_f64(),
        validation,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub scalars_checked: usize,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_offset: usize,
}

/// Small dense interaction graph for the gradient audit: every user has a
/// train history, every batch item has raters, and trust edges make some
/// pairs friend-recommended.
fn audit_bundle() -> DatasetBundle {
    let tr = Split::Train;
    let records = vec![
        (0, 1, 5),
        (0, 2, 3),
        (0, 4, 1),
        (1, 0, 4),
        (1, 2, 2),
        (2, 3, 5),
        (2, 5, 4),
        (3, 1, 2),
        (3, 4, 4),
        (4, 0, 1),
        (4, 5, 3),
        (5, 3, 3),
        (5, 2, 5),
    ]
    .into_iter()
    .map(|(user, item, rating)| Interaction {
        user,
        item,
        rating,
        split: tr,
    })
    .collect();
    let edges = vec![(0, 1), (0, 2), (1, 3), (2, 0), (3, 4), (4, 5), (5, 1)];
    build_bundle(records, edges, (0..6).collect(), (0..6).collect())
}

fn audit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.d = 4;
    cfg.d_prime = 4;
    cfg.dropout = 0.0;
    cfg.batch_norm = true;
    cfg.lambda = 0.5;
    cfg.seed = 7;
    cfg
}

/// Compare every analytic parameter gradient against a central finite
/// difference of the training loss on a fixed three-sample batch.
///
/// The loss routes gradients asymmetrically: the head-fitting term sees
/// detached embeddings, and the contrastive term sees frozen head parameters.
/// To measure the same partial derivatives the backward pass computes, the
/// difference quotients replay the base pass's detached values and read
/// frozen parameters from a snapshot of the unperturbed store.
///
/// `corrupt` scales the largest analytic gradient by 1.05 before comparing,
/// to confirm the audit actually detects a wrong gradient.
pub fn gradient_check(step: f64, corrupt: bool) -> Result<GradCheckReport> {
    let bundle = audit_bundle();
    let cfg = audit_config();
    let mut model = Model::new(&cfg, bundle.n_users, bundle.n_items)?;
    let samples = [
        TrainSample {
            user: 0,
            item: 0,
            target: 4.0,
            alpha: 1.0,
        },
        TrainSample {
            user: 2,
            item: 2,
            target: 3.0,
            alpha: 0.0,
        },
        TrainSample {
            user: 4,
            item: 3,
            target: 2.0,
            alpha: 1.0,
        },
    ];

    let mut grads = Grads::zeros_like(&model.store);
    let captured = {
        let mut g = Graph::new(&model.store);
        g.detach = DetachMode::Capture(Vec::new());
        let fwd = model.forward_batch(&mut g, &bundle, &samples, true, None, true)?;
        g.backward(fwd.loss, &mut grads);
        match std::mem::replace(&mut g.detach, DetachMode::Normal) {
            DetachMode::Capture(buf) => Rc::new(buf),
            _ => unreachable!(),
        }
    };

    if corrupt {
        let mut worst = (0usize, 0usize, 0.0f64);
        for id in model.store.ids() {
            if !model.store.is_trainable(id) {
                continue;
            }
            for (k, &v) in grads.of(id).iter().enumerate() {
                if v.abs() > worst.2 {
                    worst = (id.0 as usize, k, v.abs());
                }
            }
        }
        grads.data[worst.0][worst.1] *= 1.05;
    }

    let frozen = model.store.clone();
    let fd_loss = |model: &Model, captured: &Rc<Vec<Vec<f64>>>| -> Result<f64> {
        let mut g = Graph::with_frozen_source(&model.store, &frozen);
        g.detach = DetachMode::Replay(Rc::clone(captured));
        let fwd = model.forward_batch(&mut g, &bundle, &samples, true, None, true)?;
        Ok(g.scalar(fwd.loss))
    };

    let n = model.store.num_trainable_scalars();
    let mut max_rel = 0.0f64;
    let mut worst_tensor = String::new();
    let mut worst_offset = 0usize;
    for idx in 0..n {
        let (id, off) = model.store.locate_trainable(idx);
        model.store.nudge(id, off, step);
        let lp = fd_loss(&model, &captured)?;
        model.store.nudge(id, off, -2.0 * step);
        let lm = fd_loss(&model, &captured)?;
        model.store.nudge(id, off, step);
        let fd = (lp - lm) / (2.0 * step);
        let a = grads.of(id)[off];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        if rel > max_rel {
            max_rel = rel;
            worst_tensor = model.store.name(id).to_string();
            worst_offset = off;
        }
    }
    Ok(GradCheckReport {
        scalars_checked: n,
        max_rel_err: max_rel,
        worst_tensor,
        worst_offset,
    })
}
