//! Loss, Adam optimization, the epoch loop, evaluation, and the
//! 2-way-K-shot few-shot protocol.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ImageSample;
use crate::model::{model_backward, model_forward, ModelConfig, ParameterSet};

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub lr0: f64,
    pub lambda_l1: f64,
    pub l2_decay: f64,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
    /// Worker threads for per-batch sample fan-out; gradients reduce in
    /// manifest order, so the result is identical for any worker count.
    pub workers: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 20,
            lr0: 0.02,
            lambda_l1: 0.002,
            l2_decay: 0.08,
            epochs: 150,
            lr_step: 10,
            lr_gamma: 0.5,
            seed: 0,
            workers: 1,
        }
    }
}

/// Softmax cross-entropy plus the L1 penalty over weight matrices
/// (biases excluded). Returns the scalar loss and d(loss)/d(logits).
pub fn loss(
    logits: &[f64],
    label: usize,
    params: &ParameterSet,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            num_classes: logits.len(),
        });
    }
    for &l in logits {
        if !l.is_finite() {
            return Err(Error::Divergence("non-finite logits".into()));
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_prob = logits[label] - max - total.ln();
    let mut scalar = -log_prob;
    scalar += lambda * l1_norm(params);
    let mut grad: Vec<f64> = exps.iter().map(|&e| e / total).collect();
    grad[label] -= 1.0;
    Ok((scalar, grad))
}

fn l1_norm(params: &ParameterSet) -> f64 {
    let mut total = 0.0;
    params.visit(|info, m| {
        if !info.is_bias {
            total += m.data.iter().map(|v| v.abs()).sum::<f64>();
        }
    });
    total
}

/// Add lambda * sign(w) to weight gradients; sign(0) = 0, biases skipped.
pub fn l1_subgradient(params: &ParameterSet, lambda: f64, grads: &mut ParameterSet) {
    if lambda == 0.0 {
        return;
    }
    let sources = params.tensors();
    for (idx, (is_bias, gm)) in grads.tensors_mut().into_iter().enumerate() {
        if is_bias {
            continue;
        }
        for (g, &w) in gm.data.iter_mut().zip(&sources[idx].1.data) {
            if w > 0.0 {
                *g += lambda;
            } else if w < 0.0 {
                *g -= lambda;
            }
        }
    }
}

/// Adam moments and step counter; moment shapes mirror the parameters.
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. L2 decay is decoupled and applied as
/// `w *= 1 - lr * l2_decay` to weight matrices before the update; masked
/// entries are re-zeroed afterwards.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    lr: f64,
    l2_decay: f64,
) -> Result<()> {
    let grad_mats = grads.tensors();
    for (_, gm) in &grad_mats {
        if gm.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(
                "non-finite gradient encountered in optimizer step".into(),
            ));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);

    let mut m_mats = state.m.tensors_mut();
    let mut v_mats = state.v.tensors_mut();
    for (idx, (is_bias, w)) in params.tensors_mut().into_iter().enumerate() {
        let g = grad_mats[idx].1;
        let m = &mut m_mats[idx].1;
        let v = &mut v_mats[idx].1;
        if !is_bias && l2_decay > 0.0 {
            let shrink = 1.0 - lr * l2_decay;
            for wv in w.data.iter_mut() {
                *wv *= shrink;
            }
        }
        for k in 0..w.data.len() {
            let gk = g.data[k];
            m.data[k] = ADAM_BETA1 * m.data[k] + (1.0 - ADAM_BETA1) * gk;
            v.data[k] = ADAM_BETA2 * v.data[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            w.data[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        w.enforce_mask();
    }
    Ok(())
}

/// Step schedule: lr0 * gamma^floor(epoch / step).
pub fn lr_at(epoch: usize, hyper: &TrainHyper) -> f64 {
    hyper.lr0 * hyper.lr_gamma.powi((epoch / hyper.lr_step) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={} train_loss={} train_acc={} val_acc={}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_acc
        )
    }

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_acc
        )
    }
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub best_params: ParameterSet,
    pub best_val_acc: f64,
    /// Weights after the last epoch.
    pub final_params: ParameterSet,
    pub history: Vec<EpochRecord>,
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: ParameterSet,
}

fn run_sample(
    config: &ModelConfig,
    params: &ParameterSet,
    sample: &ImageSample,
    input_threshold: f64,
) -> Result<SampleResult> {
    let (logits, tape) = model_forward(config, params, sample, input_threshold)?;
    let (scalar, dlogits) = loss(&logits, sample.label, params, 0.0)?;
    let grads = model_backward(config, params, &tape, &dlogits)?;
    Ok(SampleResult {
        loss: scalar,
        correct: argmax(&logits) == sample.label,
        grads,
    })
}

/// Mean gradient over a batch; fan-out across workers with a fixed-order
/// reduction, so the result is independent of the worker count.
fn batch_gradient(
    config: &ModelConfig,
    params: &ParameterSet,
    batch: &[&ImageSample],
    input_threshold: f64,
    workers: usize,
) -> Result<(ParameterSet, f64, usize)> {
    let results: Vec<Result<SampleResult>> = if workers <= 1 || batch.len() < 2 {
        batch
            .iter()
            .map(|s| run_sample(config, params, s, input_threshold))
            .collect()
    } else {
        let chunk = batch.len().div_ceil(workers);
        let mut out: Vec<Option<Result<SampleResult>>> = Vec::new();
        out.resize_with(batch.len(), || None);
        std::thread::scope(|scope| {
            for (slice, res) in batch.chunks(chunk).zip(out.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (s, slot) in slice.iter().zip(res.iter_mut()) {
                        *slot = Some(run_sample(config, params, s, input_threshold));
                    }
                });
            }
        });
        out.into_iter().map(|r| r.expect("worker filled slot")).collect()
    };

    let mut total_loss = 0.0;
    let mut correct = 0;
    let mut acc: Option<ParameterSet> = None;
    for res in results {
        let r = res?;
        total_loss += r.loss;
        correct += r.correct as usize;
        match &mut acc {
            None => acc = Some(r.grads),
            Some(a) => {
                let sources = r.grads.tensors();
                for (idx, (_, am)) in a.tensors_mut().into_iter().enumerate() {
                    for (av, &sv) in am.data.iter_mut().zip(&sources[idx].1.data) {
                        *av += sv;
                    }
                }
            }
        }
    }
    let mut mean = acc.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f64;
    mean.visit_mut(|_, m| {
        for v in m.data.iter_mut() {
            *v *= inv;
        }
    });
    Ok((mean, total_loss * inv, correct))
}

fn argmax(logits: &[f64]) -> usize {
    // Ties break toward the lowest class id.
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

/// Seeded-shuffle mini-batch training with per-epoch validation and
/// best-validation checkpointing.
pub fn train(
    config: &ModelConfig,
    hyper: &TrainHyper,
    train_set: &[ImageSample],
    val_set: &[ImageSample],
    input_threshold: f64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    for s in train_set.iter().chain(val_set) {
        if s.label >= config.num_classes {
            return Err(Error::InvalidLabel {
                label: s.label,
                num_classes: config.num_classes,
            });
        }
    }
    config.validate()?;
    let mut params = ParameterSet::init(config, hyper.seed);
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best_params = params.clone();
    let mut best_val_acc = f64::NEG_INFINITY;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..hyper.epochs {
        let lr = lr_at(epoch, hyper);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (mut grads, batch_loss, batch_correct) =
                batch_gradient(config, &params, &batch, input_threshold, hyper.workers)?;
            l1_subgradient(&params, hyper.lambda_l1, &mut grads);
            adam_step(&mut params, &grads, &mut state, lr, hyper.l2_decay)?;
            epoch_loss += batch_loss * batch.len() as f64;
            epoch_correct += batch_correct;
        }
        let train_loss =
            epoch_loss / train_set.len() as f64 + hyper.lambda_l1 * l1_norm(&params);
        let train_acc = epoch_correct as f64 / train_set.len() as f64;
        let val_acc = if val_set.is_empty() {
            0.0
        } else {
            evaluate(config, &params, val_set, input_threshold, hyper.workers)?.0
        };
        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best_params = params.clone();
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss,
            train_acc,
            val_acc,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        best_params,
        best_val_acc,
        final_params: params,
        history,
    })
}

/// Accuracy and per-class confusion matrix (rows = true class, columns =
/// predicted class).
pub fn evaluate(
    config: &ModelConfig,
    params: &ParameterSet,
    dataset: &[ImageSample],
    input_threshold: f64,
    workers: usize,
) -> Result<(f64, Vec<Vec<usize>>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("evaluation set is empty".into()));
    }
    let predictions: Vec<Result<usize>> = if workers <= 1 {
        dataset
            .iter()
            .map(|s| Ok(argmax(&model_forward(config, params, s, input_threshold)?.0)))
            .collect()
    } else {
        let chunk = dataset.len().div_ceil(workers);
        let mut out: Vec<Option<Result<usize>>> = Vec::new();
        out.resize_with(dataset.len(), || None);
        std::thread::scope(|scope| {
            for (slice, res) in dataset.chunks(chunk).zip(out.chunks_mut(chunk)) {
                scope.spawn(move || {
                    for (s, slot) in slice.iter().zip(res.iter_mut()) {
                        *slot = Some(
                            model_forward(config, params, s, input_threshold)
                                .map(|(logits, _)| argmax(&logits)),
                        );
                    }
                });
            }
        });
        out.into_iter().map(|r| r.expect("worker filled slot")).collect()
    };
    let mut confusion = vec![vec![0usize; config.num_classes]; config.num_classes];
    let mut correct = 0;
    for (sample, pred) in dataset.iter().zip(predictions) {
        let pred = pred?;
        if sample.label >= config.num_classes {
            return Err(Error::InvalidLabel {
                label: sample.label,
                num_classes: config.num_classes,
            });
        }
        confusion[sample.label][pred] += 1;
        if pred == sample.label {
            correct += 1;
        }
    }
    Ok((correct as f64 / dataset.len() as f64, confusion))
}

#[derive(Debug, Clone)]
pub struct FewShotOutcome {
    pub k: usize,
    pub episode_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// 2-way-K-shot protocol: per episode, draw K labeled samples per class,
/// train from scratch with batch ceil(K/2) and lr 0.001*K, and evaluate
/// on the held-out remainder of the pool.
#[allow(clippy::too_many_arguments)]
pub fn few_shot_train(
    config: &ModelConfig,
    k: usize,
    pool: &[ImageSample],
    episodes: usize,
    epochs: usize,
    input_threshold: f64,
    seed: u64,
    workers: usize,
) -> Result<FewShotOutcome> {
    if !(1..=10).contains(&k) {
        return Err(Error::Config(format!("K must be in 1..=10, got {k}")));
    }
    if config.num_classes != 2 {
        return Err(Error::Config("few-shot protocol requires two classes".into()));
    }
    let class0: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == 0).collect();
    let class1: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == 1).collect();
    if class0.len() <= k || class1.len() <= k {
        return Err(Error::InvalidInput(format!(
            "pool too small for K={k}: {} / {} samples per class",
            class0.len(),
            class1.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accuracies = Vec::with_capacity(episodes);
    for episode in 0..episodes {
        let mut c0 = class0.clone();
        let mut c1 = class1.clone();
        c0.shuffle(&mut rng);
        c1.shuffle(&mut rng);
        let support: Vec<ImageSample> = c0[..k]
            .iter()
            .chain(&c1[..k])
            .map(|&i| pool[i].clone())
            .collect();
        let query: Vec<ImageSample> = c0[k..]
            .iter()
            .chain(&c1[k..])
            .map(|&i| pool[i].clone())
            .collect();
        // Tiny support sets cannot absorb the full-training lasso/decay
        // pressure, so episodes train unregularized.
        let hyper = TrainHyper {
            batch_size: k.div_ceil(2),
            lr0: 0.001 * k as f64,
            lambda_l1: 0.0,
            l2_decay: 0.0,
            epochs,
            seed: seed.wrapping_add(episode as u64 + 1),
            workers,
            ..TrainHyper::default()
        };
        let outcome = train(config, &hyper, &support, &[], input_threshold, |_| {})?;
        let (acc, _) = evaluate(config, &outcome.final_params, &query, input_threshold, workers)?;
        accuracies.push(acc);
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let var = accuracies
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / accuracies.len() as f64;
    Ok(FewShotOutcome {
        k,
        episode_accuracies: accuracies,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
    })
}
