//! Training loop: Adam with coupled L2 weight decay, a warmup plus
//! multi-step learning-rate schedule, per-batch skeleton mixing, and
//! top-1 evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_batch_mix, BodyPartition, MixPolicy};
use crate::data::SkeletonSample;
use crate::error::{Error, Result};
use crate::model::TaCnn;
use crate::tape::{Ctx, Gradients, Tape, Var};
use crate::tensor::{Element, Tensor4};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainConfig::default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "TrainConfig::default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "TrainConfig::default_milestones")]
    pub milestones: Vec<usize>,
    #[serde(default = "TrainConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "TrainConfig::default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop once train accuracy reaches this threshold (overfit runs).
    #[serde(default)]
    pub stop_at_train_acc: Option<f64>,
}

impl TrainConfig {
    fn default_epochs() -> usize {
        800
    }
    fn default_base_lr() -> f64 {
        1e-3
    }
    fn default_lr_decay() -> f64 {
        0.1
    }
    fn default_milestones() -> Vec<usize> {
        vec![650, 730, 770]
    }
    fn default_weight_decay() -> f64 {
        1e-4
    }
    fn default_batch_size() -> usize {
        64
    }

    /// Per-dataset batch size / weight decay / warmup presets.
    pub fn for_dataset(name: &str) -> Result<Self> {
        let mut c = Self::default();
        match name {
            "ntu" | "ntu60" | "ntu120" => {}
            "nucla" => c.batch_size = 16,
            "sbu" => {
                c.batch_size = 8;
                c.weight_decay = 2e-4;
                c.warmup_epochs = 30;
            }
            other => {
                return Err(Error::config(format!(
                    "unknown dataset profile '{other}' (ntu, ntu120, nucla, sbu)"
                )))
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1".to_string()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        for w in self.milestones.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::config("milestones must be strictly increasing".to_string()));
            }
        }
        if let Some(&last) = self.milestones.last() {
            if last >= self.epochs {
                return Err(Error::config(format!(
                    "milestone {last} is not below epochs {}",
                    self.epochs
                )));
            }
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup must be shorter than the run".to_string()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: Self::default_epochs(),
            base_lr: Self::default_base_lr(),
            lr_decay: Self::default_lr_decay(),
            milestones: Self::default_milestones(),
            weight_decay: Self::default_weight_decay(),
            batch_size: Self::default_batch_size(),
            warmup_epochs: 0,
            seed: 0,
            stop_at_train_acc: None,
        }
    }
}

/// Learning rate at an epoch: a linear ramp from 0 to `base_lr` over the
/// warmup epochs, then `base_lr * lr_decay^(milestones passed)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.warmup_epochs {
        return config.base_lr * epoch as f64 / config.warmup_epochs as f64;
    }
    let passed = config.milestones.iter().filter(|&&m| epoch >= m).count();
    config.base_lr * config.lr_decay.powi(passed as i32)
}

/// Adam with bias correction. Weight decay is coupled: `g += wd * p`
/// before the moment updates.
pub struct Adam<E: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Element> Adam<E> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` given `grads`. Parameters missing a
    /// gradient are treated as having a zero data gradient (weight decay
    /// still applies). The parameter list must be in the same order on
    /// every call.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor4<E>)],
        grads: &Gradients<E>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params.iter().map(|(_, p)| (vec![E::zero(); p.numel()], vec![E::zero(); p.numel()])).collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::usage("adam state does not match the parameter list".to_string()));
        }
        self.step += 1;
        let b1 = E::from_f64_lossy(self.beta1);
        let b2 = E::from_f64_lossy(self.beta2);
        let one = E::one();
        let corr1 = E::from_f64_lossy(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = E::from_f64_lossy(1.0 - self.beta2.powi(self.step as i32));
        let lr_e = E::from_f64_lossy(lr);
        let wd = E::from_f64_lossy(weight_decay);
        let eps = E::from_f64_lossy(self.eps);
        for ((name, p), (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            let grad = grads.for_param(p).cloned();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gval = grad.as_ref().map_or(E::zero(), |g| g.data()[i]);
                if !gval.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite gradient in parameter '{name}' at index {i}"
                    )));
                }
                let g = gval + wd * pd[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                pd[i] = pd[i] - lr_e * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl<E: Element> Default for Adam<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// One JSONL metrics record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub stopped_early: bool,
}

pub fn metrics_jsonl(metrics: &[EpochMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

fn batch_vars(tape: &mut Tape<f32>, batch: &[SkeletonSample]) -> (Vec<Vec<Var>>, Var) {
    let k = batch[0].label.len();
    let samples: Vec<Vec<Var>> = batch
        .iter()
        .map(|s| s.persons.iter().map(|p| tape.leaf(p.clone())).collect())
        .collect();
    let mut target = Tensor4::zeros([batch.len(), k, 1, 1]);
    for (i, s) in batch.iter().enumerate() {
        for (j, &y) in s.label.iter().enumerate() {
            target.set([i, j, 0, 0], y);
        }
    }
    let target = tape.constant(target);
    (samples, target)
}

/// Per epoch: seeded shuffle, per-batch mixing, batched forward,
/// soft-target cross entropy, backward, Adam. Emits one metrics record
/// per epoch. On divergence the model is restored to the end of the last
/// finite epoch and a numeric error is returned.
pub fn train_loop(
    model: &mut TaCnn<f32>,
    train: &[SkeletonSample],
    val: Option<&[SkeletonSample]>,
    config: &TrainConfig,
    mix: &MixPolicy,
    partition: Option<&BodyPartition>,
) -> Result<TrainOutcome> {
    config.validate()?;
    mix.validate()?;
    if train.is_empty() {
        return Err(Error::input("training dataset is empty".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut adam = Adam::<f32>::new();
    let mut metrics = Vec::new();
    let mut last_good: Vec<u8> = model.save_bytes()?;
    let mut stopped_early = false;

    'epochs: for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut batch: Vec<SkeletonSample> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            if mix.alpha > 0.0 && batch.len() >= 2 {
                if let Some(partition) = partition {
                    let policy = MixPolicy { seed: rng.gen::<u64>(), ..mix.clone() };
                    let (mixed, _) = apply_batch_mix(&batch, &policy, partition)?;
                    batch = mixed;
                }
            }
            let mut tape = Tape::new();
            let (samples, target) = batch_vars(&mut tape, &batch);
            let mut ctx = Ctx::train(&mut rng);
            let logits = model.forward_batch(&mut tape, &samples, &mut ctx)?;
            let loss = tape.softmax_xent(logits, target)?;
            let loss_val = tape.value(loss).data()[0] as f64;
            if !loss_val.is_finite() {
                *model = TaCnn::load_bytes(&last_good)?;
                return Err(Error::numeric(format!(
                    "loss diverged to {loss_val} at epoch {epoch}; restored last finite state"
                )));
            }
            loss_sum += loss_val * batch.len() as f64;
            seen += batch.len();
            let grads = tape.backward(loss)?;
            let mut params = model.named_params_mut();
            adam.step(&mut params, &grads, lr, config.weight_decay)?;
            model.step += 1;
        }
        let train_acc = evaluate(model, train)?.top1;
        let val_acc = match val {
            Some(v) => Some(evaluate(model, v)?.top1),
            None => None,
        };
        metrics.push(EpochMetrics { epoch, lr, loss: loss_sum / seen as f64, train_acc, val_acc });
        last_good = model.save_bytes()?;
        if let Some(th) = config.stop_at_train_acc {
            if train_acc >= th {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    Ok(TrainOutcome { metrics, stopped_early })
}

/// One coordinate-scaling trial: the per-coordinate factors applied to
/// every sample and the resulting top-1 accuracy.
#[derive(Debug, Clone)]
pub struct CoordScaleRow {
    pub factors: Vec<f32>,
    pub accuracy: f64,
}

/// Coordinate-sensitivity harness: evaluates the model on the unscaled
/// dataset (the baseline row, factors all 1), then on `trials` copies
/// with per-coordinate factors drawn uniformly from `[0, 1]`.
pub fn coord_scale_experiment(
    model: &TaCnn<f32>,
    dataset: &[SkeletonSample],
    trials: usize,
    seed: u64,
) -> Result<Vec<CoordScaleRow>> {
    if dataset.is_empty() {
        return Err(Error::input("coordinate scaling needs a dataset".to_string()));
    }
    let coords = dataset[0].coords();
    let mut rows = Vec::with_capacity(trials + 1);
    rows.push(CoordScaleRow {
        factors: vec![1.0; coords],
        accuracy: evaluate(model, dataset)?.top1,
    });
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let factors = crate::augment::random_scale_factors(coords, &mut rng);
        let scaled: Vec<SkeletonSample> = dataset
            .iter()
            .map(|s| crate::augment::scale_coordinates(s, &factors))
            .collect::<Result<_>>()?;
        let accuracy = evaluate(model, &scaled)?.top1;
        rows.push(CoordScaleRow { factors, accuracy });
    }
    Ok(rows)
}

/// CSV with header `s_x,s_y,s_z,accuracy` (generic coordinate names past
/// the third).
pub fn coord_scale_csv(rows: &[CoordScaleRow]) -> String {
    let coords = rows.first().map_or(0, |r| r.factors.len());
    let names = ["s_x", "s_y", "s_z"];
    let mut out = String::new();
    for c in 0..coords {
        if c < names.len() {
            out.push_str(names[c]);
        } else {
            out.push_str(&format!("s_{c}"));
        }
        out.push(',');
    }
    out.push_str("accuracy\n");
    for r in rows {
        for f in &r.factors {
            out.push_str(&format!("{f},"));
        }
        out.push_str(&format!("{}\n", r.accuracy));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub top1: f64,
    pub per_class: Vec<ClassAccuracy>,
}

impl EvalReport {
    /// CSV with a `class,correct,total,accuracy` header.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,correct,total,accuracy\n");
        for c in &self.per_class {
            let acc = if c.total == 0 { 0.0 } else { c.correct as f64 / c.total as f64 };
            out.push_str(&format!("{},{},{},{}\n", c.class, c.correct, c.total, acc));
        }
        out
    }
}

fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy (argmax of logits vs argmax of the label vector) plus a
/// per-class breakdown. Eval mode; batches internally for speed.
pub fn evaluate(model: &TaCnn<f32>, dataset: &[SkeletonSample]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::input("evaluation dataset is empty".to_string()));
    }
    let k = model.config.classes;
    let mut per_class: Vec<ClassAccuracy> =
        (0..k).map(|class| ClassAccuracy { class, correct: 0, total: 0 }).collect();
    let mut correct_total = 0usize;
    for chunk in dataset.chunks(32) {
        let mut tape = Tape::inference();
        let mut ctx = Ctx::eval();
        let samples: Vec<Vec<Var>> = chunk
            .iter()
            .map(|s| s.persons.iter().map(|p| tape.leaf(p.clone())).collect())
            .collect();
        let logits = model.forward_batch(&mut tape, &samples, &mut ctx)?;
        let out = tape.value(logits);
        for (i, s) in chunk.iter().enumerate() {
            if s.label.len() != k {
                return Err(Error::input(format!(
                    "sample {} has {} classes, model expects {k}",
                    s.id,
                    s.label.len()
                )));
            }
            let row: Vec<f32> = (0..k).map(|j| out.at([i, j, 0, 0])).collect();
            let pred = argmax(&row);
            let truth = s.class();
            per_class[truth].total += 1;
            if pred == truth {
                per_class[truth].correct += 1;
                correct_total += 1;
            }
        }
    }
    Ok(EvalReport { top1: correct_total as f64 / dataset.len() as f64, per_class })
}
