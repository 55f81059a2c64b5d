//! Adam training with early stopping, k-fold cross-validation, ensembling and
//! the overlap metrics used for reporting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::project_chm_kernels;
use crate::data::{normalize_clip, VolumeSample};
use crate::error::{Error, Result};
use crate::network::{build_network, dice_loss, one_hot, NetworkConfig, SegmentationModel};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub folds: usize,
    /// Seeds the fold partition.
    pub split_seed: u64,
    /// Seeds parameter initialization and sample order; offset by fold.
    pub init_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 50,
            patience: 5,
            batch_size: 1,
            folds: 5,
            split_seed: 0,
            init_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(Error::config(format!(
                "batch_size must be 1, got {}",
                self.batch_size
            )));
        }
        if self.folds < 2 {
            return Err(Error::config(format!("folds must be >= 2, got {}", self.folds)));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::config("patience and max_epochs must be >= 1"));
        }
        let finite_pos = |x: f64| x.is_finite() && x > 0.0;
        if !finite_pos(self.learning_rate) || !finite_pos(self.adam_eps) {
            return Err(Error::config("learning_rate and adam_eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Initialization seed of fold `fold`.
    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.init_seed.wrapping_add(fold as u64)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: ParamStore<f64>,
    second: ParamStore<f64>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<f64>) -> Self {
        let zeros = || {
            let mut s = ParamStore::new();
            for (k, v) in params.iter() {
                s.insert(k, Tensor::zeros(v.shape())).expect("unique names");
            }
            s
        };
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &ParamStore<f64>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((name, p), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let g = grads.get(name).expect("gradient for every parameter");
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A sample converted to network tensors once.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    /// Normalized `[1,C,D,H,W]` input.
    pub input: Tensor<f64>,
    /// One-hot `[1,K,D,H,W]` target.
    pub target: Tensor<f64>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn new(sample: &VolumeSample) -> Result<Self> {
        sample.validate()?;
        let mut shape = vec![1];
        shape.extend_from_slice(sample.image.shape());
        Ok(Self {
            id: sample.id.clone(),
            input: normalize_clip(&sample.image)?.reshape(shape)?,
            target: one_hot(&sample.label, sample.num_classes)?,
            labels: sample.labels(),
        })
    }
}

fn non_finite_error(tape: &Tape<f64>, context: &str) -> Error {
    match tape.first_non_finite() {
        Some((v, op, idx)) => Error::NonFinite(format!(
            "{context}: node {} ({op}) holds a non-finite value at flat index {idx}",
            v.index()
        )),
        None => Error::NonFinite(format!("{context}: non-finite loss")),
    }
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grad(
    model: &SegmentationModel<f64>,
    sample: &Prepared,
) -> Result<(f64, ParamStore<f64>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = tape.constant(sample.input.clone());
    let t = tape.constant(sample.target.clone());
    let out = model.forward(&mut tape, &bound, x)?;
    let probs = tape.softmax_channels(out.logits)?;
    let loss = dice_loss(&mut tape, probs, t)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(non_finite_error(&tape, &format!("sample {}", sample.id)));
    }
    let mut grads = tape.backward(loss)?;
    let g = bound.gradients(&tape, &mut grads);
    if let Some((name, _)) = g.iter().find(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "sample {}: gradient of {name} is not finite",
            sample.id
        )));
    }
    Ok((value, g))
}

/// Dice loss of the model on one sample, forward only.
pub fn eval_loss(model: &SegmentationModel<f64>, sample: &Prepared) -> Result<f64> {
    let mut tape = Tape::new();
    let probs = model.predict(&sample.input)?;
    let p = tape.constant(probs);
    let t = tape.constant(sample.target.clone());
    let loss = dice_loss(&mut tape, p, t)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("validation loss of {}", sample.id)));
    }
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Early-stopping bookkeeping on a minimized validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    /// Parameters of the best validation epoch.
    pub model: SegmentationModel<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Trains `model` on `train`, early-stopping on `val`. Epochs count from 1.
pub fn train_fold(
    mut model: SegmentationModel<f64>,
    train: &[&Prepared],
    val: &[&Prepared],
    cfg: &TrainConfig,
    fold: usize,
) -> Result<FoldResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("train and validation sets must be non-empty"));
    }
    if let Some(s) = train.iter().find(|t| val.iter().any(|v| v.id == t.id)) {
        return Err(Error::usage(format!("sample {} is in both train and val", s.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.fold_seed(fold));
    rng.set_stream(1);
    let mut adam = Adam::new(cfg, &model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for &i in &order {
            let (loss, grads) = loss_and_grad(&model, train[i])?;
            train_sum += loss;
            adam.step(&mut model.params, &grads);
            project_chm_kernels(&mut model.params);
        }
        let mut val_sum = 0.0;
        for v in val {
            val_sum += eval_loss(&model, v)?;
        }
        let record = EpochRecord {
            fold,
            epoch,
            train_loss: train_sum / train.len() as f64,
            val_loss: val_sum / val.len() as f64,
        };
        let (improved, stop) = stopper.update(epoch, record.val_loss);
        history.push(record);
        if improved {
            best = model.params.clone();
        }
        if stop {
            break;
        }
    }
    model.params = best;
    Ok(FoldResult {
        model,
        history,
        best_epoch: stopper.best_epoch().expect("at least one epoch"),
        best_val_loss: stopper.best_loss(),
    })
}

/// Shuffled partition of `0..n` into `k` folds; the first `n % k` folds hold
/// one extra item.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::config(format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// Mean of the models' softmax outputs.
pub fn ensemble_predict(models: &[&SegmentationModel<f64>], x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::usage("ensemble needs at least one model"))?;
    if let Some(m) = models.iter().find(|m| m.config != first.config) {
        return Err(Error::usage(format!(
            "ensemble config mismatch: {:?} vs {:?}",
            m.config.variant, first.config.variant
        )));
    }
    let mut acc = first.predict(x)?;
    for m in &models[1..] {
        let p = m.predict(x)?;
        acc = acc.zip_map(&p, |a, b| a + b);
    }
    let inv = 1.0 / models.len() as f64;
    Ok(acc.map(|v| v * inv))
}

/// Per-voxel argmax over channels of a `[1,K,D,H,W]` tensor; ties keep the
/// lowest class.
pub fn argmax_labels(probs: &Tensor<f64>) -> Result<Vec<usize>> {
    let [n, k, d, h, w] = probs.dims5("argmax_labels")?;
    if n != 1 {
        return Err(Error::shape("argmax_labels", "batch must be 1"));
    }
    let vol = d * h * w;
    let p = probs.data();
    Ok((0..vol)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if p[c * vol + v] > p[best * vol + v] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Dice and sensitivity of a binary prediction. Both are 1 when the class
/// is absent from prediction and truth.
pub fn binary_scores(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> (f64, f64) {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, t) in pred.zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fnn == 0 {
        return (1.0, 1.0);
    }
    let dice = 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64;
    let sens = if tp + fnn == 0 {
        0.0
    } else {
        tp as f64 / (tp + fnn) as f64
    };
    (dice, sens)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: Vec<f64>,
    pub sensitivity: Vec<f64>,
}

fn check_labels(pred: &[usize], truth: &[usize], k: usize) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::usage(format!(
            "prediction has {} voxels, truth {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(i) = pred.iter().chain(truth).position(|&c| c >= k) {
        return Err(Error::usage(format!("label at position {i} is not below {k}")));
    }
    Ok(())
}

/// Per-class Dice and sensitivity.
pub fn compute_metrics(pred: &[usize], truth: &[usize], k: usize) -> Result<Metrics> {
    check_labels(pred, truth, k)?;
    let (dice, sensitivity) = (0..k)
        .map(|c| binary_scores(pred.iter().map(|&p| p == c), truth.iter().map(|&t| t == c)))
        .unzip();
    Ok(Metrics { dice, sensitivity })
}

/// Reporting regions of the nested classes: whole = 1.., core = 2.., and
/// enhancing = 3...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Whole,
    Core,
    Enhancing,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Whole, Region::Core, Region::Enhancing];

    pub fn name(self) -> &'static str {
        match self {
            Region::Whole => "whole",
            Region::Core => "core",
            Region::Enhancing => "enhancing",
        }
    }

    pub fn contains(self, class: usize) -> bool {
        let lowest = match self {
            Region::Whole => 1,
            Region::Core => 2,
            Region::Enhancing => 3,
        };
        class >= lowest
    }
}

/// Dice and sensitivity for each [`Region`], in [`Region::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: [f64; 3],
    pub sensitivity: [f64; 3],
}

pub fn region_metrics(pred: &[usize], truth: &[usize], k: usize) -> Result<RegionMetrics> {
    check_labels(pred, truth, k)?;
    let mut out = RegionMetrics {
        dice: [0.0; 3],
        sensitivity: [0.0; 3],
    };
    for (i, r) in Region::ALL.into_iter().enumerate() {
        let (d, s) = binary_scores(
            pred.iter().map(|&p| r.contains(p)),
            truth.iter().map(|&t| r.contains(t)),
        );
        out.dice[i] = d;
        out.sensitivity[i] = s;
    }
    Ok(out)
}

/// Elementwise mean over samples, summed in order.
pub fn mean_region_metrics(items: &[RegionMetrics]) -> RegionMetrics {
    let n = items.len().max(1) as f64;
    let mut out = RegionMetrics {
        dice: [0.0; 3],
        sensitivity: [0.0; 3],
    };
    for m in items {
        for i in 0..3 {
            out.dice[i] += m.dice[i];
            out.sensitivity[i] += m.sensitivity[i];
        }
    }
    for i in 0..3 {
        out.dice[i] /= n;
        out.sensitivity[i] /= n;
    }
    out
}

/// Worker count from `MORPHGRAD_THREADS`, default 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var("MORPHGRAD_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!(
                "MORPHGRAD_THREADS must be a positive integer, got {s:?}"
            ))),
        },
    }
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub folds: Vec<FoldResult>,
    pub partition: Vec<Vec<usize>>,
    /// All-fold ensemble scored on each fold's validation split, averaged
    /// over samples.
    pub ensemble: RegionMetrics,
    /// Each sample scored by the model that did not train on it.
    pub out_of_fold: RegionMetrics,
}

/// Runs k-fold cross-validation. Folds are independent and may run on up to
/// `threads` workers; results do not depend on the worker count.
pub fn run_experiment(
    samples: &[VolumeSample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Experiment> {
    net.validate()?;
    cfg.validate()?;
    for s in samples {
        if s.num_classes != net.num_classes || s.channels() != net.input_channels {
            return Err(Error::config(format!(
                "sample {} ({} classes, {} channels) does not match the network",
                s.id,
                s.num_classes,
                s.channels()
            )));
        }
    }
    let prepared = samples.iter().map(Prepared::new).collect::<Result<Vec<_>>>()?;
    let partition = kfold_split(prepared.len(), cfg.folds, cfg.split_seed)?;
    let run_fold = |f: usize| -> Result<FoldResult> {
        let val: Vec<&Prepared> = partition[f].iter().map(|&i| &prepared[i]).collect();
        let train: Vec<&Prepared> = partition
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, idx)| idx.iter().map(|&i| &prepared[i]))
            .collect();
        let model = build_network(net, cfg.fold_seed(f))?;
        train_fold(model, &train, &val, cfg, f)
    };
    let folds = parallel_map(cfg.folds, threads.max(1), run_fold)?;
    let models: Vec<&SegmentationModel<f64>> = folds.iter().map(|f| &f.model).collect();
    let mut ens = Vec::new();
    let mut oof = Vec::new();
    for (f, idx) in partition.iter().enumerate() {
        for &i in idx {
            let s = &prepared[i];
            let pred = argmax_labels(&ensemble_predict(&models, &s.input)?)?;
            ens.push(region_metrics(&pred, &s.labels, net.num_classes)?);
            let own = argmax_labels(&folds[f].model.predict(&s.input)?)?;
            oof.push(region_metrics(&own, &s.labels, net.num_classes)?);
        }
    }
    Ok(Experiment {
        folds,
        partition,
        ensemble: mean_region_metrics(&ens),
        out_of_fold: mean_region_metrics(&oof),
    })
}

/// Evaluates `f(0..n)` on up to `threads` scoped workers, returning results
/// in index order.
fn parallel_map<T: Send>(
    n: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let workers = threads.min(n);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    (w..n)
                        .step_by(workers)
                        .map(|i| (i, f(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("fold worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every fold evaluated"))
        .collect()
}
