//! Sandwich training with stage-wise inplace distillation, and scratch
//! retraining of searched subnets.
//!
//! Each iteration runs the fullnet on the task loss, then one or more random
//! subnets and the tinynet on the stage distillation loss, each stage fed the
//! fullnet's stage input and regressed onto the fullnet's stage output. The
//! gradients of all branches are summed in that order and applied in a
//! single optimizer step.
//!
//! The training objective of a distillation branch is
//! `w · Σ_i mse_stage_i / (b · h_i · w_i)` for a batch of `b` examples and
//! stage outputs of spatial size `h_i × w_i`: the per-position mean of the
//! logged stage loss, weighted by `distill_weight`. Logged losses are the
//! unscaled stage losses.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{sgd_momentum_step, OptimState, SgdHyper};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::slimnet::{quantize, StageFeatureCache, SupernetSpec, Supernet, WidthConfig};
use crate::tape::{backward_scalar, Gradients, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplies the learning rate every `decay_epochs` epochs.
    pub lr_decay: f64,
    pub decay_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random subnets per iteration (the tinynet is extra).
    pub random_subnets: usize,
    pub tinynet: bool,
    pub distill_weight: f64,
    /// Rescale the summed gradient to at most this global norm before the
    /// step.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    /// Learning rate 0.025, momentum 0.9, weight decay 3e-4, no decay, one
    /// random subnet plus the tinynet per iteration.
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            lr: 0.025,
            lr_decay: 1.0,
            decay_epochs: 1,
            momentum: 0.9,
            weight_decay: 3e-4,
            random_subnets: 1,
            tinynet: true,
            distill_weight: 1.0,
            clip_norm: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_epochs == 0 {
            return Err(Error::InvalidArgument("batch size and decay epochs must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::InvalidArgument("gradient clip norm must be positive".into()));
        }
        if !(self.distill_weight >= 0.0) {
            return Err(Error::InvalidArgument("distillation weight must be nonnegative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidArgument("lr decay must be in (0, 1]".into()));
        }
        self.hyper(0).map(|_| ())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * Float::powi(self.lr_decay, (epoch / self.decay_epochs) as i32)
    }

    fn hyper(&self, epoch: usize) -> Result<SgdHyper> {
        let h = SgdHyper {
            lr: self.lr_at(epoch),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        };
        if !(h.lr > 0.0) || !(0.0..1.0).contains(&h.momentum) || !(h.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("sgd hyperparameters out of range".into()));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Full,
    Random,
    Tiny,
}

/// Full: every layer at `m`. Tiny: every layer at the smallest grid ratio.
/// Random: each layer's ratio drawn uniformly from the grid.
pub fn sample_width_config(spec: &SupernetSpec, mode: SampleMode, rng: &mut Rng) -> WidthConfig {
    match mode {
        SampleMode::Full => spec.full_config(),
        SampleMode::Tiny => spec.tiny_config(),
        SampleMode::Random => WidthConfig::new(
            spec.max_widths()
                .iter()
                .map(|&m| quantize(spec.ratio_grid[rng.gen_range(0..spec.ratio_grid.len())], m))
                .collect(),
        ),
    }
}

/// One logged iteration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    /// Per random subnet, per stage distillation loss.
    pub random: Vec<Vec<f64>>,
    /// Per stage distillation loss of the tinynet (empty when disabled).
    pub tiny: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

/// Where distillation targets come from.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a, T: Real> {
    /// The supernet's own fullnet in the same iteration.
    Inplace,
    /// A frozen network of the same architecture.
    External(&'a Supernet<T>),
}

impl<T: Real> Teacher<'_, T> {
    fn check(&self, net: &Supernet<T>) -> Result<()> {
        if let Teacher::External(t) = self {
            if t.spec() != net.spec() || !t.params().same_layout(net.params()) {
                return Err(Error::InvalidArgument("teacher architecture differs from the fullnet".into()));
            }
        }
        Ok(())
    }
}

fn check_finite(iteration: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            iteration,
            what: what.to_string(),
        })
    }
}

/// Distillation pass of one subnet over every stage. Returns its gradients
/// and per-stage losses.
pub fn distill_branch<T: Real>(
    net: &Supernet<T>,
    config: &WidthConfig,
    cache: &StageFeatureCache<T>,
    weight: f64,
) -> Result<(Gradients<T>, Vec<f64>)> {
    let spec = net.spec();
    let mut tape = Tape::new(net.params());
    let mut total = None;
    let mut losses = Vec::with_capacity(spec.num_stages());
    for s in 0..spec.num_stages() {
        let x = tape.constant(cache.inputs[s].clone());
        let (_, adapted) = net.stage_forward(&mut tape, s, &config.stage_gene(spec, s), x)?;
        let target = tape.constant(cache.targets[s].clone());
        let l = tape.mse_stage(adapted, target)?;
        losses.push(tape.value(l).item().as_f64());
        let shape = cache.targets[s].shape();
        let positions: usize = shape[0] * shape[2..].iter().product::<usize>();
        let l = tape.scale(l, T::from_f64(weight / positions as f64));
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidSpec("supernet has no stages".into()))?;
    Ok((backward_scalar(&mut tape, total)?, losses))
}

/// Runs one sandwich iteration and applies exactly one optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration<T: Real>(
    net: &mut Supernet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    teacher: Teacher<'_, T>,
    state: &mut OptimState<T>,
    rng: &mut Rng,
    iteration: usize,
) -> Result<TrainLogEntry> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (mut grads, task_loss, inplace) = {
        let mut tape = Tape::new(net.params());
        let x = tape.constant(images.clone());
        let (logits, ins, outs) = net.full_forward(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let task = check_finite(iteration, "task loss", tape.value(loss).item().as_f64())?;
        let cache = StageFeatureCache {
            inputs: ins.iter().map(|&v| tape.value(v).clone()).collect(),
            targets: outs.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        (backward_scalar(&mut tape, loss)?, task, cache)
    };
    let cache = match teacher {
        Teacher::Inplace => inplace,
        Teacher::External(t) => t.stage_features(images)?,
    };
    let spec = net.spec().clone();
    let mut random = Vec::with_capacity(cfg.random_subnets);
    for _ in 0..cfg.random_subnets {
        let config = sample_width_config(&spec, SampleMode::Random, rng);
        let (g, losses) = distill_branch(net, &config, &cache, cfg.distill_weight)?;
        for &l in &losses {
            check_finite(iteration, "random subnet distillation loss", l)?;
        }
        grads.accumulate(&g);
        random.push(losses);
    }
    let mut tiny = Vec::new();
    if cfg.tinynet {
        let (g, losses) = distill_branch(net, &spec.tiny_config(), &cache, cfg.distill_weight)?;
        for &l in &losses {
            check_finite(iteration, "tinynet distillation loss", l)?;
        }
        grads.accumulate(&g);
        tiny = losses;
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            what: "gradient".into(),
        });
    }
    if let Some(c) = cfg.clip_norm {
        grads.clip_norm(c);
    }
    sgd_momentum_step(net.params_mut(), &grads, state)?;
    Ok(TrainLogEntry {
        iteration,
        epoch: 0,
        lr: state.hyper.lr,
        task_loss,
        random,
        tiny,
    })
}

/// Minibatch index lists for one epoch, reshuffled by `rng`.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx = indices.to_vec();
    rng::shuffle(&mut idx, rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn check_dataset<T: Real>(net: &Supernet<T>, data: &Dataset) -> Result<()> {
    if data.image_shape() != net.spec().input {
        return Err(Error::InvalidDataset(format!(
            "images {:?} do not match network input {:?}",
            data.image_shape(),
            net.spec().input
        )));
    }
    if data.num_classes > net.spec().num_classes {
        return Err(Error::InvalidDataset(format!(
            "{} classes but the classifier has {}",
            data.num_classes,
            net.spec().num_classes
        )));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidDataset("empty training split".into()));
    }
    Ok(())
}

/// Trains the supernet for `cfg.epochs` epochs. `on_epoch` runs after every
/// epoch (checkpointing hooks in here).
pub fn train_supernet<T: Real>(
    net: &mut Supernet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    teacher: Teacher<'_, T>,
    mut on_epoch: impl FnMut(usize, &Supernet<T>) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dataset(net, data)?;
    teacher.check(net)?;
    let mut state = OptimState::new(net.params(), cfg.hyper(0)?)?;
    let mut rng = rng::rng_from_seed(rng::derive_seed(cfg.seed, &[rng::tag::TRAIN]));
    let mut log = TrainLog::default();
    let mut it = 0;
    for epoch in 0..cfg.epochs {
        state.hyper = cfg.hyper(epoch)?;
        for idx in epoch_batches(&data.train, cfg.batch_size, &mut rng) {
            let (x, y) = data.batch(&idx);
            let mut e = train_iteration(net, &x.cast(), &y, cfg, teacher, &mut state, &mut rng, it)?;
            e.epoch = epoch;
            log.entries.push(e);
            it += 1;
        }
        on_epoch(epoch, net)?;
    }
    Ok(log)
}

/// Plain training on the task loss with a fixed width configuration.
pub fn train_plain<T: Real>(net: &mut Supernet<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    let full = net.spec().full_config();
    train_with_sampler(net, data, cfg, |_, _| full.clone())
}

/// Single-path weight-sharing training: every iteration trains one width
/// configuration drawn uniformly from the grid, on the task loss only.
pub fn train_one_shot<T: Real>(net: &mut Supernet<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    let spec = net.spec().clone();
    train_with_sampler(net, data, cfg, |_, rng| sample_width_config(&spec, SampleMode::Random, rng))
}

fn train_with_sampler<T: Real>(
    net: &mut Supernet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut sample: impl FnMut(usize, &mut Rng) -> WidthConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_dataset(net, data)?;
    let mut state = OptimState::new(net.params(), cfg.hyper(0)?)?;
    let mut rng = rng::rng_from_seed(rng::derive_seed(cfg.seed, &[rng::tag::TRAIN]));
    let mut log = TrainLog::default();
    let mut it = 0;
    for epoch in 0..cfg.epochs {
        state.hyper = cfg.hyper(epoch)?;
        for idx in epoch_batches(&data.train, cfg.batch_size, &mut rng) {
            let (x, y) = data.batch(&idx);
            let config = sample(it, &mut rng);
            let grads = {
                let mut tape = Tape::new(net.params());
                let input = tape.constant(x.cast());
                let logits = net.subnet_forward(&mut tape, &config, input)?;
                let loss = tape.cross_entropy(logits, &y)?;
                let task = check_finite(it, "task loss", tape.value(loss).item().as_f64())?;
                log.entries.push(TrainLogEntry {
                    iteration: it,
                    epoch,
                    lr: state.hyper.lr,
                    task_loss: task,
                    random: Vec::new(),
                    tiny: Vec::new(),
                });
                backward_scalar(&mut tape, loss)?
            };
            let mut grads = grads;
            if let Some(c) = cfg.clip_norm {
                grads.clip_norm(c);
            }
            sgd_momentum_step(net.params_mut(), &grads, &mut state)?;
            it += 1;
        }
    }
    Ok(log)
}

/// Top-1 accuracy of `config` on the examples `idx`.
pub fn accuracy<T: Real>(net: &Supernet<T>, config: &WidthConfig, data: &Dataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::InvalidDataset("no examples to evaluate".into()));
    }
    let k = net.spec().num_classes;
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        let logits = net.predict(config, &x.cast())?;
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / idx.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Retrained<T> {
    pub net: Supernet<T>,
    pub accuracy: f64,
    pub log: TrainLog,
}

/// Builds a standalone network with the widths of `config`, freshly
/// initialised, trains it on the task loss and reports validation accuracy.
pub fn retrain_subnet<T: Real>(
    spec: &SupernetSpec,
    config: &WidthConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Retrained<T>> {
    config.validate(spec)?;
    let sub = spec.with_widths(config)?.single_stage();
    let mut net = Supernet::new(sub, rng::derive_seed(cfg.seed, &[rng::tag::RETRAIN, rng::tag::INIT]))?;
    let log = train_plain(&mut net, data, cfg)?;
    let full = net.spec().full_config();
    let accuracy = accuracy(&net, &full, data, &data.val)?;
    Ok(Retrained { net, accuracy, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_per_class, synth_blobs};
    use crate::slimnet::linear_ratio_grid;

    fn small_spec() -> SupernetSpec {
        SupernetSpec::six_layer([1, 8, 8], [4, 4, 6], 3, linear_ratio_grid(0.25, 4))
    }

    #[test]
    fn sample_modes() {
        let spec = SupernetSpec::six_layer([1, 8, 8], [40, 40, 40], 3, linear_ratio_grid(0.1, 10));
        let mut rng = rng::rng_from_seed(0);
        assert_eq!(sample_width_config(&spec, SampleMode::Full, &mut rng).channels, vec![40; 6]);
        assert_eq!(sample_width_config(&spec, SampleMode::Tiny, &mut rng).channels, vec![4; 6]);
        let r = sample_width_config(&spec, SampleMode::Random, &mut rng);
        assert!(r.validate(&spec).is_ok());
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let data = synth_blobs(12, 8, 3, 0.1, 1).unwrap();
        let mut net = Supernet::<f32>::new(small_spec(), 1).unwrap();
        let before = net.clone();
        let log = train_supernet(&mut net, &data, &TrainConfig::new(0, 4, 1), Teacher::Inplace, |_, _| Ok(())).unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn full_width_branch_has_zero_loss_and_gradient() {
        let data = synth_blobs(6, 8, 3, 0.1, 1).unwrap();
        let net = Supernet::<f64>::new(small_spec(), 2).unwrap();
        let (x, _) = data.batch(&[0, 1, 2]);
        let cache = net.stage_features(&x.cast()).unwrap();
        let (g, losses) = distill_branch(&net, &net.spec().full_config(), &cache, 1.0).unwrap();
        assert!(losses.iter().all(|&l| l == 0.0));
        assert!(g.as_slice().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn training_is_deterministic() {
        let data = split_per_class(&synth_blobs(48, 8, 3, 0.2, 1).unwrap(), 2, 3).unwrap();
        let run = || {
            let mut net = Supernet::<f32>::new(small_spec(), 5).unwrap();
            train_supernet(&mut net, &data, &TrainConfig::new(1, 8, 9), Teacher::Inplace, |_, _| Ok(())).unwrap();
            net
        };
        assert_eq!(run().params(), run().params());
    }

    #[test]
    fn branchless_training_equals_plain_training() {
        let data = synth_blobs(24, 8, 3, 0.2, 1).unwrap();
        let mut cfg = TrainConfig::new(2, 8, 4);
        cfg.random_subnets = 0;
        cfg.tinynet = false;
        let mut a = Supernet::<f32>::new(small_spec(), 5).unwrap();
        let mut b = a.clone();
        train_supernet(&mut a, &data, &cfg, Teacher::Inplace, |_, _| Ok(())).unwrap();
        train_plain(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn teacher_architecture_checked() {
        let data = synth_blobs(12, 8, 3, 0.1, 1).unwrap();
        let mut net = Supernet::<f32>::new(small_spec(), 1).unwrap();
        let other = Supernet::<f32>::new(
            SupernetSpec::six_layer([1, 8, 8], [4, 4, 8], 3, linear_ratio_grid(0.25, 4)),
            1,
        )
        .unwrap();
        let r = train_supernet(&mut net, &data, &TrainConfig::new(1, 4, 1), Teacher::External(&other), |_, _| Ok(()));
        assert!(r.is_err());
    }
}
