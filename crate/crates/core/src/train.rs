//! Self-supervised training loop.
//!
//! For every patch `x` and scale `k` a step evaluates both chains
//!
//! ```text
//! x_up   = f(x | k)          x_down = f(x | 1/k)         (first pass)
//! x_chk  = f(stop(x_up) | 1/k)
//! x_hat  = f(stop(x_down) | k)                           (second pass)
//! ```
//!
//! The consistency loss on `(x_hat, x_chk, x)` reaches the parameters only
//! through the second pass; the colour loss on `(x_up, x_down, x)` trains the
//! first pass. Gradients from both passes are summed into one ADAM update.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{dihedral, random_patch, Image};
use crate::losses::{color_targets, l1_mean, pooled_l1, LossReport, ScaleLoss};
use crate::net::{forward_train_tensor, Gradients, ModelConfig, ModelParameters, ScaleCondition};
use crate::optim::{learning_rate, AdamConfig, OptimizerState};
use crate::parallel::{map_reduce, Execution};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Attempts per step when the loss comes back non-finite.
pub const NON_FINITE_RETRIES: usize = 3;

/// Accumulation precision of network evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

/// Training hyper-parameters, including the model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lambda_color: f64,
    pub lr_init: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub scale_set: Vec<u32>,
    /// Run the chains of every scale in each step; otherwise each step uses
    /// one scale drawn uniformly from `scale_set`.
    pub multiscale: bool,
    /// `None` derives the epoch length from the dataset size.
    pub steps_per_epoch: Option<usize>,
    pub precision: Precision,
    pub n_resblocks: usize,
    pub n_channels: usize,
    pub residual_scaling: f64,
    /// Fixed-order reduction of per-sample gradients.
    pub deterministic: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            patch_size: 48,
            batch_size: 16,
            lambda_color: 0.2,
            lr_init: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_every: 200,
            adam: AdamConfig::default(),
            epochs: 1,
            seed: 0,
            scale_set: model.scale_set,
            multiscale: true,
            steps_per_epoch: Some(100),
            precision: Precision::F32,
            n_resblocks: model.n_resblocks,
            n_channels: model.n_channels,
            residual_scaling: model.residual_scaling,
            deterministic: true,
            execution: Execution::default(),
        }
    }
}

fn lcm(a: usize, b: usize) -> usize {
    let (mut x, mut y) = (a, b);
    while y != 0 {
        (x, y) = (y, x % y);
    }
    a / x * b
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_resblocks: self.n_resblocks,
            n_channels: self.n_channels,
            scale_set: self.scale_set.clone(),
            residual_scaling: self.residual_scaling,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let need = self
            .scale_set
            .iter()
            .fold(1usize, |acc, &k| lcm(acc, k as usize));
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(need) {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of every scale (lcm {need})",
                self.patch_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lambda_color >= 0.0 && self.lambda_color.is_finite()) {
            return Err(Error::Config("lambda_color must be finite and >= 0".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("lr_decay_factor must lie in (0, 1]".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("invalid ADAM constants".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        learning_rate(
            self.lr_init,
            self.lr_decay_factor,
            self.lr_decay_every,
            epoch,
        )
    }

    /// SHA-256 of the configuration with `epochs` and `execution` blanked,
    /// i.e. of every field that changes what a step computes.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.epochs = 0;
        canonical.execution = Execution::Sequential;
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Steps in one epoch: the configured override, or enough batches to
    /// cover every non-overlapping patch of the dataset once.
    pub fn epoch_steps(&self, dataset: &[Image]) -> usize {
        if let Some(n) = self.steps_per_epoch {
            return n;
        }
        let p = self.patch_size;
        let patches: usize = dataset
            .iter()
            .map(|img| (img.height() / p) * (img.width() / p))
            .sum();
        patches.div_ceil(self.batch_size).max(1)
    }
}

/// Parameter gradients of a batch, split by the pass that produced them.
#[derive(Debug, Clone)]
pub struct StepGradients<T> {
    /// From the colour loss through `f(x|k)` and `f(x|1/k)`.
    pub first_pass: Gradients<T>,
    /// From the consistency loss through the second applications.
    pub second_pass: Gradients<T>,
    pub report: LossReport,
}

impl<T: Scalar> StepGradients<T> {
    pub fn total(&self) -> Gradients<T> {
        let mut g = self.first_pass.clone();
        g.accumulate(&self.second_pass);
        g
    }
}

struct SampleOutcome<T> {
    first: Gradients<T>,
    second: Gradients<T>,
    losses: Vec<ScaleLoss>,
}

fn sample_gradients<T: Scalar>(
    params: &ModelParameters<T>,
    x: &Tensor<T>,
    scales: &[u32],
    lambda_color: f64,
    weight: T,
) -> Result<SampleOutcome<T>> {
    let mut first = params.zeros_like();
    let mut second = params.zeros_like();
    let mut losses = Vec::with_capacity(scales.len());
    let color_weight = weight * T::from_f64_lossy(lambda_color);
    for &k in scales {
        let (up, down) = (ScaleCondition::Up(k), ScaleCondition::Down(k));
        let targets = color_targets(x, k)?;

        let (x_up, tape) = forward_train_tensor(params, x, up)?;
        let (color_up, g) = pooled_l1(&x_up, targets.plan.up.0, &targets.fine, Some(color_weight))?;
        if lambda_color != 0.0 {
            tape.backward(params, &g.expect("gradient requested"), &mut first, false);
        }
        drop(tape);

        let (x_down, tape) = forward_train_tensor(params, x, down)?;
        let (color_down, g) = pooled_l1(
            &x_down,
            targets.plan.down.0,
            &targets.coarse,
            Some(color_weight),
        )?;
        if lambda_color != 0.0 {
            tape.backward(params, &g.expect("gradient requested"), &mut first, false);
        }
        drop(tape);

        // Second pass on detached first-pass outputs: no input gradients flow back.
        let (x_check, tape) = forward_train_tensor(params, &x_up, down)?;
        let (cons_check, g) = l1_mean(&x_check.data, &x.data, Some(weight));
        let g = Tensor::from_vec(3, x.height, x.width, g.expect("gradient requested"));
        tape.backward(params, &g, &mut second, false);
        drop(tape);

        let (x_hat, tape) = forward_train_tensor(params, &x_down, up)?;
        let (cons_hat, g) = l1_mean(&x_hat.data, &x.data, Some(weight));
        let g = Tensor::from_vec(3, x.height, x.width, g.expect("gradient requested"));
        tape.backward(params, &g, &mut second, false);

        losses.push(ScaleLoss {
            scale: k,
            l_cons: cons_hat + cons_check,
            l_color: color_up + color_down,
        });
    }
    Ok(SampleOutcome {
        first,
        second,
        losses,
    })
}

/// Gradients and batch-mean losses of `L_total` over `batch` for the chains
/// of every scale in `scales`.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &[Tensor<T>],
    scales: &[u32],
    lambda_color: f64,
    execution: Execution,
    deterministic: bool,
) -> Result<StepGradients<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for &k in scales {
        if !params.config.scale_set.contains(&k) {
            return Err(Error::Scale(format!(
                "scale {k} is outside the model's scale set {:?}",
                params.config.scale_set
            )));
        }
    }
    let weight = T::one() / T::from_usize(batch.len()).expect("batch length");
    let combine = |a: Result<SampleOutcome<T>>, b: Result<SampleOutcome<T>>| {
        let (mut a, b) = (a?, b?);
        a.first.accumulate(&b.first);
        a.second.accumulate(&b.second);
        for (la, lb) in a.losses.iter_mut().zip(&b.losses) {
            la.l_cons += lb.l_cons;
            la.l_color += lb.l_color;
        }
        Ok(a)
    };
    let total = map_reduce(
        execution,
        deterministic,
        batch,
        |_, x| sample_gradients(params, x, scales, lambda_color, weight),
        combine,
    )
    .expect("non-empty batch")?;
    let n = batch.len() as f64;
    let per_scale = total
        .losses
        .into_iter()
        .map(|l| ScaleLoss {
            scale: l.scale,
            l_cons: l.l_cons / n,
            l_color: l.l_color / n,
        })
        .collect();
    Ok(StepGradients {
        first_pass: total.first,
        second_pass: total.second,
        report: LossReport::from_scales(per_scale, lambda_color),
    })
}

fn batch_tensors<T: Scalar>(batch: &[Image], cfg: &TrainConfig) -> Result<Vec<Tensor<T>>> {
    batch
        .iter()
        .map(|img| {
            if img.dims() != (cfg.patch_size, cfg.patch_size) || img.channels() != 3 {
                return Err(Error::Shape(format!(
                    "patch must be {0}x{0}x3, got {1}x{2}x{3}",
                    cfg.patch_size,
                    img.height(),
                    img.width(),
                    img.channels()
                )));
            }
            Ok(Tensor::from_image(img))
        })
        .collect()
}

fn apply_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    opt: &mut OptimizerState<T>,
    batch: &[Image],
    scales: &[u32],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let tensors = batch_tensors(batch, cfg)?;
    let grads = batch_gradients(
        params,
        &tensors,
        scales,
        cfg.lambda_color,
        cfg.execution,
        cfg.deterministic,
    )?;
    if !grads.report.is_finite() {
        return Err(Error::NonFiniteLoss { retries: 0 });
    }
    opt.update(params, &grads.total(), lr, &cfg.adam);
    Ok(grads.report)
}

/// One ADAM update on the up-down/down-up chains of scale `s`.
/// Parameters are left untouched when the loss is not finite.
pub fn train_step<T: Scalar>(
    params: &mut ModelParameters<T>,
    opt: &mut OptimizerState<T>,
    batch: &[Image],
    s: u32,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if !cfg.scale_set.contains(&s) {
        return Err(Error::Scale(format!(
            "scale {s} is outside the configured set {:?}",
            cfg.scale_set
        )));
    }
    apply_step(params, opt, batch, &[s], lr, cfg)
}

/// One ADAM update on the chains of every scale in `cfg.scale_set`, with all
/// loss terms summed.
pub fn train_step_multiscale<T: Scalar>(
    params: &mut ModelParameters<T>,
    opt: &mut OptimizerState<T>,
    batch: &[Image],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    apply_step(params, opt, batch, &cfg.scale_set, lr, cfg)
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub report: LossReport,
}

/// Stateful training driver; owns parameters, optimizer and data stream.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    cfg: TrainConfig,
    params: ModelParameters<T>,
    opt: OptimizerState<T>,
    epoch: usize,
    step: u64,
    rng: Rng,
}

/// Offset separating the data stream seed from the initialization seed.
const DATA_STREAM: u64 = 0x5eed_da7a_0000_0001;

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParameters::init(&cfg.model_config(), cfg.seed)?;
        let opt = OptimizerState::new(&params);
        let rng = Rng::new(cfg.seed ^ DATA_STREAM);
        Ok(Trainer {
            cfg,
            params,
            opt,
            epoch: 0,
            step: 0,
            rng,
        })
    }

    /// Continues from a checkpoint. `cfg` may differ from the stored
    /// configuration only in `epochs` and `execution`.
    pub fn resume(ckpt: Checkpoint<T>, cfg: Option<TrainConfig>) -> Result<Self> {
        let cfg = match cfg {
            Some(c) => {
                if c.digest() != ckpt.config_digest {
                    return Err(Error::Config(
                        "training configuration differs from the checkpoint's".into(),
                    ));
                }
                c
            }
            None => ckpt.train_config.clone(),
        };
        cfg.validate()?;
        let rng = Rng::from_state(&ckpt.rng)
            .ok_or_else(|| Error::CorruptCheckpoint("unreadable rng state".into()))?;
        Ok(Trainer {
            cfg,
            params: ckpt.params,
            opt: ckpt.optimizer,
            epoch: ckpt.epoch,
            step: ckpt.step,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParameters<T> {
        &self.params
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.epoch)
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.epochs = epochs;
    }

    /// Rejects an empty dataset or images that cannot hold a patch.
    pub fn check_dataset(&self, dataset: &[Image]) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let p = self.cfg.patch_size;
        for (i, img) in dataset.iter().enumerate() {
            if img.height() < p || img.width() < p {
                return Err(Error::Dataset(format!(
                    "image {i} is {}x{}, smaller than the {p}x{p} patch",
                    img.height(),
                    img.width()
                )));
            }
            if img.channels() != 3 {
                return Err(Error::Dataset(format!("image {i} is not RGB")));
            }
        }
        Ok(())
    }

    /// Image-uniform, then position-uniform patches with a random symmetry.
    fn draw_batch(&mut self, dataset: &[Image]) -> Result<Vec<Image>> {
        (0..self.cfg.batch_size)
            .map(|_| {
                let img = &dataset[self.rng.below(dataset.len() as u64) as usize];
                let patch = random_patch(img, self.cfg.patch_size, &mut self.rng)?;
                dihedral(&patch, self.rng.below(8) as u8)
            })
            .collect()
    }

    fn draw_scales(&mut self) -> Vec<u32> {
        if self.cfg.multiscale {
            self.cfg.scale_set.clone()
        } else {
            let i = self.rng.below(self.cfg.scale_set.len() as u64) as usize;
            vec![self.cfg.scale_set[i]]
        }
    }

    /// Draws a batch and applies one update, redrawing on non-finite loss.
    pub fn step_once(&mut self, dataset: &[Image]) -> Result<StepRecord> {
        self.check_dataset(dataset)?;
        let lr = self.lr();
        for _ in 0..=NON_FINITE_RETRIES {
            let batch = self.draw_batch(dataset)?;
            let scales = self.draw_scales();
            match apply_step(
                &mut self.params,
                &mut self.opt,
                &batch,
                &scales,
                lr,
                &self.cfg,
            ) {
                Ok(report) => {
                    self.step += 1;
                    return Ok(StepRecord {
                        epoch: self.epoch,
                        step: self.step,
                        lr,
                        report,
                    });
                }
                Err(Error::NonFiniteLoss { .. }) => {
                    log::warn!("non-finite loss at step {}; redrawing batch", self.step + 1);
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::NonFiniteLoss {
            retries: NON_FINITE_RETRIES,
        })
    }

    /// Runs one full epoch, reporting every step to `on_step`.
    pub fn run_epoch(
        &mut self,
        dataset: &[Image],
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<()> {
        let steps = self.cfg.epoch_steps(dataset);
        for _ in 0..steps {
            let record = self.step_once(dataset)?;
            on_step(&record);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `cfg.epochs` epochs are complete. `on_epoch` sees the
    /// trainer after each finished epoch (e.g. to write checkpoints).
    pub fn run(
        &mut self,
        dataset: &[Image],
        on_step: &mut dyn FnMut(&StepRecord),
        on_epoch: &mut dyn FnMut(&Trainer<T>) -> Result<()>,
    ) -> Result<()> {
        self.check_dataset(dataset)?;
        while self.epoch < self.cfg.epochs {
            self.run_epoch(dataset, on_step)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model_config: self.params.config.clone(),
            params: self.params.clone(),
            optimizer: self.opt.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.state(),
            train_config: self.cfg.clone(),
            config_digest: self.cfg.digest(),
        }
    }

    pub fn into_params(self) -> ModelParameters<T> {
        self.params
    }
}

/// Trains a fresh model on `dataset` for `cfg.epochs` epochs.
pub fn train<T: Scalar>(dataset: &[Image], cfg: &TrainConfig) -> Result<Checkpoint<T>> {
    let mut trainer = Trainer::<T>::new(cfg.clone())?;
    trainer.run(dataset, &mut |_| {}, &mut |_| Ok(()))?;
    Ok(trainer.checkpoint())
}
