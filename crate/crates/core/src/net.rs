//! The invertible scale-conditional network `f(x | s)`.
//!
//! A shared head and residual body feed one tail pair per configured integer
//! scale `k`: an up tail (conv to `C*k^2` channels, pixel shuffle, conv to RGB)
//! for condition `k`, and a down tail (pixel unshuffle, conv to RGB) for
//! condition `1/k`. The tail output is added to a bicubic resize of the input.
//! Condition `1` bypasses the network entirely.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::ops::{
    pixel_shuffle, pixel_unshuffle, relu_backward_in_place, relu_in_place, Conv, KERNEL,
};
use crate::resample::{Ratio, Separable};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_resblocks: usize,
    pub n_channels: usize,
    pub scale_set: Vec<u32>,
    pub conv_kernel: usize,
    pub residual_scaling: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_resblocks: 8,
            n_channels: 32,
            scale_set: vec![2],
            conv_kernel: KERNEL,
            residual_scaling: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn with_scales(mut self, scales: &[u32]) -> Self {
        self.scale_set = scales.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_set.is_empty() {
            return Err(Error::Config("scale set is empty".into()));
        }
        if self.scale_set.iter().any(|&s| s < 2) {
            return Err(Error::Config(format!(
                "scales must be integers >= 2, got {:?}",
                self.scale_set
            )));
        }
        if self.scale_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "scale set must be strictly increasing, got {:?}",
                self.scale_set
            )));
        }
        if self.conv_kernel != KERNEL {
            return Err(Error::Config(format!(
                "only {KERNEL}x{KERNEL} convolutions are supported"
            )));
        }
        if self.n_channels == 0 {
            return Err(Error::Config("n_channels must be positive".into()));
        }
        if !self.residual_scaling.is_finite() {
            return Err(Error::Config("residual_scaling must be finite".into()));
        }
        Ok(())
    }

    pub fn max_scale(&self) -> u32 {
        self.scale_set.iter().copied().max().unwrap_or(1)
    }

    pub fn supports(&self, s: ScaleCondition) -> bool {
        match s {
            ScaleCondition::Identity => true,
            ScaleCondition::Up(k) | ScaleCondition::Down(k) => self.scale_set.contains(&k),
        }
    }
}

/// The condition `s` of `f(x | s)`: identity, `k` or `1/k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScaleCondition {
    Identity,
    Up(u32),
    Down(u32),
}

impl ScaleCondition {
    pub fn reciprocal(self) -> Self {
        match self {
            ScaleCondition::Identity => ScaleCondition::Identity,
            ScaleCondition::Up(k) => ScaleCondition::Down(k),
            ScaleCondition::Down(k) => ScaleCondition::Up(k),
        }
    }

    pub fn ratio(self) -> Ratio {
        match self {
            ScaleCondition::Identity => Ratio::integer(1),
            ScaleCondition::Up(k) => Ratio::integer(k),
            ScaleCondition::Down(k) => Ratio::reciprocal_of(k),
        }
    }

    pub fn from_ratio(r: Ratio) -> Result<Self> {
        match (r.num(), r.den()) {
            (1, 1) => Ok(ScaleCondition::Identity),
            (k, 1) => Ok(ScaleCondition::Up(k)),
            (1, k) => Ok(ScaleCondition::Down(k)),
            _ => Err(Error::Scale(format!(
                "{r} is neither an integer nor the reciprocal of one"
            ))),
        }
    }

    /// Output `(height, width)` for an input of the given size.
    pub fn output_dims(self, height: usize, width: usize) -> Result<(usize, usize)> {
        match self {
            ScaleCondition::Identity => Ok((height, width)),
            ScaleCondition::Up(k) => Ok((height * k as usize, width * k as usize)),
            ScaleCondition::Down(k) => {
                let k = k as usize;
                if !height.is_multiple_of(k) || !width.is_multiple_of(k) {
                    return Err(Error::Shape(format!(
                        "{height}x{width} is not divisible by {k}"
                    )));
                }
                Ok((height / k, width / k))
            }
        }
    }
}

impl fmt::Display for ScaleCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.ratio())
    }
}

impl FromStr for ScaleCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScaleCondition::from_ratio(s.parse()?)
    }
}

/// Per-scale tail weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Tail<T> {
    pub scale: u32,
    /// `C -> C*k^2`, followed by a pixel shuffle.
    pub up: Conv<T>,
    /// `C -> 3` at the up-sampled resolution.
    pub up_out: Conv<T>,
    /// `C*k^2 -> 3` after a pixel unshuffle.
    pub down: Conv<T>,
}

/// All learnable weights of the network. Also used for gradients and
/// optimizer moments, which share the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub config: ModelConfig,
    pub head: Conv<T>,
    pub blocks: Vec<[Conv<T>; 2]>,
    pub body_out: Conv<T>,
    pub tails: Vec<Tail<T>>,
}

/// Gradients share the parameter layout.
pub type Gradients<T> = ModelParameters<T>;

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl<T: Scalar> ModelParameters<T> {
    /// All-zero parameters with the layout implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.n_channels;
        Ok(ModelParameters {
            config: config.clone(),
            head: Conv::zeros(3, c),
            blocks: (0..config.n_resblocks)
                .map(|_| [Conv::zeros(c, c), Conv::zeros(c, c)])
                .collect(),
            body_out: Conv::zeros(c, c),
            tails: config
                .scale_set
                .iter()
                .map(|&k| {
                    let k2 = (k * k) as usize;
                    Tail {
                        scale: k,
                        up: Conv::zeros(c, c * k2),
                        up_out: Conv::zeros(c, 3),
                        down: Conv::zeros(c * k2, 3),
                    }
                })
                .collect(),
        })
    }

    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    ///
    /// Tensors are filled in [`ModelParameters::specs`] order from one
    /// generator, so the result depends only on `(config, seed)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = Rng::new(seed);
        for conv in params.convs_mut() {
            let bound = 1.0 / (conv.fan_in() as f64).sqrt();
            for w in &mut conv.weight {
                *w = T::from_f64_lossy(rng.uniform_in(-bound, bound));
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config validated at construction")
    }

    fn convs(&self) -> Vec<(String, &Conv<T>)> {
        let mut out = vec![("head".to_string(), &self.head)];
        for (i, [a, b]) in self.blocks.iter().enumerate() {
            out.push((format!("body.{i}.conv1"), a));
            out.push((format!("body.{i}.conv2"), b));
        }
        out.push(("body.out".to_string(), &self.body_out));
        for t in &self.tails {
            out.push((format!("tail.x{}.up", t.scale), &t.up));
            out.push((format!("tail.x{}.up_out", t.scale), &t.up_out));
            out.push((format!("tail.x{}.down", t.scale), &t.down));
        }
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv<T>> {
        let mut out = vec![&mut self.head];
        for [a, b] in &mut self.blocks {
            out.push(a);
            out.push(b);
        }
        out.push(&mut self.body_out);
        for t in &mut self.tails {
            out.push(&mut t.up);
            out.push(&mut t.up_out);
            out.push(&mut t.down);
        }
        out
    }

    /// Names and shapes of every tensor, in canonical order.
    pub fn specs(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        for (name, conv) in self.convs() {
            out.push(TensorSpec {
                name: format!("{name}.weight"),
                shape: vec![conv.cout, conv.cin, KERNEL, KERNEL],
            });
            out.push(TensorSpec {
                name: format!("{name}.bias"),
                shape: vec![conv.cout],
            });
        }
        out
    }

    /// Flat tensors in [`ModelParameters::specs`] order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.convs()
            .into_iter()
            .flat_map(|(_, c)| [c.weight.as_slice(), c.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()])
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.specs()
            .iter()
            .position(|s| s.name == name)
            .map(|i| self.tensors()[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let i = self.specs().iter().position(|s| s.name == name)?;
        self.tensors_mut().into_iter().nth(i)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale_by(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    fn tail(&self, k: u32) -> Result<&Tail<T>> {
        self.tails
            .iter()
            .find(|t| t.scale == k)
            .ok_or_else(|| Error::Scale(format!("scale {k} is not in the model's scale set")))
    }

    fn tail_mut(&mut self, k: u32) -> &mut Tail<T> {
        self.tails
            .iter_mut()
            .find(|t| t.scale == k)
            .expect("tail present in gradient layout")
    }
}

struct BlockTape<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
}

enum TailTape<T> {
    Up { shuffled: Tensor<T> },
    Down { unshuffled: Tensor<T> },
}

struct BodyTape<T> {
    input: Tensor<T>,
    blocks: Vec<BlockTape<T>>,
    body_in: Tensor<T>,
    features: Tensor<T>,
    tail: TailTape<T>,
}

/// Everything recorded by [`forward_train`] that the reverse pass needs.
pub struct Tape<T> {
    scale: ScaleCondition,
    skip: Option<Separable>,
    body: Option<BodyTape<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn scale(&self) -> ScaleCondition {
        self.scale
    }

    /// Reverse pass: accumulates parameter gradients of `<d_out, f(x|s)>` into
    /// `grads` and returns the gradient with respect to the input when
    /// `want_input` is set.
    pub fn backward(
        &self,
        params: &ModelParameters<T>,
        d_out: &Tensor<T>,
        grads: &mut Gradients<T>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let (Some(body), Some(skip)) = (&self.body, &self.skip) else {
            return want_input.then(|| d_out.clone());
        };
        let scale = params.config.residual_scaling;
        let d_features = match (self.scale, &body.tail) {
            (ScaleCondition::Up(k), TailTape::Up { shuffled }) => {
                let tail = params.tail(k).expect("tape scale in model");
                let gtail = grads.tail_mut(k);
                let d_shuffled = tail
                    .up_out
                    .backward(shuffled, d_out, &mut gtail.up_out, true)
                    .expect("input gradient requested");
                let d_expanded =
                    pixel_unshuffle(&d_shuffled, k as usize).expect("shape recorded in forward");
                tail.up
                    .backward(&body.features, &d_expanded, &mut gtail.up, true)
                    .expect("input gradient requested")
            }
            (ScaleCondition::Down(k), TailTape::Down { unshuffled }) => {
                let tail = params.tail(k).expect("tape scale in model");
                let gtail = grads.tail_mut(k);
                let d_unshuffled = tail
                    .down
                    .backward(unshuffled, d_out, &mut gtail.down, true)
                    .expect("input gradient requested");
                pixel_shuffle(&d_unshuffled, k as usize).expect("shape recorded in forward")
            }
            _ => unreachable!("tail tape matches its scale"),
        };

        // features = body_out(r_n) + head_out
        let mut d_head = d_features.clone();
        let mut d_r = params
            .body_out
            .backward(&body.body_in, &d_features, &mut grads.body_out, true)
            .expect("input gradient requested");
        for (i, block) in body.blocks.iter().enumerate().rev() {
            let [c1, c2] = &params.blocks[i];
            let [g1, g2] = &mut grads.blocks[i];
            let mut d_branch = d_r.clone();
            if scale != 1.0 {
                let s = T::from_f64_lossy(scale);
                d_branch.data.iter_mut().for_each(|v| *v *= s);
            }
            let mut d_hidden = c2
                .backward(&block.hidden, &d_branch, g2, true)
                .expect("input gradient requested");
            relu_backward_in_place(&block.hidden, &mut d_hidden);
            let d_in = c1
                .backward(&block.input, &d_hidden, g1, true)
                .expect("input gradient requested");
            d_r.add_assign(&d_in);
        }
        d_head.add_assign(&d_r);
        let d_input = params
            .head
            .backward(&body.input, &d_head, &mut grads.head, want_input);
        d_input.map(|mut d| {
            d.add_assign(&skip.adjoint_tensor(d_out));
            d
        })
    }
}

fn check_input<T: Scalar>(
    params: &ModelParameters<T>,
    x: &Tensor<T>,
    s: ScaleCondition,
) -> Result<()> {
    if x.channels != 3 {
        return Err(Error::Shape(format!(
            "network input must have 3 channels, got {}",
            x.channels
        )));
    }
    if !params.config.supports(s) {
        return Err(Error::Scale(format!(
            "scale {s} is outside the model's scale set {:?}",
            params.config.scale_set
        )));
    }
    s.output_dims(x.height, x.width)?;
    Ok(())
}

fn run<T: Scalar>(
    params: &ModelParameters<T>,
    x: &Tensor<T>,
    s: ScaleCondition,
    record: bool,
) -> Result<(Tensor<T>, Option<Tape<T>>)> {
    check_input(params, x, s)?;
    let k = match s {
        ScaleCondition::Identity => {
            let tape = record.then_some(Tape {
                scale: s,
                skip: None,
                body: None,
            });
            return Ok((x.clone(), tape));
        }
        ScaleCondition::Up(k) | ScaleCondition::Down(k) => k,
    };
    let tail = params.tail(k)?;
    let skip = Separable::bicubic(x.height, x.width, s.ratio())?;

    let head_out = params.head.forward(x);
    let mut r = head_out.clone();
    let mut blocks = Vec::with_capacity(if record { params.blocks.len() } else { 0 });
    let res_scale = T::from_f64_lossy(params.config.residual_scaling);
    for [c1, c2] in &params.blocks {
        let mut hidden = c1.forward(&r);
        relu_in_place(&mut hidden);
        let mut branch = c2.forward(&hidden);
        if params.config.residual_scaling != 1.0 {
            branch.data.iter_mut().for_each(|v| *v *= res_scale);
        }
        let next = {
            let mut n = branch;
            n.add_assign(&r);
            n
        };
        if record {
            blocks.push(BlockTape { input: r, hidden });
        }
        r = next;
    }
    let mut features = params.body_out.forward(&r);
    features.add_assign(&head_out);

    let (mut out, tail_tape) = match s {
        ScaleCondition::Up(k) => {
            let expanded = tail.up.forward(&features);
            let shuffled = pixel_shuffle(&expanded, k as usize)?;
            let out = tail.up_out.forward(&shuffled);
            (out, TailTape::Up { shuffled })
        }
        ScaleCondition::Down(k) => {
            let unshuffled = pixel_unshuffle(&features, k as usize)?;
            let out = tail.down.forward(&unshuffled);
            (out, TailTape::Down { unshuffled })
        }
        ScaleCondition::Identity => unreachable!(),
    };
    out.add_assign(&skip.apply_tensor(x));

    let tape = record.then(|| Tape {
        scale: s,
        skip: Some(skip),
        body: Some(BodyTape {
            input: x.clone(),
            blocks,
            body_in: r,
            features,
            tail: tail_tape,
        }),
    });
    Ok((out, tape))
}

/// `f(x | s)` on a feature tensor.
pub fn forward_tensor<T: Scalar>(
    params: &ModelParameters<T>,
    x: &Tensor<T>,
    s: ScaleCondition,
) -> Result<Tensor<T>> {
    run(params, x, s, false).map(|(out, _)| out)
}

/// `f(x | s)` on a tensor, recording a [`Tape`] for the reverse pass.
pub fn forward_train_tensor<T: Scalar>(
    params: &ModelParameters<T>,
    x: &Tensor<T>,
    s: ScaleCondition,
) -> Result<(Tensor<T>, Tape<T>)> {
    run(params, x, s, true).map(|(out, tape)| (out, tape.expect("recorded")))
}

/// `f(x | s)`. Condition `1` returns `x` unchanged.
pub fn forward<T: Scalar>(
    params: &ModelParameters<T>,
    x: &Image,
    s: ScaleCondition,
) -> Result<Image> {
    if s == ScaleCondition::Identity {
        check_input(params, &Tensor::<T>::zeros(x.channels(), 1, 1), s)?;
        return Ok(x.clone());
    }
    Ok(forward_tensor(params, &Tensor::from_image(x), s)?.to_image())
}

/// `f(x | s)` plus its [`Tape`].
pub fn forward_train<T: Scalar>(
    params: &ModelParameters<T>,
    x: &Image,
    s: ScaleCondition,
) -> Result<(Image, Tape<T>)> {
    let (out, tape) = forward_train_tensor(params, &Tensor::from_image(x), s)?;
    Ok((out.to_image(), tape))
}
