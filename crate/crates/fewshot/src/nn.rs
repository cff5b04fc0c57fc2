//! Layers and the shared conv backbone.
//!
//! Layers hold their parameters as leaf tensors. For meta-learning, a model
//! is cheaply cloned and `load_params` swaps in fast weights, so adapted
//! forward passes never mutate the original. Batch-norm running statistics
//! are shared across clones and only advance in full training mode.

use std::cell::RefCell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{batch_norm, conv2d, linear, BnMode, Scalar, Tensor, TensorError};

/// Forward-pass regime. `InnerTrain` is the adaptation inner loop: batch
/// statistics are used but running statistics are left untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    InnerTrain,
    Eval,
}

impl Mode {
    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train {
                update_running: true,
            },
            Mode::InnerTrain => BnMode::Train {
                update_running: false,
            },
            Mode::Eval => BnMode::Eval,
        }
    }
}

pub fn randn<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(data, shape).expect("shape/data agree")
}

/// Sequential cursor for loading a flat parameter list back into a model.
pub struct ParamCursor<'a, F: Scalar> {
    items: &'a [Tensor<F>],
    pos: usize,
}

impl<'a, F: Scalar> ParamCursor<'a, F> {
    pub fn new(items: &'a [Tensor<F>]) -> Self {
        ParamCursor { items, pos: 0 }
    }

    pub fn next(&mut self) -> Tensor<F> {
        let t = self.items[self.pos].clone();
        self.pos += 1;
        t
    }

    pub fn exhausted(&self) -> bool {
        self.pos == self.items.len()
    }
}

#[derive(Clone)]
pub struct Conv2d<F: Scalar = f32> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let weight = randn::<F>(&[out_ch, in_ch, k, k], (2.0 / fan_in).sqrt(), rng).requires_grad();
        let bias = bias.then(|| Tensor::zeros(&[out_ch]).requires_grad());
        Conv2d {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }

    pub fn collect_params(&self, out: &mut Vec<Tensor<F>>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }

    pub fn load_params(&mut self, cur: &mut ParamCursor<F>) {
        self.weight = cur.next();
        if self.bias.is_some() {
            self.bias = Some(cur.next());
        }
    }
}

#[derive(Clone)]
pub struct BatchNorm2d<F: Scalar = f32> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    running: Rc<RefCell<(Vec<F>, Vec<F>)>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::ones(&[channels]).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running: Rc::new(RefCell::new((
                vec![F::ZERO; channels],
                vec![F::ONE; channels],
            ))),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>, TensorError> {
        let (out, updated) = {
            let stats = self.running.borrow();
            batch_norm(
                x,
                &self.gamma,
                &self.beta,
                &stats.0,
                &stats.1,
                self.eps,
                self.momentum,
                mode.bn(),
            )?
        };
        if let Some((m, v)) = updated {
            *self.running.borrow_mut() = (m, v);
        }
        Ok(out)
    }

    pub fn running_stats(&self) -> (Vec<F>, Vec<F>) {
        self.running.borrow().clone()
    }

    pub fn set_running_stats(&self, mean: Vec<F>, var: Vec<F>) {
        *self.running.borrow_mut() = (mean, var);
    }

    /// Clone with its own running-statistics buffer (checkpoint restore).
    pub fn deep_clone(&self) -> Self {
        let mut c = self.clone();
        c.running = Rc::new(RefCell::new(self.running.borrow().clone()));
        c
    }

    pub fn collect_params(&self, out: &mut Vec<Tensor<F>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }

    pub fn load_params(&mut self, cur: &mut ParamCursor<F>) {
        self.gamma = cur.next();
        self.beta = cur.next();
    }
}

#[derive(Clone)]
pub struct Linear<F: Scalar = f32> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight =
            randn::<F>(&[out_dim, in_dim], (2.0 / in_dim as f64).sqrt(), rng).requires_grad();
        let bias = bias.then(|| Tensor::zeros(&[out_dim]).requires_grad());
        Linear { weight, bias }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]).requires_grad(),
            bias: bias.then(|| Tensor::zeros(&[out_dim]).requires_grad()),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>, TensorError> {
        linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn collect_params(&self, out: &mut Vec<Tensor<F>>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }

    pub fn load_params(&mut self, cur: &mut ParamCursor<F>) {
        self.weight = cur.next();
        if self.bias.is_some() {
            self.bias = Some(cur.next());
        }
    }
}

/// conv3x3 -> batch norm -> relu -> optional 2x2 max pool.
#[derive(Clone)]
pub struct ConvBlock<F: Scalar = f32> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    pub pool: bool,
}

impl<F: Scalar> ConvBlock<F> {
    pub fn new(in_ch: usize, out_ch: usize, pool: bool, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, false, rng),
            bn: BatchNorm2d::new(out_ch),
            pool,
        }
    }

    pub fn forward(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>, TensorError> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, mode)?.relu();
        if self.pool {
            y.max_pool2d(2)
        } else {
            Ok(y)
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Tensor<F>>) {
        self.conv.collect_params(out);
        self.bn.collect_params(out);
    }

    pub fn load_params(&mut self, cur: &mut ParamCursor<F>) {
        self.conv.load_params(cur);
        self.bn.load_params(cur);
    }

    pub fn deep_clone(&self) -> Self {
        ConvBlock {
            conv: self.conv.clone(),
            bn: self.bn.deep_clone(),
            pool: self.pool,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub image_size: usize,
    /// Number of trailing blocks without pooling (keeps spatial maps for
    /// relation-style heads).
    pub keep_spatial: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            blocks: 4,
            channels: 64,
            in_channels: 1,
            image_size: 28,
            keep_spatial: 0,
        }
    }
}

impl BackboneConfig {
    /// Spatial side length of the output feature map.
    pub fn map_side(&self) -> usize {
        let mut s = self.image_size;
        for b in 0..self.blocks {
            if b < self.blocks - self.keep_spatial {
                s /= 2;
            }
        }
        s.max(1)
    }

    pub fn embedding_dim(&self) -> usize {
        self.channels * self.map_side() * self.map_side()
    }
}

/// The standard 4-block conv embedding network.
#[derive(Clone)]
pub struct Backbone<F: Scalar = f32> {
    pub config: BackboneConfig,
    pub blocks: Vec<ConvBlock<F>>,
}

impl<F: Scalar> Backbone<F> {
    pub fn new(config: BackboneConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let in_ch = if b == 0 {
                config.in_channels
            } else {
                config.channels
            };
            let pool = b < config.blocks - config.keep_spatial;
            blocks.push(ConvBlock::new(in_ch, config.channels, pool, rng));
        }
        Backbone { config, blocks }
    }

    /// Feature maps before flattening: [B, C, s, s].
    pub fn forward_maps(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>, TensorError> {
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.forward(&y, mode)?;
        }
        Ok(y)
    }

    /// Flat embeddings: [B, embedding_dim].
    pub fn forward(&self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>, TensorError> {
        Ok(self.forward_maps(x, mode)?.flatten2())
    }

    pub fn params(&self) -> Vec<Tensor<F>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            b.collect_params(&mut out);
        }
        out
    }

    /// Copy of this backbone with the given parameters swapped in. Running
    /// statistics stay shared with the original.
    pub fn with_params(&self, params: &[Tensor<F>]) -> Self {
        let mut c = self.clone();
        let mut cur = ParamCursor::new(params);
        for b in &mut c.blocks {
            b.load_params(&mut cur);
        }
        assert!(cur.exhausted(), "parameter count mismatch");
        c
    }

    pub fn deep_clone(&self) -> Self {
        Backbone {
            config: self.config,
            blocks: self.blocks.iter().map(|b| b.deep_clone()).collect(),
        }
    }
}
