//! Encoder-decoder network mapping a cropped image to a continuous depth
//! mask in class units.
//!
//! Each encoder level runs two 3x3 conv + ReLU blocks and halves the
//! spatial extent with a 2x2 max-pool; the mirrored decoder upsamples x2,
//! concatenates the matching encoder level's features and runs two 3x3
//! conv + ReLU blocks. A final 1x1 convolution with a linear head produces
//! the single-channel output at input resolution.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::PadMode;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            base_channels: 8,
            in_channels: 1,
            out_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Scaled-up preset approximating the full-size network.
    pub fn large(seed: u64) -> Self {
        ModelConfig {
            levels: 4,
            base_channels: 16,
            in_channels: 1,
            out_channels: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0
        {
            return Err(Error::InvalidArgument(format!(
                "model config must be positive everywhere: {self:?}"
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Parameter names and shapes in their stable creation order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
            specs.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
            specs.push((format!("{name}.b"), vec![c_out]));
        };
        let mut prev = self.in_channels;
        for i in 0..self.levels {
            let ch = self.channels(i);
            conv(format!("enc{i}.conv1"), ch, prev, 3);
            conv(format!("enc{i}.conv2"), ch, ch, 3);
            prev = ch;
        }
        for i in (0..self.levels).rev() {
            let ch = self.channels(i);
            let incoming = if i + 1 == self.levels {
                self.channels(self.levels - 1) // pooled bottom features
            } else {
                self.channels(i + 1)
            };
            conv(format!("dec{i}.conv1"), ch, incoming + ch, 3);
            conv(format!("dec{i}.conv2"), ch, ch, 3);
        }
        conv("head".to_string(), self.out_channels, self.channels(0), 1);
        specs
    }
}

/// Named parameters plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<(String, Tensor<f32>)>,
}

/// Variables of one traced forward pass: the network output plus each
/// parameter's graph leaf, for wiring gradients back to the optimizer.
pub struct TracedForward {
    pub output: Var,
    pub params: Vec<(String, Var)>,
}

impl Model {
    /// He-initialized network: weights ~ N(0, sqrt(2 / fan_in)), biases 0,
    /// drawn deterministically from the config seed.
    pub fn init(cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();
        for (name, shape) in cfg.param_specs() {
            let tensor = if shape.len() == 4 {
                let fan_in = shape[1] * shape[2] * shape[3];
                let std = (2.0 / fan_in as f32).sqrt();
                let normal = Normal::new(0.0f32, std).expect("valid std");
                let numel: usize = shape.iter().product();
                let data: Vec<f32> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape, data)?
            } else {
                Tensor::zeros(shape)
            };
            params.push((name, tensor));
        }
        Ok(Model { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: Vec<(String, Tensor<f32>)>) -> Result<Model> {
        cfg.validate()?;
        let expected = cfg.param_specs();
        if expected.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&params) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {n} with shape {:?} does not match expected {en} {:?}",
                    t.shape(),
                    es
                )));
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Inference pass; no gradients are recorded.
    pub fn forward(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let image = g.constant(image.clone());
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| g.constant(t.clone()))
            .collect();
        let out = build_unet_graph(&mut g, &self.cfg, image, &params)?;
        Ok(g.value(out).clone())
    }

    /// Training pass: inserts every parameter as a grad-requiring leaf on
    /// the caller's graph.
    pub fn forward_traced(&self, g: &mut Graph<f32>, image: Var) -> Result<TracedForward> {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut named = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let v = g.input(t.clone().requires_grad(true));
            vars.push(v);
            named.push((name.clone(), v));
        }
        let output = build_unet_graph(g, &self.cfg, image, &vars)?;
        Ok(TracedForward {
            output,
            params: named,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Ablation {
    None,
    /// Zero the deepest (pooled) encoder features.
    ZeroBottom,
    /// Zero the skip tensor feeding decoder level `i`.
    ZeroSkip(usize),
}

/// Wire the network as graph primitives from pre-inserted parameter leaves
/// (ordered as in [`ModelConfig::param_specs`]). Shared by the f32 training
/// path and the f64 end-to-end gradient check.
pub fn build_unet_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    image: Var,
    params: &[Var],
) -> Result<Var> {
    build_unet_ablated(g, cfg, image, params, Ablation::None)
}

pub(crate) fn build_unet_ablated<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    image: Var,
    params: &[Var],
    ablation: Ablation,
) -> Result<Var> {
    cfg.validate()?;
    let expected: usize = 4 * cfg.levels * 2 + 2;
    if params.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "expected {expected} parameter variables, got {}",
            params.len()
        )));
    }
    let shape = g.value(image).shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [_, c, h, w] => (*c, *h, *w),
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unet input must be rank 4, got {:?}",
                shape
            )))
        }
    };
    if c != cfg.in_channels {
        return Err(Error::InvalidArgument(format!(
            "unet input has {c} channels, config expects {}",
            cfg.in_channels
        )));
    }
    let divisor = 1usize << cfg.levels;
    if h % divisor != 0 || w % divisor != 0 {
        return Err(Error::InvalidArgument(format!(
            "unet input extent {h}x{w} must be divisible by 2^levels = {divisor}"
        )));
    }

    let mut next = params.iter().copied();
    let mut conv_block = |g: &mut Graph<T>, x: Var, k: usize| -> Result<Var> {
        let w = next.next().expect("parameter count checked");
        let b = next.next().expect("parameter count checked");
        let pad = if k == 3 { 1 } else { 0 };
        g.conv2d(x, w, Some(b), 1, pad, PadMode::Zero)
    };

    let mut skips = Vec::with_capacity(cfg.levels);
    let mut x = image;
    for _ in 0..cfg.levels {
        let c1 = conv_block(g, x, 3)?;
        let r1 = g.relu(c1)?;
        let c2 = conv_block(g, r1, 3)?;
        let r2 = g.relu(c2)?;
        skips.push(r2);
        x = g.max_pool2(r2)?;
    }
    if ablation == Ablation::ZeroBottom {
        x = g.scalar_mul(x, T::zero())?;
    }
    for i in (0..cfg.levels).rev() {
        let up = g.upsample2(x)?;
        let mut skip = skips[i];
        if ablation == Ablation::ZeroSkip(i) {
            skip = g.scalar_mul(skip, T::zero())?;
        }
        let cat = g.concat_channels(up, skip)?;
        let c1 = conv_block(g, cat, 3)?;
        let r1 = g.relu(c1)?;
        let c2 = conv_block(g, r1, 3)?;
        x = g.relu(c2)?;
    }
    conv_block(g, x, 1) // linear head
}
