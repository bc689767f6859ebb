//! Small CNN with a shared trunk, a linear embedding head and a linear
//! classification head on top of the embedding.
//!
//! ```text
//! input [B, 1, n_mels, n_frames]
//!   -> (conv k×k, ReLU, max-pool) per block
//!   -> global average pool            (flatten when there are no blocks)
//!   -> dense -> embedding [B, D]      (linear activation)
//!   -> dense -> logits [B, C]
//! ```

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Float, Tape, Tensor, TensorError, Var};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("conv block {block}: {detail}")]
    ShapeInfeasible { block: usize, detail: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected input of shape {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Max-pool window; 1 disables pooling.
    pub pool: usize,
}

impl ConvBlock {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pool: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
            pool,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub conv_blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub n_classes: usize,
    /// Coefficient of the squared-norm penalty on dense weights.
    pub l2_lambda: f64,
    /// Extend the penalty to convolution kernels.
    pub l2_conv: bool,
    /// Scale embeddings to unit length before the classification head.
    pub normalize_embeddings: bool,
    /// `(n_mels, n_frames)`
    pub input_shape: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_blocks: vec![
                ConvBlock::new(16, 3, 1, 2),
                ConvBlock::new(32, 3, 1, 2),
                ConvBlock::new(64, 3, 1, 2),
                ConvBlock::new(128, 3, 1, 2),
            ],
            embedding_dim: 512,
            n_classes: 10,
            l2_lambda: 1e-4,
            l2_conv: false,
            normalize_embeddings: false,
            input_shape: (128, 298),
        }
    }
}

impl ModelConfig {
    /// Walks the trunk and returns the width of the vector fed to the
    /// embedding layer.
    pub fn trunk_output_width(&self) -> Result<usize, ModelError> {
        if self.embedding_dim < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "embedding_dim {} < 2",
                self.embedding_dim
            )));
        }
        if self.n_classes < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "n_classes {} < 2",
                self.n_classes
            )));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "l2_lambda {} must be >= 0",
                self.l2_lambda
            )));
        }
        let (mut h, mut w) = self.input_shape;
        if h == 0 || w == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {:?} is empty",
                self.input_shape
            )));
        }
        let mut channels = 1;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 || b.pool == 0 {
                return Err(ModelError::ShapeInfeasible {
                    block: i,
                    detail: format!("zero-sized parameter in {:?}", b),
                });
            }
            let p = b.padding();
            if h + 2 * p < b.kernel || w + 2 * p < b.kernel {
                return Err(ModelError::ShapeInfeasible {
                    block: i,
                    detail: format!(
                        "{}×{} kernel exceeds padded {h}×{w} feature map",
                        b.kernel, b.kernel
                    ),
                });
            }
            h = (h + 2 * p - b.kernel) / b.stride + 1;
            w = (w + 2 * p - b.kernel) / b.stride + 1;
            if h < b.pool || w < b.pool {
                return Err(ModelError::ShapeInfeasible {
                    block: i,
                    detail: format!(
                        "pool {} collapses the {h}×{w} feature map to zero size",
                        b.pool
                    ),
                });
            }
            h /= b.pool;
            w /= b.pool;
            channels = b.out_channels;
        }
        Ok(if self.conv_blocks.is_empty() {
            h * w
        } else {
            channels
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.trunk_output_width().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    DenseWeight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Names of the classification-head parameters.
pub const HEAD_PARAMS: [&str; 2] = ["head.weight", "head.bias"];

pub fn is_head_param(name: &str) -> bool {
    HEAD_PARAMS.contains(&name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    params: Vec<Param<T>>,
}

/// Expected `(name, kind, shape)` of every parameter, in storage order.
fn layout(cfg: &ModelConfig) -> Result<Vec<(String, ParamKind, Vec<usize>)>, ModelError> {
    let trunk = cfg.trunk_output_width()?;
    let mut out = Vec::new();
    let mut in_ch = 1;
    for (i, b) in cfg.conv_blocks.iter().enumerate() {
        out.push((
            format!("conv{i}.weight"),
            ParamKind::ConvKernel,
            vec![b.out_channels, in_ch, b.kernel, b.kernel],
        ));
        in_ch = b.out_channels;
    }
    let d = cfg.embedding_dim;
    out.push((
        "embed.weight".into(),
        ParamKind::DenseWeight,
        vec![trunk, d],
    ));
    out.push(("embed.bias".into(), ParamKind::Bias, vec![d]));
    out.push((
        "head.weight".into(),
        ParamKind::DenseWeight,
        vec![d, cfg.n_classes],
    ));
    out.push(("head.bias".into(), ParamKind::Bias, vec![cfg.n_classes]));
    Ok(out)
}

pub fn default_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

impl<T: Float> Model<T> {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&config)?
            .into_iter()
            .map(|(name, kind, shape)| {
                let value = match kind {
                    ParamKind::Bias => Tensor::zeros(&shape),
                    _ => {
                        let fan_in: usize = match kind {
                            ParamKind::ConvKernel => shape[1..].iter().product(),
                            _ => shape[0],
                        };
                        let normal =
                            Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                        Tensor::from_fn(&shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
                    }
                };
                Param { name, kind, value }
            })
            .collect();
        let class_names = default_class_names(config.n_classes);
        Ok(Self {
            config,
            class_names,
            params,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, ModelError> {
        if names.len() != self.config.n_classes {
            return Err(ModelError::InvalidConfig(format!(
                "{} class names for {} classes",
                names.len(),
                self.config.n_classes
            )));
        }
        self.class_names = names;
        Ok(self)
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        class_names: Vec<String>,
        params: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        let expected = layout(&config)?;
        if expected.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "config implies {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        let params = expected
            .into_iter()
            .zip(params)
            .map(|((name, kind, shape), (got_name, value))| {
                if name != got_name || value.shape() != shape.as_slice() {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter {got_name} {:?} does not match expected {name} {:?}",
                        value.shape(),
                        shape
                    )));
                }
                if !value.is_finite() {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter {name} is not finite"
                    )));
                }
                Ok(Param { name, kind, value })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self {
            config,
            class_names: Vec::new(),
            params,
        }
        .with_class_names(class_names)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn is_penalized(&self, p: &Param<T>) -> bool {
        match p.kind {
            ParamKind::DenseWeight => true,
            ParamKind::ConvKernel => self.config.l2_conv,
            ParamKind::Bias => false,
        }
    }

    /// `l2_lambda · Σ ‖W‖²` over penalized weights.
    pub fn l2_penalty(&self) -> f64 {
        let sum: f64 = self
            .params
            .iter()
            .filter(|p| self.is_penalized(p))
            .flat_map(|p| p.value.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum();
        self.config.l2_lambda * sum
    }

    /// FNV-1a over the raw parameter bits, for cheap identity checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut bytes = Vec::new();
        for p in &self.params {
            bytes.clear();
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
            for b in p.name.bytes().chain(bytes.iter().copied()) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Records every parameter on `tape`; those for which `trainable`
    /// returns false are recorded as constants.
    pub fn bind<'m>(
        &'m self,
        tape: &mut Tape<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> BoundModel<'m, T> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(&p.name)))
            .collect();
        BoundModel { model: self, vars }
    }

    /// Inference without keeping a graph: `(embeddings, logits)`.
    pub fn forward(&self, batch: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let x = tape.constant(batch.clone());
        let e = bound.embed(&mut tape, x)?;
        let l = bound.classify(&mut tape, e)?;
        Ok((tape.value(e).clone(), tape.value(l).clone()))
    }
}

/// A model whose parameters live on a tape.
pub struct BoundModel<'m, T> {
    model: &'m Model<T>,
    vars: Vec<Var>,
}

impl<T: Float> BoundModel<'_, T> {
    fn var(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .iter()
            .position(|p| p.name == name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `[B, 1, n_mels, n_frames] -> [B, D]`
    pub fn embed(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, ModelError> {
        let cfg = &self.model.config;
        let shape = tape.shape(x).to_vec();
        let expected = vec![
            shape.first().copied().unwrap_or(0),
            1,
            cfg.input_shape.0,
            cfg.input_shape.1,
        ];
        if shape.len() != 4 || shape[1..] != expected[1..] {
            return Err(ModelError::InputShape {
                expected,
                got: shape,
            });
        }
        if shape[0] == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let mut h = x;
        for (i, b) in cfg.conv_blocks.iter().enumerate() {
            h = tape.conv2d(
                h,
                self.var(&format!("conv{i}.weight")),
                b.stride,
                b.padding(),
            )?;
            h = tape.relu(h)?;
            if b.pool > 1 {
                h = tape.max_pool2d(h, b.pool)?;
            }
        }
        h = if cfg.conv_blocks.is_empty() {
            tape.flatten(h)?
        } else {
            tape.global_avg_pool(h)?
        };
        let mut e = tape.linear(h, self.var("embed.weight"), self.var("embed.bias"))?;
        if cfg.normalize_embeddings {
            e = tape.l2_normalize_rows(e)?;
        }
        Ok(e)
    }

    /// `[B, D] -> [B, C]` logits; softmax is left to the loss.
    pub fn classify(&self, tape: &mut Tape<T>, embeddings: Var) -> Result<Var, ModelError> {
        let d = self.model.config.embedding_dim;
        let shape = tape.shape(embeddings).to_vec();
        if shape.len() != 2 || shape[1] != d {
            return Err(ModelError::InputShape {
                expected: vec![shape.first().copied().unwrap_or(0), d],
                got: shape,
            });
        }
        Ok(tape.linear(embeddings, self.var("head.weight"), self.var("head.bias"))?)
    }

    /// Gradients in parameter order; `None` for parameters bound as constants.
    pub fn grads(&self, tape: &Tape<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}
