//! Differentiable stand-in for the text-to-image model.
//!
//! `G(C, z) = sigmoid(W3 tanh(W2 tanh(W1 [vec C; z] + b1) + b2) + b3)`,
//! reshaped to `H x W x 3`. Weights are frozen pseudo-random draws; the map
//! is smooth, deterministic in `(C, z)`, and differentiable in both.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encode::GeneratorConfig;
use crate::error::{Error, Result};
use crate::geometry::{Latent, PromptEmbedding};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::par::{self, Exec};
use crate::rng::RngStream;

/// `H x W x C` image, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(Error::DataLength {
                shape: vec![height, width, channels],
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("image", "values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, 3, vec![value; height * width * 3]).expect("valid fill")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, c] => Self::new(*h, *w, *c, t.data().to_vec()),
            other => Err(Error::invalid(
                "image tensor",
                format!("expected [H, W, C], got {other:?}"),
            )),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, self.channels], self.data.clone())
            .expect("image invariants imply a valid tensor")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Squared L2 distance to another image of the same size.
    pub fn squared_distance(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum()
    }
}

/// Whether `generate` rejects embeddings outside the valid norm band.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormPolicy {
    #[default]
    Enforce,
    Override,
}

struct Layer {
    weight: Arc<Tensor>,
    bias: Tensor,
}

pub struct Generator {
    cfg: GeneratorConfig,
    layers: Vec<Layer>,
}

impl std::fmt::Debug for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Generator").field("cfg", &self.cfg).finish()
    }
}

impl Generator {
    /// Builds the frozen weights.
    ///
    /// Layer `i` (1-based) draws its `[fan_out, fan_in]` matrix row-major from
    /// stream `"weights:layer:<i>"` of `weight_seed`, uniform in
    /// `±sqrt(6 / (fan_in + fan_out))`; biases are zero.
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut widths = vec![cfg.embedding_len() + cfg.latent_len];
        widths.extend(&cfg.hidden);
        widths.push(cfg.image_len());

        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut stream =
                    RngStream::derive(cfg.weight_seed, &format!("weights:layer:{}", i + 1));
                let data = (0..fan_in * fan_out)
                    .map(|_| stream.uniform_range(-limit, limit))
                    .collect();
                Layer {
                    weight: Arc::new(Tensor::from_parts(vec![fan_out, fan_in], data)),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn check_norm(&self, c: &PromptEmbedding) -> Result<()> {
        let (lo, hi) = self.cfg.norm_band();
        let norm = c.norm();
        if norm < lo || norm > hi {
            return Err(Error::NormOutOfBand { norm, lo, hi });
        }
        Ok(())
    }

    fn check_shapes(&self, c: &PromptEmbedding, z: &Latent) -> Result<()> {
        if c.rows() != self.cfg.tokens || c.dim() != self.cfg.dim {
            return Err(Error::ShapeMismatch {
                op: "generate(embedding)",
                lhs: vec![c.rows(), c.dim()],
                rhs: vec![self.cfg.tokens, self.cfg.dim],
            });
        }
        if z.data().len() != self.cfg.latent_len {
            return Err(Error::ShapeMismatch {
                op: "generate(latent)",
                lhs: vec![z.data().len()],
                rhs: vec![self.cfg.latent_len],
            });
        }
        Ok(())
    }

    /// Records the forward pass on `c`'s tape; returns the `[H, W, C]` image.
    pub fn trace<'t>(&self, c: Var<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let mut h = Var::concat(&[c.flatten(), z.flatten()])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let bias = c.tape().constant(layer.bias.clone());
            let pre = h.premul(&layer.weight)?.add(bias)?;
            h = if i == last { pre.sigmoid() } else { pre.tanh() };
        }
        h.reshape(vec![self.cfg.height, self.cfg.width, self.cfg.channels])
    }

    pub fn generate(&self, c: &PromptEmbedding, z: &Latent) -> Result<ImageTensor> {
        self.generate_with(c, z, NormPolicy::Enforce)
    }

    pub fn generate_with(
        &self,
        c: &PromptEmbedding,
        z: &Latent,
        policy: NormPolicy,
    ) -> Result<ImageTensor> {
        self.check_shapes(c, z)?;
        if policy == NormPolicy::Enforce {
            self.check_norm(c)?;
        }
        let tape = Tape::untraced();
        let img = self.trace(tape.constant(c.to_tensor()), tape.constant(z.to_tensor()))?;
        ImageTensor::from_tensor(&img.value())
    }

    pub fn generate_batch(&self, c: &PromptEmbedding, zs: &[Latent]) -> Result<Vec<ImageTensor>> {
        self.generate_batch_with(c, zs, Exec::Parallel)
    }

    pub fn generate_batch_with(
        &self,
        c: &PromptEmbedding,
        zs: &[Latent],
        exec: Exec,
    ) -> Result<Vec<ImageTensor>> {
        self.check_norm(c)?;
        par::try_map(exec, zs, |z| self.generate(c, z))
    }
}
