//! Differentiable scalar image metrics.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ImageTensor;
use crate::ndgrad::{Tape, Tensor, Var};
use crate::rng::RngStream;

/// Rec. 709 luma weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// Nine-point Laplacian stencil.
pub const LAPLACIAN: [f64; 9] = [1.0, 1.0, 1.0, 1.0, -8.0, 1.0, 1.0, 1.0, 1.0];

pub const DEFAULT_AESTHETIC_SEED: u64 = 0xAE57_4E71;

const AESTHETIC_POOL: usize = 8;
const AESTHETIC_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Blurriness,
    Sharpness,
    Aesthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl MetricKind {
    pub fn default_direction(self) -> Direction {
        match self {
            MetricKind::Blurriness => Direction::Minimize,
            MetricKind::Sharpness | MetricKind::Aesthetic => Direction::Maximize,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Blurriness => "blurriness",
            MetricKind::Sharpness => "sharpness",
            MetricKind::Aesthetic => "aesthetic",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blurriness" => Ok(MetricKind::Blurriness),
            "sharpness" => Ok(MetricKind::Sharpness),
            "aesthetic" => Ok(MetricKind::Aesthetic),
            other => Err(Error::invalid("metric", format!("unknown metric {other:?}"))),
        }
    }
}

/// Frozen stand-in for an image-embedding + linear-head aesthetic scorer:
/// 8x8 average pool, a `tanh` projection to 32 features, and a logistic head
/// mapped onto `(1, 10)`.
pub struct AestheticHead {
    height: usize,
    width: usize,
    pool: Arc<Tensor>,
    projection: Arc<Tensor>,
    head: Tensor,
}

impl AestheticHead {
    pub fn new(height: usize, width: usize, seed: u64) -> Result<Self> {
        if !height.is_multiple_of(AESTHETIC_POOL) || !width.is_multiple_of(AESTHETIC_POOL) {
            return Err(Error::ImageSize {
                height,
                width,
                reason: "aesthetic needs dimensions divisible by 8",
            });
        }
        let features = AESTHETIC_POOL * AESTHETIC_POOL * 3;
        let (bh, bw) = (height / AESTHETIC_POOL, width / AESTHETIC_POOL);
        let weight = 1.0 / (bh * bw) as f64;
        let mut pool = vec![0.0; features * height * width * 3];
        let cols = height * width * 3;
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let cell = ((y / bh) * AESTHETIC_POOL + x / bw) * 3 + c;
                    pool[cell * cols + (y * width + x) * 3 + c] = weight;
                }
            }
        }

        let mut proj_stream = RngStream::derive(seed, "aesthetic-proj");
        let scale = 1.0 / (features as f64).sqrt();
        let projection = proj_stream
            .gaussians(AESTHETIC_WIDTH * features)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let mut head_stream = RngStream::derive(seed, "aesthetic-head");
        let head = head_stream
            .gaussians(AESTHETIC_WIDTH)
            .into_iter()
            .map(|v| 0.5 * v)
            .collect();

        Ok(Self {
            height,
            width,
            pool: Arc::new(Tensor::new(vec![features, cols], pool)?),
            projection: Arc::new(Tensor::new(vec![AESTHETIC_WIDTH, features], projection)?),
            head: Tensor::new(vec![AESTHETIC_WIDTH], head)?,
        })
    }

    fn trace<'t>(&self, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        if shape[..2] != [self.height, self.width] {
            return Err(Error::ShapeMismatch {
                op: "aesthetic",
                lhs: shape,
                rhs: vec![self.height, self.width, 3],
            });
        }
        let pooled = image.flatten().premul(&self.pool)?;
        let features = pooled.premul(&self.projection)?.tanh();
        let w = image.tape().constant(self.head.clone());
        // Bias is zero.
        Ok(w.dot(features)?.sigmoid().affine(9.0, 1.0))
    }
}

/// A metric together with the frozen parameters it needs.
#[derive(Clone)]
pub struct Metric {
    kind: MetricKind,
    aesthetic: Option<Arc<AestheticHead>>,
}

impl fmt::Debug for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Metric").field("kind", &self.kind).finish()
    }
}

impl Metric {
    /// Metric for images of the given size; the aesthetic head is built once.
    pub fn new(kind: MetricKind, height: usize, width: usize) -> Result<Self> {
        Self::with_seed(kind, height, width, DEFAULT_AESTHETIC_SEED)
    }

    pub fn with_seed(kind: MetricKind, height: usize, width: usize, seed: u64) -> Result<Self> {
        let aesthetic = match kind {
            MetricKind::Aesthetic => Some(Arc::new(AestheticHead::new(height, width, seed)?)),
            _ => None,
        };
        Ok(Self { kind, aesthetic })
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    /// Records the metric of an `[H, W, 3]` image variable.
    pub fn trace<'t>(&self, image: Var<'t>) -> Result<Var<'t>> {
        check_rgb(&image.shape())?;
        match self.kind {
            MetricKind::Blurriness => trace_blurriness(image),
            MetricKind::Sharpness => Ok(trace_blurriness(image)?.scale(-1.0)),
            MetricKind::Aesthetic => self
                .aesthetic
                .as_ref()
                .expect("aesthetic metric always carries a head")
                .trace(image),
        }
    }

    pub fn evaluate(&self, image: &ImageTensor) -> Result<f64> {
        let tape = Tape::untraced();
        Ok(self.trace(tape.constant(image.to_tensor()))?.item())
    }
}

fn check_rgb(shape: &[usize]) -> Result<()> {
    match shape {
        [h, w, 3] if *h >= 3 && *w >= 3 => Ok(()),
        [h, w, 3] => Err(Error::ImageSize {
            height: *h,
            width: *w,
            reason: "Laplacian needs at least 3x3 pixels",
        }),
        other => Err(Error::invalid(
            "image",
            format!("expected [H, W, 3], got {other:?}"),
        )),
    }
}

fn trace_blurriness(image: Var<'_>) -> Result<Var<'_>> {
    let shape = image.shape();
    let (h, w) = (shape[0], shape[1]);
    if h < 3 || w < 3 {
        return Err(Error::ImageSize {
            height: h,
            width: w,
            reason: "Laplacian needs at least 3x3 pixels",
        });
    }
    let tape = image.tape();
    let luma = tape.constant(Tensor::new(vec![3, 1], LUMA.to_vec())?);
    let gray = image
        .reshape(vec![h * w, 3])?
        .matmul(luma)?
        .reshape(vec![h, w])?;
    let kernel = tape.constant(Tensor::new(vec![3, 3], LAPLACIAN.to_vec())?);
    Ok(gray.conv2d_valid(kernel)?.variance())
}

/// Population variance of the Laplacian of the luma channel.
pub fn blurriness(image: &ImageTensor) -> Result<f64> {
    let tape = Tape::untraced();
    let v = tape.constant(image.to_tensor());
    check_rgb(&v.shape())?;
    Ok(trace_blurriness(v)?.item())
}

pub fn sharpness(image: &ImageTensor) -> Result<f64> {
    Ok(-blurriness(image)?)
}

/// Score in `(1, 10)` from a head seeded with [`DEFAULT_AESTHETIC_SEED`].
pub fn aesthetic(image: &ImageTensor) -> Result<f64> {
    Metric::new(MetricKind::Aesthetic, image.height(), image.width())?.evaluate(image)
}
