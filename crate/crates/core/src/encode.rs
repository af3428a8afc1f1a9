//! Toy prompt encoder, latent sampling and random prompts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Latent, PromptEmbedding};
use crate::rng::{fnv1a64, RngStream};

pub const DEFAULT_WEIGHT_SEED: u64 = 0xC0FFEE;

/// Dimensions of the stand-in generator and its embedding space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Token rows `T`.
    pub tokens: usize,
    /// Embedding width `D`.
    pub dim: usize,
    /// Latent length `L`.
    pub latent_len: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: Vec<usize>,
    pub channels: usize,
    pub weight_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            dim: 16,
            latent_len: 32,
            height: 32,
            width: 32,
            hidden: vec![256, 256],
            channels: 3,
            weight_seed: DEFAULT_WEIGHT_SEED,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("tokens", self.tokens),
            ("dim", self.dim),
            ("latent_len", self.latent_len),
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "layer widths must be positive"));
        }
        if self.tokens * self.dim < 2 {
            return Err(Error::invalid("tokens", "T*D must be at least 2"));
        }
        Ok(())
    }

    pub fn embedding_len(&self) -> usize {
        self.tokens * self.dim
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Centre of the valid norm band, `sqrt(T*D)`.
    pub fn reference_norm(&self) -> f64 {
        (self.embedding_len() as f64).sqrt()
    }

    /// Accepted embedding norms, `[0.5, 2] * sqrt(T*D)`.
    pub fn norm_band(&self) -> (f64, f64) {
        let n0 = self.reference_norm();
        (0.5 * n0, 2.0 * n0)
    }
}

/// Text prompt handed to the encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptText(pub String);

impl PromptText {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn tokens(&self) -> Vec<String> {
        self.0.split_whitespace().map(str::to_lowercase).collect()
    }
}

impl From<&str> for PromptText {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl std::fmt::Display for PromptText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

const POSITION_WEIGHT: f64 = 0.1;
const PAD_TOKEN: &str = "";

fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    RngStream::derive(fnv1a64(token.as_bytes()), "token").gaussians(dim)
}

/// Maps a prompt to a `T x D` embedding.
///
/// Each row is the token's hash vector plus a small positional vector,
/// normalised to length `sqrt(D)`; rows past the last token use the pad
/// token. The flattened norm is therefore `sqrt(T*D)` for every prompt.
pub fn encode(prompt: &PromptText, cfg: &GeneratorConfig) -> Result<PromptEmbedding> {
    if prompt.as_str().trim().is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let tokens = prompt.tokens();
    let dim = cfg.dim;
    let row_norm = (dim as f64).sqrt();
    let mut data = Vec::with_capacity(cfg.embedding_len());
    for j in 0..cfg.tokens {
        let token = tokens.get(j).map(String::as_str).unwrap_or(PAD_TOKEN);
        let base = token_vector(token, dim);
        let pos = token_vector(&format!("pos:{j}"), dim);
        let row: Vec<f64> = base
            .iter()
            .zip(&pos)
            .map(|(b, p)| b + POSITION_WEIGHT * p)
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm * row_norm));
    }
    PromptEmbedding::new(cfg.tokens, dim, data)
}

/// Standard-normal latent drawn from the `"latent"` stream of `seed`.
pub fn sample_latent(seed: u64, cfg: &GeneratorConfig) -> Latent {
    let data = RngStream::derive(seed, "latent").gaussians(cfg.latent_len);
    Latent::with_seed(data, seed)
}

const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Random text over `[a-z0-9 ]` whose length is uniform in
/// `[len_min, len_max]`; the first and last characters are never spaces.
pub fn random_prompt(stream: &mut RngStream, len_min: usize, len_max: usize) -> Result<PromptText> {
    if len_min < 1 || len_min > len_max {
        return Err(Error::invalid(
            "prompt length",
            format!("need 1 <= len_min <= len_max, got {len_min}..={len_max}"),
        ));
    }
    let len = len_min + stream.below(len_max - len_min + 1);
    let text: String = (0..len)
        .map(|i| {
            let edge = i == 0 || i + 1 == len;
            let n = if edge { ALNUM.len() } else { ALNUM.len() + 1 };
            match stream.below(n) {
                k if k < ALNUM.len() => ALNUM[k] as char,
                _ => ' ',
            }
        })
        .collect();
    Ok(PromptText(text))
}

/// Prompts used by the regression experiments.
pub const REFERENCE_PROMPTS: [&str; 3] = [
    "single color ball",
    "blue single color ball",
    "highly detailed photoreal eldritch biomechanical rock monoliths, stone obelisks, aurora borealis, psychedelic",
];

/// Default length range for random candidate prompts.
pub const RANDOM_PROMPT_LEN: (usize, usize) = (8, 24);
