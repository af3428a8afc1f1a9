//! Seed-invariant prompt embeddings.
//!
//! Starting from `psi(prompt)`, the embedding is moved so that images rendered
//! from fresh latents approach the target `G(psi(prompt), z)`. Fresh latents
//! are blended in gradually: step `k` of `n` uses `slerp(z, z_fresh, k / n)`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::encode::{encode, sample_latent, GeneratorConfig, PromptText};
use crate::error::{Error, Result};
use crate::generator::{Generator, ImageTensor, NormPolicy};
use crate::geometry::{slerp, Latent, PromptEmbedding};
use crate::ndgrad::{value_and_grad, Tensor};
use crate::optim::{OptimizerKind, Stepper};
use crate::par::{self, Exec};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedInvConfig {
    /// Number of steps `n`; step `k` uses blend factor `k / n`.
    pub steps: usize,
    pub batch: usize,
    /// Step size. The loss is a sum over every pixel, so useful values are
    /// far larger than for per-pixel means.
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Seeds for the held-out comparison; `None` derives eight from the run seed.
    pub validation_seeds: Option<Vec<u64>>,
}

impl Default for SeedInvConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            batch: 4,
            lr: 0.5,
            optimizer: OptimizerKind::VanillaGd,
            validation_seeds: None,
        }
    }
}

impl SeedInvConfig {
    /// A zero step size is accepted for diagnostics.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be non-negative", self.lr)));
        }
        Ok(())
    }

    /// Blend factor toward the fresh latents at `step` (0-based).
    pub fn alpha(&self, step: usize) -> f64 {
        (step + 1) as f64 / self.steps as f64
    }
}

pub const DEFAULT_VALIDATION_SEEDS: usize = 8;

/// Held-out seeds for a run; never equal to the training seed.
pub fn default_validation_seeds(seed: u64) -> Vec<u64> {
    let mut stream = RngStream::derive(seed, "seedinv:validation");
    let mut seeds = Vec::with_capacity(DEFAULT_VALIDATION_SEEDS);
    while seeds.len() < DEFAULT_VALIDATION_SEEDS {
        let s = stream.next_u64();
        if s != seed && !seeds.contains(&s) {
            seeds.push(s);
        }
    }
    seeds
}

/// Fresh latents for one step, from stream `"seedinv:<step>"`.
pub fn training_batch(seed: u64, step: usize, batch: usize, cfg: &GeneratorConfig) -> Vec<Latent> {
    let mut stream = RngStream::derive(seed, &format!("seedinv:{step}"));
    (0..batch)
        .map(|_| Latent::new(stream.gaussians(cfg.latent_len)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub alpha: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub seed: u64,
    pub baseline: f64,
    pub result: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedInvReport {
    pub prompt: PromptText,
    pub seed: u64,
    pub config: SeedInvConfig,
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRow>,
    /// Steps after which the embedding sat outside the valid norm band.
    pub band_exits: Vec<usize>,
}

impl SeedInvReport {
    pub fn mean_baseline(&self) -> f64 {
        mean(self.validation.iter().map(|r| r.baseline))
    }

    pub fn mean_result(&self) -> f64 {
        mean(self.validation.iter().map(|r| r.result))
    }

    /// `1 - result / baseline` over the validation means.
    pub fn relative_reduction(&self) -> f64 {
        1.0 - self.mean_result() / self.mean_baseline()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Mean over the batch of `‖target − G(c, slerp(z, z_b, alpha))‖²` and its
/// gradient with respect to `c`.
///
/// Each batch element runs on its own tape; the per-element gradients are
/// summed in batch order.
pub fn seedinv_loss_and_grad(
    gen: &Generator,
    c: &PromptEmbedding,
    target: &ImageTensor,
    z: &Latent,
    z_batch: &[Latent],
    alpha: f64,
    exec: Exec,
) -> Result<(f64, Tensor)> {
    if z_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let latents = z_batch
        .iter()
        .map(|zb| slerp(z, zb, alpha))
        .collect::<Result<Vec<_>>>()?;
    let target = target.to_tensor();
    let ct = c.to_tensor();
    let parts = par::try_map(exec, &latents, |zi| {
        value_and_grad(&ct, |tape, cv| {
            let img = gen.trace(cv, tape.constant(zi.to_tensor()))?;
            Ok(tape.constant(target.clone()).sub(img)?.sum_squares())
        })
    })?;

    let scale = 1.0 / z_batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; ct.len()];
    for (l, g) in &parts {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g.data()) {
            *acc += v;
        }
    }
    let grad = Tensor::new(ct.shape().to_vec(), grad.into_iter().map(|v| v * scale).collect())?;
    Ok((loss * scale, grad))
}

/// Loss value only; see [`seedinv_loss_and_grad`].
pub fn seedinv_loss(
    gen: &Generator,
    c: &PromptEmbedding,
    target: &ImageTensor,
    z: &Latent,
    z_batch: &[Latent],
    alpha: f64,
) -> Result<f64> {
    if z_batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let mut total = 0.0;
    for zb in z_batch {
        let zi = slerp(z, zb, alpha)?;
        total += gen
            .generate_with(c, &zi, NormPolicy::Override)?
            .squared_distance(target);
    }
    Ok(total / z_batch.len() as f64)
}

/// Runs the seed-invariance optimisation for `(prompt, seed)`.
pub fn seed_invariant_optimize(
    gen: &Generator,
    prompt: &PromptText,
    seed: u64,
    cfg: &SeedInvConfig,
) -> Result<(PromptEmbedding, SeedInvReport)> {
    seed_invariant_optimize_with(gen, prompt, seed, cfg, Exec::Parallel)
}

pub fn seed_invariant_optimize_with(
    gen: &Generator,
    prompt: &PromptText,
    seed: u64,
    cfg: &SeedInvConfig,
    exec: Exec,
) -> Result<(PromptEmbedding, SeedInvReport)> {
    cfg.validate()?;
    let gcfg = gen.config();
    let z = sample_latent(seed, gcfg);
    let initial = encode(prompt, gcfg)?;
    let target = gen.generate(&initial, &z)?;

    let validation_seeds = cfg
        .validation_seeds
        .clone()
        .unwrap_or_else(|| default_validation_seeds(seed));
    if validation_seeds.contains(&seed) {
        return Err(Error::invalid(
            "validation_seeds",
            "must not contain the training seed",
        ));
    }

    let mut c = initial.clone();
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr, c.data().len());
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut band_exits = Vec::new();
    for step in 0..cfg.steps {
        let alpha = cfg.alpha(step);
        let batch = training_batch(seed, step, cfg.batch, gcfg);
        let (loss, grad) = seedinv_loss_and_grad(gen, &c, &target, &z, &batch, alpha, exec)?;
        if !loss.is_finite() || grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::NanLoss { step });
        }
        steps.push(StepRecord { step, alpha, loss });
        let mut params = c.data().to_vec();
        stepper.step(&mut params, grad.data());
        c = PromptEmbedding::new(c.rows(), c.dim(), params).map_err(|_| Error::NanLoss { step })?;
        if gen.check_norm(&c).is_err() {
            warn!("seed invariance: embedding left the norm band after step {step}");
            band_exits.push(step);
        }
    }

    let validation = par::try_map(exec, &validation_seeds, |&vs| {
        let zv = sample_latent(vs, gcfg);
        let baseline = gen.generate(&initial, &zv)?.squared_distance(&target);
        let result = gen
            .generate_with(&c, &zv, NormPolicy::Override)?
            .squared_distance(&target);
        Ok::<_, Error>(ValidationRow {
            seed: vs,
            baseline,
            result,
        })
    })?;

    let report = SeedInvReport {
        prompt: prompt.clone(),
        seed,
        config: cfg.clone(),
        steps,
        validation,
        band_exits,
    };
    Ok((c, report))
}
