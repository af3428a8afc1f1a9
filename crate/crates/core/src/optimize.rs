//! Gradient-based optimisation of a prompt embedding against an image metric,
//! evaluation of a trajectory on other seeds, and the 1-D subspace traversal.

use serde::{Deserialize, Serialize};

use crate::encode::{encode, sample_latent, PromptText};
use crate::error::{Error, Result};
use crate::generator::{Generator, ImageTensor, NormPolicy};
use crate::geometry::{angle, l2, slerp, Latent, PromptEmbedding};
use crate::metrics::{Direction, Metric, MetricKind};
use crate::ndgrad::{value_and_grad, Tape, Tensor, Var};
use crate::optim::{OptimizerKind, Stepper};
use crate::par::{self, Exec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub metric: MetricKind,
    pub direction: Direction,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Gradient steps; zero records only the initial snapshot.
    pub max_iters: usize,
    pub snapshot_every: usize,
    pub seed: u64,
}

impl OptimizeConfig {
    pub fn new(metric: MetricKind) -> Self {
        Self {
            metric,
            direction: metric.default_direction(),
            lr: 1e-2,
            optimizer: OptimizerKind::adam(),
            max_iters: 200,
            snapshot_every: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.lr)));
        }
        if self.snapshot_every == 0 {
            return Err(Error::invalid("snapshot_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub embedding: PromptEmbedding,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptText,
    pub config: OptimizeConfig,
    pub snapshots: Vec<Snapshot>,
    /// Iterations at which the embedding left the valid norm band.
    pub band_exits: Vec<usize>,
}

impl Trajectory {
    pub fn initial(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trajectory is never empty")
    }
}

/// Metric value of `G(c, z)` and its gradient with respect to `c`.
pub fn metric_value_and_grad(
    gen: &Generator,
    metric: &Metric,
    c: &PromptEmbedding,
    z: &Latent,
) -> Result<(f64, Tensor)> {
    let zt = z.to_tensor();
    value_and_grad(&c.to_tensor(), |tape, cv| {
        let img = gen.trace(cv, tape.constant(zt))?;
        metric.trace(img)
    })
}

/// Runs gradient descent (or ascent) on `psi(prompt)` with the generator
/// weights and the seed's latent held fixed.
pub fn optimize_metric(gen: &Generator, prompt: &PromptText, cfg: &OptimizeConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let gcfg = gen.config();
    let metric = Metric::new(cfg.metric, gcfg.height, gcfg.width)?;
    let z = sample_latent(cfg.seed, gcfg);
    let mut c = encode(prompt, gcfg)?;
    let mut stepper = Stepper::new(cfg.optimizer, cfg.lr, c.data().len());
    let sign = match cfg.direction {
        Direction::Minimize => 1.0,
        Direction::Maximize => -1.0,
    };

    let mut snapshots = Vec::new();
    let mut band_exits = Vec::new();
    for iteration in 0..cfg.max_iters {
        if gen.check_norm(&c).is_err() {
            band_exits.push(iteration);
        }
        let (value, grad) = metric_value_and_grad(gen, &metric, &c, &z)?;
        if grad.data().iter().any(|g| !g.is_finite()) || !value.is_finite() {
            return Err(Error::NanGradient { iteration });
        }
        if iteration % cfg.snapshot_every == 0 {
            snapshots.push(Snapshot {
                iteration,
                embedding: c.clone(),
                value,
            });
        }
        let signed: Vec<f64> = grad.data().iter().map(|g| sign * g).collect();
        let mut params = c.data().to_vec();
        stepper.step(&mut params, &signed);
        c = PromptEmbedding::new(c.rows(), c.dim(), params)
            .map_err(|_| Error::NanGradient { iteration })?;
    }
    if gen.check_norm(&c).is_err() {
        band_exits.push(cfg.max_iters);
    }
    let image = gen.generate_with(&c, &z, NormPolicy::Override)?;
    let value = metric.evaluate(&image)?;
    snapshots.push(Snapshot {
        iteration: cfg.max_iters,
        embedding: c,
        value,
    });

    Ok(Trajectory {
        prompt: prompt.clone(),
        config: cfg.clone(),
        snapshots,
        band_exits,
    })
}

/// Metric values of every snapshot under every seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedEvaluation {
    pub seeds: Vec<u64>,
    pub iterations: Vec<usize>,
    /// `values[snapshot][seed]`.
    pub values: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Population standard deviation per snapshot.
    pub std: Vec<f64>,
}

pub fn evaluate_across_seeds(
    gen: &Generator,
    traj: &Trajectory,
    seeds: &[u64],
) -> Result<SeedEvaluation> {
    evaluate_across_seeds_with(gen, traj, seeds, Exec::Parallel)
}

pub fn evaluate_across_seeds_with(
    gen: &Generator,
    traj: &Trajectory,
    seeds: &[u64],
    exec: Exec,
) -> Result<SeedEvaluation> {
    if traj.snapshots.is_empty() {
        return Err(Error::invalid("trajectory", "has no snapshots"));
    }
    let gcfg = gen.config();
    let metric = Metric::new(traj.config.metric, gcfg.height, gcfg.width)?;
    let latents: Vec<Latent> = seeds.iter().map(|&s| sample_latent(s, gcfg)).collect();
    let pairs: Vec<(usize, usize)> = (0..traj.snapshots.len())
        .flat_map(|i| (0..seeds.len()).map(move |j| (i, j)))
        .collect();
    let flat = par::try_map(exec, &pairs, |&(i, j)| {
        let img = gen.generate_with(&traj.snapshots[i].embedding, &latents[j], NormPolicy::Override)?;
        metric.evaluate(&img)
    })?;

    let values: Vec<Vec<f64>> = if seeds.is_empty() {
        vec![Vec::new(); traj.snapshots.len()]
    } else {
        flat.chunks(seeds.len()).map(<[f64]>::to_vec).collect()
    };
    let (mean, std) = values
        .iter()
        .map(|row| {
            if row.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let n = row.len() as f64;
            let m = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            (m, var.sqrt())
        })
        .unzip();
    Ok(SeedEvaluation {
        seeds: seeds.to_vec(),
        iterations: traj.snapshots.iter().map(|s| s.iteration).collect(),
        values,
        mean,
        std,
    })
}

/// One grid point of a subspace traversal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspacePoint {
    pub alpha: f64,
    pub beta: f64,
    pub loss: f64,
    /// Loss at `beta = 0` for the same latent.
    pub baseline: f64,
}

/// Embeddings restricted to `slerp(a, b, sigmoid(beta))`, matched against a
/// fixed target while the latent moves from `z1` to `z2`.
///
/// The default target is the image at the origin of both paths,
/// `G(slerp(a, b, 1/2), z1)`, so the traversal starts at zero loss.
pub struct Subspace1d<'g> {
    gen: &'g Generator,
    a: PromptEmbedding,
    b: PromptEmbedding,
    z1: Latent,
    z2: Latent,
    target: ImageTensor,
    omega: f64,
}

impl<'g> Subspace1d<'g> {
    pub fn new(
        gen: &'g Generator,
        a: PromptEmbedding,
        b: PromptEmbedding,
        z1: Latent,
        z2: Latent,
    ) -> Result<Self> {
        let placeholder = ImageTensor::filled(1, 1, 0.0);
        let mut s = Self::with_target(gen, a, b, z1, z2, placeholder)?;
        s.target = s.render(0.0, 0.0)?;
        Ok(s)
    }

    pub fn with_target(
        gen: &'g Generator,
        a: PromptEmbedding,
        b: PromptEmbedding,
        z1: Latent,
        z2: Latent,
        target: ImageTensor,
    ) -> Result<Self> {
        let omega = angle(a.data(), b.data());
        if !(1e-7..=std::f64::consts::PI - 1e-6).contains(&omega) {
            return Err(Error::Degenerate("subspace endpoints must span a plane"));
        }
        Ok(Self {
            gen,
            a,
            b,
            z1,
            z2,
            target,
            omega,
        })
    }

    pub fn target(&self) -> &ImageTensor {
        &self.target
    }

    fn latent(&self, alpha: f64) -> Result<Latent> {
        slerp(&self.z1, &self.z2, alpha)
    }

    /// `slerp(a, b, sigmoid(beta))` recorded on the tape.
    fn trace_embedding<'t>(&self, beta: Var<'t>) -> Result<Var<'t>> {
        let tape = beta.tape();
        let (na, nb) = (l2(self.a.data()), l2(self.b.data()));
        let unit = |e: &PromptEmbedding, n: f64| {
            Tensor::new(vec![e.rows(), e.dim()], e.data().iter().map(|v| v / n).collect())
        };
        let a_hat = tape.constant(unit(&self.a, na)?);
        let b_hat = tape.constant(unit(&self.b, nb)?);
        let omega = self.omega;
        let inv_sin = 1.0 / omega.sin();
        let t = beta.sigmoid();
        let wa = t.affine(-omega, omega).sin().scale(inv_sin);
        let wb = t.affine(omega, 0.0).sin().scale(inv_sin);
        let norm = t.affine(nb - na, na);
        a_hat.scale_by(wa)?.add(b_hat.scale_by(wb)?)?.scale_by(norm)
    }

    pub fn embedding_at(&self, beta: f64) -> Result<PromptEmbedding> {
        let tape = Tape::untraced();
        let c = self.trace_embedding(tape.constant(Tensor::scalar(beta)))?;
        PromptEmbedding::from_tensor(&c.value())
    }

    fn render(&self, alpha: f64, beta: f64) -> Result<ImageTensor> {
        let tape = Tape::untraced();
        let c = self.trace_embedding(tape.constant(Tensor::scalar(beta)))?;
        let z = tape.constant(self.latent(alpha)?.to_tensor());
        ImageTensor::from_tensor(&self.gen.trace(c, z)?.value())
    }

    fn loss_and_grad(&self, z: &Tensor, beta: f64) -> Result<(f64, f64)> {
        let target = self.target.to_tensor();
        let (loss, grad) = value_and_grad(&Tensor::scalar(beta), |tape, b| {
            let c = self.trace_embedding(b)?;
            let img = self.gen.trace(c, tape.constant(z.clone()))?;
            Ok(tape.constant(target).sub(img)?.sum_squares())
        })?;
        Ok((loss, grad.item()))
    }

    /// Squared image distance to the target at `(alpha, beta)`.
    pub fn loss(&self, alpha: f64, beta: f64) -> Result<f64> {
        Ok(self.render(alpha, beta)?.squared_distance(&self.target))
    }

    /// Minimises over `beta` at each grid point, warm-starting from the
    /// previous point and keeping the best value seen (including `beta = 0`).
    pub fn traverse(&self, alpha_grid: &[f64], inner_iters: usize) -> Result<Vec<SubspacePoint>> {
        for w in alpha_grid.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("alpha_grid", "must be strictly ascending"));
            }
        }
        if alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alpha_grid", "values must lie in [0, 1]"));
        }

        let mut warm = 0.0;
        let mut out = Vec::with_capacity(alpha_grid.len());
        for &alpha in alpha_grid {
            let z = self.latent(alpha)?.to_tensor();
            let (baseline, _) = self.loss_and_grad(&z, 0.0)?;
            let (mut beta, mut f, mut g) = {
                let (f, g) = self.loss_and_grad(&z, warm)?;
                (warm, f, g)
            };
            let mut best = if baseline <= f { (0.0, baseline) } else { (beta, f) };

            // Gradient descent with a backtracking step length.
            let mut step = 1.0;
            for _ in 0..inner_iters {
                if g == 0.0 {
                    break;
                }
                let mut accepted = false;
                for _ in 0..60 {
                    let cand = beta - step * g;
                    let (fc, gc) = self.loss_and_grad(&z, cand)?;
                    if fc < f {
                        (beta, f, g) = (cand, fc, gc);
                        step *= 2.0;
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if f < best.1 {
                    best = (beta, f);
                }
                if !accepted {
                    break;
                }
            }
            if !best.1.is_finite() {
                return Err(Error::NanLoss { step: out.len() });
            }
            warm = best.0;
            out.push(SubspacePoint {
                alpha,
                beta: best.0,
                loss: best.1,
                baseline,
            });
        }
        Ok(out)
    }
}

/// Traversal with the default target; see [`Subspace1d`].
pub fn subspace_1d_traverse(
    gen: &Generator,
    a: &PromptEmbedding,
    b: &PromptEmbedding,
    z1: &Latent,
    z2: &Latent,
    alpha_grid: &[f64],
    inner_iters: usize,
) -> Result<Vec<SubspacePoint>> {
    Subspace1d::new(gen, a.clone(), b.clone(), z1.clone(), z2.clone())?.traverse(alpha_grid, inner_iters)
}

/// `k` evenly spaced points from 0 to 1 inclusive.
pub fn uniform_grid(k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..k).map(|i| i as f64 / (k - 1) as f64).collect(),
    }
}
