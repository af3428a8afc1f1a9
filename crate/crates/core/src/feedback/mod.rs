//! Iterative human-feedback navigation of the embedding space.
//!
//! Each step offers `k` candidate embeddings at an equal angle from the
//! current one, pulled slightly back toward the base prompt plus a quality
//! modifier. The user picks one and a blend factor; the session slerps toward
//! the pick and renders the result with the session's fixed latent.

mod log;
mod projection;

pub use log::{replay, CandidateRecord, SessionEvent, SessionLog};
pub use projection::{jacobi_eigen, pca_coordinates, project_neighborhood, Point2, Projection};

use serde::{Deserialize, Serialize};

use crate::encode::{encode, random_prompt, sample_latent, PromptText, RANDOM_PROMPT_LEN};
use crate::error::{Error, Result};
use crate::generator::{Generator, ImageTensor};
use crate::geometry::{
    select_diverse, slerp, solve_slerp_param, Latent, PromptEmbedding, SlerpParam,
};
use crate::par::{self, Exec};
use crate::rng::{fnv1a64, RngStream};

pub const DEFAULT_MODIFIERS: [&str; 10] = [
    "highly detailed",
    "award-winning",
    "4k",
    "trending on artstation",
    "sharp focus",
    "cinematic lighting",
    "masterpiece",
    "vivid colors",
    "studio quality",
    "8k resolution",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackConfig {
    /// Candidates shown per step.
    pub k: usize,
    /// Cosine between the current embedding and every candidate.
    pub kappa: f64,
    /// Pull toward the base prompt plus modifier.
    pub mu: f64,
    /// Random prompts drawn before diversity selection.
    pub pool_size: usize,
    pub prompt_len: (usize, usize),
    pub modifiers: Vec<String>,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self {
            k: 5,
            kappa: 0.92,
            mu: 0.15,
            pool_size: 64,
            prompt_len: RANDOM_PROMPT_LEN,
            modifiers: DEFAULT_MODIFIERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl FeedbackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if self.pool_size < self.k {
            return Err(Error::invalid("pool_size", "must be at least k"));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::invalid("kappa", format!("{} is outside (0, 1)", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid("mu", format!("{} is outside [0, 1]", self.mu)));
        }
        if self.modifiers.is_empty() {
            return Err(Error::invalid("modifiers", "list is empty"));
        }
        let (lo, hi) = self.prompt_len;
        if lo < 1 || lo > hi {
            return Err(Error::invalid("prompt_len", format!("bad range {lo}..={hi}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Random prompt the candidate direction came from.
    pub prompt: String,
    pub modifier: String,
    /// Slerp parameter toward the random prompt.
    pub c: f64,
    pub clamped: bool,
    /// Embedding at cosine `kappa` from the current one, before the pull
    /// toward the base prompt.
    pub constrained: PromptEmbedding,
    /// Offered embedding.
    pub embedding: PromptEmbedding,
    pub image: ImageTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceSet {
    pub step: usize,
    pub candidates: Vec<Candidate>,
    pub projection: Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionStep {
    pub choice: usize,
    pub alpha: f64,
    pub candidates: Vec<Candidate>,
    pub previous: PromptEmbedding,
    pub result: PromptEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    id: String,
    prompt: PromptText,
    seed: u64,
    config: FeedbackConfig,
    latent: Latent,
    current: PromptEmbedding,
    image: ImageTensor,
    history: Vec<SessionStep>,
    choices: Option<ChoiceSet>,
    log: SessionLog,
}

impl Session {
    /// Starts at `psi(prompt)` and renders the first image; no choices yet.
    pub fn create(
        gen: &Generator,
        id: impl Into<String>,
        prompt: PromptText,
        seed: u64,
        config: FeedbackConfig,
    ) -> Result<Self> {
        config.validate()?;
        let gcfg = gen.config();
        let current = encode(&prompt, gcfg)?;
        let latent = sample_latent(seed, gcfg);
        let image = gen.generate(&current, &latent)?;
        let id = id.into();
        let mut log = SessionLog::default();
        log.record_create(&id, &prompt, seed, &config, &current);
        Ok(Self {
            id,
            prompt,
            seed,
            config,
            latent,
            current,
            image,
            history: Vec::new(),
            choices: None,
            log,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn prompt(&self) -> &PromptText {
        &self.prompt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &FeedbackConfig {
        &self.config
    }

    pub fn latent(&self) -> &Latent {
        &self.latent
    }

    pub fn current(&self) -> &PromptEmbedding {
        &self.current
    }

    pub fn image(&self) -> &ImageTensor {
        &self.image
    }

    pub fn step(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[SessionStep] {
        &self.history
    }

    pub fn choices(&self) -> Option<&ChoiceSet> {
        self.choices.as_ref()
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    /// Stream seed for the candidate pool: the session seed mixed with the
    /// base prompt, so equal `(prompt, seed)` pairs see equal candidates.
    fn pool_seed(&self) -> u64 {
        self.seed ^ fnv1a64(self.prompt.as_str().as_bytes())
    }

    fn draw_pool(
        &self,
        gen: &Generator,
        stream: &mut RngStream,
    ) -> Result<(Vec<PromptText>, Vec<PromptEmbedding>)> {
        let (lo, hi) = self.config.prompt_len;
        let prompts = (0..self.config.pool_size)
            .map(|_| random_prompt(stream, lo, hi))
            .collect::<Result<Vec<_>>>()?;
        let embeddings = prompts
            .iter()
            .map(|p| encode(p, gen.config()))
            .collect::<Result<Vec<_>>>()?;
        Ok((prompts, embeddings))
    }

    /// Builds (or rebuilds) the choice set for the current step.
    pub fn generate_choices(&mut self, gen: &Generator) -> Result<&ChoiceSet> {
        self.generate_choices_with(gen, Exec::Parallel)
    }

    pub fn generate_choices_with(&mut self, gen: &Generator, exec: Exec) -> Result<&ChoiceSet> {
        let step = self.step();
        let base = self.pool_seed();
        let mut stream = RngStream::derive(base, &format!("choices:{step}"));
        let mut picked = self.pick_constrained(gen, &mut stream)?;
        if picked.iter().all(|p| p.2.clamped) {
            ::log::warn!("all candidates clamped at step {step}; redrawing the pool once");
            stream = RngStream::derive(base, &format!("choices:{step}:retry"));
            picked = self.pick_constrained(gen, &mut stream)?;
            if picked.iter().all(|p| p.2.clamped) {
                return Err(Error::AllCandidatesClamped);
            }
        }

        let mut pulled = Vec::with_capacity(picked.len());
        for (prompt, constrained, param) in picked {
            let modifier = self.config.modifiers[stream.below(self.config.modifiers.len())].clone();
            let anchor = encode(
                &PromptText(format!("{} {}", self.prompt.as_str(), modifier)),
                gen.config(),
            )?;
            let embedding = slerp(&constrained, &anchor, self.config.mu)?;
            pulled.push((prompt, modifier, param, constrained, embedding));
        }

        let images = par::try_map(exec, &pulled, |(_, _, _, _, e)| gen.generate(e, &self.latent))?;
        let candidates: Vec<Candidate> = pulled
            .into_iter()
            .zip(images)
            .map(|((prompt, modifier, param, constrained, embedding), image)| Candidate {
                prompt: prompt.0,
                modifier,
                c: param.c,
                clamped: param.clamped,
                constrained,
                embedding,
                image,
            })
            .collect();
        let embeddings: Vec<PromptEmbedding> =
            candidates.iter().map(|c| c.embedding.clone()).collect();
        let projection = project_neighborhood(&self.current, &embeddings)?;

        self.log.record_choices(step, &candidates);
        self.choices = Some(ChoiceSet {
            step,
            candidates,
            projection,
        });
        Ok(self.choices.as_ref().expect("just set"))
    }

    /// Draws the pool, keeps `k` diverse members and moves each to cosine
    /// `kappa` from the current embedding.
    fn pick_constrained(
        &self,
        gen: &Generator,
        stream: &mut RngStream,
    ) -> Result<Vec<(PromptText, PromptEmbedding, SlerpParam)>> {
        let (prompts, embeddings) = self.draw_pool(gen, stream)?;
        let chosen = select_diverse(&embeddings, self.config.k)?;
        chosen
            .into_iter()
            .map(|i| {
                let param = solve_slerp_param(&self.current, &embeddings[i], self.config.kappa)?;
                let constrained = slerp(&self.current, &embeddings[i], param.c)?;
                Ok((prompts[i].clone(), constrained, param))
            })
            .collect()
    }

    /// Moves `alpha` of the way toward candidate `index` and renders the
    /// result. The choice set is consumed.
    pub fn apply_choice(&mut self, gen: &Generator, index: usize, alpha: f64) -> Result<&ImageTensor> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("alpha", format!("{alpha} is outside [0, 1]")));
        }
        let step = self.step();
        let choices = match &self.choices {
            Some(c) if c.step == step => c,
            _ => return Err(Error::StaleChoices { step }),
        };
        if index >= choices.candidates.len() {
            return Err(Error::ChoiceIndex {
                index,
                k: choices.candidates.len(),
            });
        }
        let target = &choices.candidates[index].embedding;
        let next = slerp(&self.current, target, alpha)?;
        let image = gen.generate(&next, &self.latent)?;
        let choices = self.choices.take().expect("checked above");
        self.log.record_apply(step, index, alpha, &next);
        self.history.push(SessionStep {
            choice: index,
            alpha,
            candidates: choices.candidates,
            previous: std::mem::replace(&mut self.current, next.clone()),
            result: next,
        });
        self.image = image;
        Ok(&self.image)
    }

    /// Reverts the last applied step exactly.
    pub fn undo(&mut self, gen: &Generator) -> Result<&ImageTensor> {
        let last = self.history.pop().ok_or(Error::EmptyHistory)?;
        self.current = last.previous;
        self.image = gen.generate(&self.current, &self.latent)?;
        self.choices = None;
        self.log.record_undo(self.step(), &self.current);
        Ok(&self.image)
    }
}
