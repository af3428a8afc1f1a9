use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Candidate, FeedbackConfig, Session};
use crate::encode::PromptText;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::geometry::PromptEmbedding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub prompt: String,
    pub modifier: String,
    pub c: f64,
    pub clamped: bool,
    pub embedding: String,
}

/// One line of a session log. Embeddings are referenced by content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SessionEvent {
    Create {
        step: usize,
        id: String,
        prompt: String,
        seed: u64,
        config: FeedbackConfig,
        embedding: String,
    },
    Choices {
        step: usize,
        candidates: Vec<CandidateRecord>,
    },
    Apply {
        step: usize,
        choice: usize,
        alpha: f64,
        embedding: String,
    },
    Undo {
        step: usize,
        embedding: String,
    },
}

impl SessionEvent {
    fn name(&self) -> &'static str {
        match self {
            SessionEvent::Create { .. } => "create",
            SessionEvent::Choices { .. } => "choices",
            SessionEvent::Apply { .. } => "apply",
            SessionEvent::Undo { .. } => "undo",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    events: Vec<SessionEvent>,
    /// Every embedding referenced by an event, keyed by content hash.
    sidecars: BTreeMap<String, PromptEmbedding>,
}

impl SessionLog {
    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn sidecars(&self) -> &BTreeMap<String, PromptEmbedding> {
        &self.sidecars
    }

    fn keep(&mut self, e: &PromptEmbedding) -> String {
        let h = e.content_hash();
        self.sidecars.entry(h.clone()).or_insert_with(|| e.clone());
        h
    }

    pub(super) fn record_create(
        &mut self,
        id: &str,
        prompt: &PromptText,
        seed: u64,
        config: &FeedbackConfig,
        current: &PromptEmbedding,
    ) {
        let embedding = self.keep(current);
        self.events.push(SessionEvent::Create {
            step: 0,
            id: id.to_string(),
            prompt: prompt.as_str().to_string(),
            seed,
            config: config.clone(),
            embedding,
        });
    }

    pub(super) fn record_choices(&mut self, step: usize, candidates: &[Candidate]) {
        let candidates = candidates
            .iter()
            .map(|c| CandidateRecord {
                prompt: c.prompt.clone(),
                modifier: c.modifier.clone(),
                c: c.c,
                clamped: c.clamped,
                embedding: self.keep(&c.embedding),
            })
            .collect();
        self.events.push(SessionEvent::Choices { step, candidates });
    }

    pub(super) fn record_apply(&mut self, step: usize, choice: usize, alpha: f64, result: &PromptEmbedding) {
        let embedding = self.keep(result);
        self.events.push(SessionEvent::Apply {
            step,
            choice,
            alpha,
            embedding,
        });
    }

    pub(super) fn record_undo(&mut self, step: usize, result: &PromptEmbedding) {
        let embedding = self.keep(result);
        self.events.push(SessionEvent::Undo { step, embedding });
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses events only; sidecars are not needed for replay.
    pub fn parse_jsonl(text: &str) -> Result<Vec<SessionEvent>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

fn check(event: &SessionEvent, expected: &str, got: &PromptEmbedding) -> Result<()> {
    let h = got.content_hash();
    if h != expected {
        return Err(Error::Replay {
            event: event.name().to_string(),
            reason: format!("embedding hash {h} does not match logged {expected}"),
        });
    }
    Ok(())
}

/// Rebuilds a session by folding its events, checking every logged hash.
pub fn replay(gen: &Generator, events: &[SessionEvent]) -> Result<Session> {
    let (first, rest) = events.split_first().ok_or_else(|| Error::Replay {
        event: "create".into(),
        reason: "log is empty".into(),
    })?;
    let mut session = match first {
        SessionEvent::Create {
            id,
            prompt,
            seed,
            config,
            embedding,
            ..
        } => {
            let s = Session::create(gen, id.clone(), PromptText::new(prompt.clone()), *seed, config.clone())?;
            check(first, embedding, s.current())?;
            s
        }
        other => {
            return Err(Error::Replay {
                event: other.name().into(),
                reason: "log must start with a create event".into(),
            })
        }
    };
    for event in rest {
        let step = match event {
            SessionEvent::Create { .. } => {
                return Err(Error::Replay {
                    event: "create".into(),
                    reason: "duplicate create event".into(),
                })
            }
            SessionEvent::Choices { step, .. }
            | SessionEvent::Apply { step, .. } => *step,
            SessionEvent::Undo { step, .. } => step + 1,
        };
        if step != session.step() {
            return Err(Error::Replay {
                event: event.name().into(),
                reason: format!("logged step {step} but session is at {}", session.step()),
            });
        }
        match event {
            SessionEvent::Choices { candidates, .. } => {
                let set = session.generate_choices(gen)?;
                if set.candidates.len() != candidates.len() {
                    return Err(Error::Replay {
                        event: "choices".into(),
                        reason: format!(
                            "{} candidates regenerated, {} logged",
                            set.candidates.len(),
                            candidates.len()
                        ),
                    });
                }
                for (got, want) in set.candidates.iter().zip(candidates) {
                    check(event, &want.embedding, &got.embedding)?;
                }
            }
            SessionEvent::Apply {
                choice,
                alpha,
                embedding,
                ..
            } => {
                session.apply_choice(gen, *choice, *alpha)?;
                check(event, embedding, session.current())?;
            }
            SessionEvent::Undo { embedding, .. } => {
                session.undo(gen)?;
                check(event, embedding, session.current())?;
            }
            SessionEvent::Create { .. } => unreachable!(),
        }
    }
    Ok(session)
}
