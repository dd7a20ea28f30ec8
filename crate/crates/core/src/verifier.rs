//! Draft auditing: one verifier completion parsed into accept or reject.

use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, CompletionBackend, CompletionRequest, VERIFICATION_TEMPERATURE};
use crate::model::{DialogueAct, DialogueContext, UserGoal};
use crate::prompts::{Feedback, PromptForge, PromptText, RequirementSet};

/// Requirement id used when a rejection names no known requirement.
pub const UNSPECIFIED_ID: &str = "unspecified";

static ACCEPT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\baccept").unwrap());
static REJECT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\breject(?:ed)?\b").unwrap());
static ID_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[:\-]?\s*\[?([A-Za-z]+[0-9]+)\]?\s*[:\-.]?\s*").unwrap());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Feedback>,
    pub raw_text: String,
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        self.decision == Decision::Accept
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerificationError {
    #[error("verifier reply did not contain ACCEPT or REJECT: {0:?}")]
    UnparseableVerdict(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Keyword scan over a verifier reply. A reply containing both keywords is
/// a rejection.
pub fn parse_verdict(text: &str, requirements: &RequirementSet) -> Option<Verdict> {
    let raw_text = text.to_string();
    if let Some(m) = REJECT_RE.find(text) {
        let rest = &text[m.end()..];
        let (requirement_id, reason) = match ID_RE.captures(rest) {
            Some(c) => {
                let reason = rest[c.get(0).unwrap().end()..].trim().to_string();
                match requirements.canonical_id(&c[1]) {
                    Some(id) => (id.to_string(), reason),
                    None => (UNSPECIFIED_ID.to_string(), rest.trim().trim_start_matches(':').trim().to_string()),
                }
            }
            None => (UNSPECIFIED_ID.to_string(), rest.trim().trim_start_matches(':').trim().to_string()),
        };
        let explanation = if reason.is_empty() { text.trim().to_string() } else { reason };
        return Some(Verdict {
            decision: Decision::Reject,
            feedback: Some(Feedback { requirement_id, explanation }),
            raw_text,
        });
    }
    ACCEPT_RE.is_match(text).then_some(Verdict { decision: Decision::Accept, feedback: None, raw_text })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierOutcome {
    pub verdict: Option<Verdict>,
    pub calls: u32,
}

#[derive(Clone)]
pub struct Verifier {
    backend: Arc<dyn CompletionBackend>,
    forge: Arc<PromptForge>,
    requirements: RequirementSet,
    max_tokens: u32,
    session: Option<String>,
}

impl Verifier {
    pub fn new(backend: Arc<dyn CompletionBackend>, forge: Arc<PromptForge>, requirements: RequirementSet) -> Self {
        Self { backend, forge, requirements, max_tokens: 256, session: None }
    }

    pub fn with_session(mut self, session: Option<String>) -> Self {
        self.session = session;
        self
    }

    pub fn requirements(&self) -> &RequirementSet {
        &self.requirements
    }

    fn call(&self, prompt: &PromptText) -> Result<String, BackendError> {
        let request = CompletionRequest::new(prompt.system_text.clone(), prompt.user_text.clone())
            .temperature(VERIFICATION_TEMPERATURE)
            .max_tokens(self.max_tokens)
            .session(self.session.clone());
        Ok(self.backend.complete(&request)?.text)
    }

    /// One completion, plus one re-ask when the reply has no verdict keyword.
    pub fn verify(
        &self,
        goal: &UserGoal,
        context: &DialogueContext,
        draft: &[DialogueAct],
    ) -> Result<Verdict, VerificationError> {
        let prompt = self.forge.verifier_prompt(goal, context, &self.requirements, draft);
        let first = self.call(&prompt)?;
        if let Some(v) = parse_verdict(&first, &self.requirements) {
            return Ok(v);
        }
        let second = self.call(&self.forge.verifier_reask(&prompt))?;
        parse_verdict(&second, &self.requirements).ok_or(VerificationError::UnparseableVerdict(second))
    }
}
