//! Stepwise act generation (intent, domain, slot, value) and the two-call
//! utterance realisation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, CompletionBackend, CompletionRequest, GENERATION_TEMPERATURE};
use crate::model::{validate_acts, DialogueAct, DialogueContext, Intent, RenderMode, UserGoal, ValidationReport, GENERAL_DOMAIN};
use crate::prompts::{CotStep, Feedback, PartialAct, PromptError, PromptForge, PromptText, RequirementSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenerationError {
    #[error("could not parse the {0} step output")]
    StepParseFailure(CotStep),
    #[error("generated acts failed validation: {report:?}")]
    InvalidActs { draft: Box<DraftActs>, report: ValidationReport },
    #[error("translation step returned no text")]
    EmptyTranslation,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: CotStep,
    /// Raw text of the accepted reply.
    pub text: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftActs {
    pub acts: Vec<DialogueAct>,
    pub step_transcript: Vec<StepOutput>,
    pub attempt_index: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub plain: String,
    pub enhanced: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self { temperature: GENERATION_TEMPERATURE, max_tokens: 256 }
    }
}

/// Splits a step reply into cleaned candidate tokens.
fn split_candidates(step: CotStep, text: &str) -> Vec<String> {
    let is_sep = |c: char| match step {
        CotStep::Value => matches!(c, '\n' | '|' | ';'),
        _ => matches!(c, '\n' | '|' | ';' | ','),
    };
    let mut tokens: Vec<String> = text.trim().split(is_sep).map(|t| clean_token(step, t)).collect();
    if step != CotStep::Value {
        tokens.retain(|t| !t.is_empty());
    }
    tokens
}

fn clean_token(step: CotStep, raw: &str) -> String {
    let mut t = raw.trim();
    if step != CotStep::Value {
        if let Some((_, rest)) = t.rsplit_once(':') {
            t = rest;
        }
    }
    let t = t.trim().trim_matches(|c: char| matches!(c, '\'' | '"' | '`' | '[' | ']' | '(' | ')'));
    let t = t.trim().trim_end_matches('.').trim();
    if step == CotStep::Value {
        t.to_string()
    } else {
        t.to_lowercase()
    }
}

/// Pairs candidates with threads: equal counts zip, one candidate is
/// broadcast, and a single thread forks once per candidate.
fn thread<T: Clone>(threads: Vec<T>, candidates: Vec<String>) -> Option<Vec<(T, String)>> {
    match (threads.len(), candidates.len()) {
        (_, 0) => None,
        (t, c) if t == c => Some(threads.into_iter().zip(candidates).collect()),
        (_, 1) => {
            let only = candidates.into_iter().next().expect("one candidate");
            Some(threads.into_iter().map(|t| (t, only.clone())).collect())
        }
        (1, _) => {
            let only = threads.into_iter().next().expect("one thread");
            Some(candidates.into_iter().map(|c| (only.clone(), c)).collect())
        }
        _ => None,
    }
}

fn is_wordish(s: &str) -> bool {
    s.chars().all(|c| c.is_alphanumeric() || matches!(c, ' ' | '_' | '-'))
}

#[derive(Clone)]
pub struct ActGenerator {
    backend: Arc<dyn CompletionBackend>,
    forge: Arc<PromptForge>,
    requirements: RequirementSet,
    settings: GeneratorSettings,
    session: Option<String>,
}

impl ActGenerator {
    pub fn new(backend: Arc<dyn CompletionBackend>, forge: Arc<PromptForge>, requirements: RequirementSet) -> Self {
        Self { backend, forge, requirements, settings: GeneratorSettings::default(), session: None }
    }

    pub fn with_settings(mut self, settings: GeneratorSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_session(mut self, session: Option<String>) -> Self {
        self.session = session;
        self
    }

    pub fn requirements(&self) -> &RequirementSet {
        &self.requirements
    }

    fn call(&self, prompt: PromptText) -> Result<String, BackendError> {
        let request = CompletionRequest::new(prompt.system_text, prompt.user_text)
            .temperature(self.settings.temperature)
            .max_tokens(self.settings.max_tokens)
            .session(self.session.clone());
        Ok(self.backend.complete(&request)?.text)
    }

    fn parse_step(&self, step: CotStep, text: &str, partial: &[PartialAct]) -> Option<Vec<PartialAct>> {
        let candidates = split_candidates(step, text);
        match step {
            CotStep::Intent => {
                let intents: Vec<Intent> = candidates.iter().map(|c| Intent::from_token(c)).collect();
                if intents.is_empty() || intents.iter().any(|i| !i.is_known()) {
                    return None;
                }
                Some(intents.into_iter().map(|i| PartialAct { intent: Some(i), ..Default::default() }).collect())
            }
            CotStep::Domain => {
                let known = |d: &str| d == GENERAL_DOMAIN || self.forge.ontology().domain(d).is_some();
                if candidates.iter().any(|c| !known(c)) {
                    return None;
                }
                let paired = thread(partial.to_vec(), candidates)?;
                Some(paired.into_iter().map(|(mut p, d)| {
                    p.domain = Some(d);
                    p
                }).collect())
            }
            CotStep::Slot => {
                let candidates = if candidates.is_empty() { vec![String::new()] } else { candidates };
                if candidates.iter().any(|c| !is_wordish(c)) {
                    return None;
                }
                let paired = thread(partial.to_vec(), candidates)?;
                Some(paired.into_iter().map(|(mut p, s)| {
                    p.slot = Some(if s == "none" { String::new() } else { s });
                    p
                }).collect())
            }
            CotStep::Value => unreachable!("values are assembled separately"),
        }
    }

    /// Runs one step with a single retry; `parse` decides acceptance.
    fn run_step<T>(
        &self,
        goal: &UserGoal,
        context: &DialogueContext,
        step: CotStep,
        partial: &[PartialAct],
        feedback: Option<&Feedback>,
        transcript: &mut Vec<StepOutput>,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, GenerationError> {
        let prompt = self.forge.generator_step_prompt(goal, context, &self.requirements, step, partial, feedback)?;
        for attempts in 1..=2 {
            let text = self.call(prompt.clone())?;
            if let Some(parsed) = parse(&text) {
                transcript.push(StepOutput { step, text, attempts });
                return Ok(parsed);
            }
        }
        Err(GenerationError::StepParseFailure(step))
    }

    /// Four sequential step completions assembled into validated acts.
    pub fn generate_acts(
        &self,
        goal: &UserGoal,
        context: &DialogueContext,
        feedback: Option<&Feedback>,
        attempt_index: u32,
    ) -> Result<DraftActs, GenerationError> {
        let mut transcript = Vec::new();
        let mut partial: Vec<PartialAct> = Vec::new();
        for step in [CotStep::Intent, CotStep::Domain, CotStep::Slot] {
            let prior = partial.clone();
            partial = self.run_step(goal, context, step, &prior, feedback, &mut transcript, |text| {
                self.parse_step(step, text, &prior)
            })?;
        }
        let acts = self.run_step(goal, context, CotStep::Value, &partial, feedback, &mut transcript, |text| {
            let mut values = split_candidates(CotStep::Value, text);
            while values.len() > partial.len() && values.last().is_some_and(String::is_empty) {
                values.pop();
            }
            thread(partial.clone(), values).map(|paired| paired.into_iter().map(|(p, v)| assemble(p, v)).collect::<Vec<_>>())
        })?;
        let draft = DraftActs { acts, step_transcript: transcript, attempt_index };
        let report = validate_acts(&draft.acts, self.forge.ontology());
        if report.is_valid() {
            Ok(draft)
        } else {
            Err(GenerationError::InvalidActs { draft: Box::new(draft), report })
        }
    }

    /// Translation, then conversational rewrite given the dialogue so far.
    pub fn realize_utterance(&self, acts: &[DialogueAct], context: &DialogueContext) -> Result<Utterance, GenerationError> {
        let plain = self.call(self.forge.act_to_utterance_prompt(acts)?)?;
        let plain = tidy(&plain);
        if plain.is_empty() {
            return Err(GenerationError::EmptyTranslation);
        }
        let conversation = context.render_as(RenderMode::Utterances);
        let enhanced = tidy(&self.call(self.forge.enhance_utterance_prompt(&conversation, &plain)?)?);
        let enhanced = if enhanced.is_empty() { plain.clone() } else { enhanced };
        Ok(Utterance { plain, enhanced })
    }
}

fn tidy(text: &str) -> String {
    let t = text.trim();
    let t = t.strip_prefix("CUSTOMER:").or_else(|| t.strip_prefix("USER:")).unwrap_or(t).trim();
    let unquoted = t.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(t);
    unquoted.trim().to_string()
}

fn assemble(p: PartialAct, value: String) -> DialogueAct {
    let intent = p.intent.unwrap_or(Intent::Unknown(String::new()));
    if intent.is_bare() {
        return DialogueAct::bare(intent);
    }
    let value = if intent == Intent::Request { "" } else { value.as_str() };
    DialogueAct::new(
        intent,
        p.domain.as_deref().unwrap_or(GENERAL_DOMAIN),
        p.slot.as_deref().unwrap_or_default(),
        value,
    )
}
