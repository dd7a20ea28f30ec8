//! The generate/verify loop for one user turn, and dialogue orchestration
//! between any user simulator and any dialogue system.

use serde::{Deserialize, Serialize};

use crate::generator::{ActGenerator, DraftActs, GenerationError, Utterance};
use crate::model::{
    DialogueAct, DialogueContext, DialogueLog, DialogueTurn, Intent, RenderMode, Speaker, TerminationReason, UserGoal,
    Violation,
};
use crate::prompts::Feedback;
use crate::verifier::{Verdict, VerificationError, Verifier};

/// Requirement id attached to feedback synthesised from ontology violations.
pub const VALIDATION_FEEDBACK_ID: &str = "ontology";

pub const DEFAULT_MAX_USER_TURNS: usize = 20;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    #[default]
    UseLastDraft,
    AbortTurn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_iterations: u32,
    pub verifier_enabled: bool,
    pub on_exhaustion: ExhaustionPolicy,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { max_iterations: 3, verifier_enabled: true, on_exhaustion: ExhaustionPolicy::UseLastDraft }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        Ok(())
    }

    /// Iterations the loop actually runs.
    pub fn effective_iterations(&self) -> u32 {
        if self.verifier_enabled { self.max_iterations } else { 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub draft: DraftActs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl Iteration {
    /// Feedback this iteration passes to the next one.
    pub fn feedback(&self) -> Option<Feedback> {
        if !self.violations.is_empty() {
            let explanation = self
                .violations
                .iter()
                .map(|v| serde_json::to_string(v).unwrap_or_default())
                .collect::<Vec<_>>()
                .join("; ");
            return Some(Feedback { requirement_id: VALIDATION_FEEDBACK_ID.into(), explanation });
        }
        self.verdict.as_ref().and_then(|v| v.feedback.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub iterations: Vec<Iteration>,
    pub final_acts: Vec<DialogueAct>,
    pub iterations_used: u32,
    pub exhausted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance: Option<Utterance>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TurnError {
    #[error("all {iterations} drafts were rejected")]
    TurnAborted { iterations: u32 },
    #[error("no valid draft was produced in {iterations} iterations")]
    NoValidDraft { iterations: u32 },
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Turn(#[from] TurnError),
    #[error("simulator: {0}")]
    Simulator(String),
    #[error("system: {0}")]
    System(String),
}

/// What a user simulator produces for one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct UserAction {
    pub acts: Vec<DialogueAct>,
    pub utterance: String,
    pub trace: Option<TurnTrace>,
}

pub trait UserSimulator {
    fn goal(&self) -> &UserGoal;
    fn user_turn(&mut self, context: &DialogueContext) -> Result<UserAction, SimError>;
    /// Called with the system's acts after each system turn.
    fn observe(&mut self, _system_acts: &[DialogueAct]) {}
}

pub trait DialogueSystem {
    fn respond(&mut self, user_acts: &[DialogueAct]) -> Result<(Vec<DialogueAct>, String), SimError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueLimits {
    pub max_user_turns: usize,
    pub render_mode: RenderMode,
}

impl Default for DialogueLimits {
    fn default() -> Self {
        Self { max_user_turns: DEFAULT_MAX_USER_TURNS, render_mode: RenderMode::Utterances }
    }
}

/// Alternates user and system turns, user first, until the user says bye,
/// the turn cap is reached, or either side fails.
pub fn run_dialogue(
    seed: u64,
    user: &mut dyn UserSimulator,
    system: &mut dyn DialogueSystem,
    limits: DialogueLimits,
) -> DialogueLog {
    let goal = user.goal().clone();
    let mut context = DialogueContext::new(limits.render_mode);
    let push = |context: &mut DialogueContext, speaker, acts, utterance, trace| {
        let turn_index = context.turns.len();
        context.turns.push(DialogueTurn { turn_index, speaker, acts, utterance, trace });
    };
    let fail = |context: DialogueContext, err: SimError| {
        let mut log = DialogueLog::new(seed, goal.clone(), context.turns, TerminationReason::Error);
        log.error = Some(err.to_string());
        log
    };

    let mut reason = TerminationReason::TurnCap;
    for _ in 0..limits.max_user_turns {
        let action = match user.user_turn(&context) {
            Ok(a) => a,
            Err(e) => return fail(context, e),
        };
        let said_bye = action.acts.iter().any(|a| a.intent == Intent::Bye);
        let user_acts = action.acts.clone();
        push(&mut context, Speaker::User, action.acts, action.utterance, action.trace);
        let (acts, utterance) = match system.respond(&user_acts) {
            Ok(r) => r,
            Err(e) => return fail(context, e),
        };
        user.observe(&acts);
        push(&mut context, Speaker::System, acts, utterance, None);
        if said_bye {
            reason = TerminationReason::UserBye;
            break;
        }
    }
    DialogueLog::new(seed, goal, context.turns, reason)
}

/// The two-model user simulator: a stepwise generator checked by a verifier.
pub struct DualModelSimulator {
    goal: UserGoal,
    generator: ActGenerator,
    verifier: Option<Verifier>,
    config: LoopConfig,
}

impl DualModelSimulator {
    /// `verifier` is ignored when the config disables verification.
    pub fn new(goal: UserGoal, generator: ActGenerator, verifier: Option<Verifier>, config: LoopConfig) -> Self {
        let verifier = if config.verifier_enabled { verifier } else { None };
        Self { goal, generator, verifier, config }
    }

    /// Runs the generate/verify loop, then realises the utterance from the
    /// final acts.
    pub fn next_user_turn(&self, context: &DialogueContext) -> Result<TurnTrace, TurnError> {
        let max = match &self.verifier {
            Some(_) => self.config.max_iterations.max(1),
            None => 1,
        };
        let mut iterations: Vec<Iteration> = Vec::new();
        let mut accepted = None;
        let mut last_valid: Option<Vec<DialogueAct>> = None;
        for i in 1..=max {
            let feedback = iterations.last().and_then(Iteration::feedback);
            let iteration = match self.generator.generate_acts(&self.goal, context, feedback.as_ref(), i) {
                Ok(draft) => {
                    let verdict = match &self.verifier {
                        Some(v) => Some(v.verify(&self.goal, context, &draft.acts)?),
                        None => None,
                    };
                    last_valid = Some(draft.acts.clone());
                    if verdict.as_ref().is_none_or(Verdict::accepted) {
                        accepted = Some(draft.acts.clone());
                    }
                    Iteration { draft, verdict, violations: Vec::new() }
                }
                Err(GenerationError::InvalidActs { draft, report }) if self.verifier.is_some() => {
                    Iteration { draft: *draft, verdict: None, violations: report.violations }
                }
                Err(e) => return Err(e.into()),
            };
            iterations.push(iteration);
            if accepted.is_some() {
                break;
            }
        }
        let iterations_used = iterations.len() as u32;
        let exhausted = accepted.is_none();
        let final_acts = match (accepted, self.config.on_exhaustion) {
            (Some(acts), _) => acts,
            (None, ExhaustionPolicy::AbortTurn) => return Err(TurnError::TurnAborted { iterations: iterations_used }),
            (None, ExhaustionPolicy::UseLastDraft) => {
                last_valid.ok_or(TurnError::NoValidDraft { iterations: iterations_used })?
            }
        };
        let utterance = self.generator.realize_utterance(&final_acts, context)?;
        Ok(TurnTrace { iterations, final_acts, iterations_used, exhausted, utterance: Some(utterance) })
    }
}

impl UserSimulator for DualModelSimulator {
    fn goal(&self) -> &UserGoal {
        &self.goal
    }

    fn user_turn(&mut self, context: &DialogueContext) -> Result<UserAction, SimError> {
        let trace = self.next_user_turn(context)?;
        let utterance = trace.utterance.as_ref().map(|u| u.enhanced.clone()).unwrap_or_default();
        Ok(UserAction { acts: trace.final_acts.clone(), utterance, trace: Some(trace) })
    }
}
