//! Prompt construction for the generator, the verifier and the two-step
//! utterance realisation, plus the requirement lists both models work from.
//!
//! Prompts are assembled from named sections of an editable template file
//! (see `templates/prompts.txt`). Each template is linted at load: it may use
//! only its declared placeholders and must use all of them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{render_acts_unchecked, DialogueAct, DialogueContext, Intent, UserGoal, GENERAL_DOMAIN};
use crate::world::Ontology;

const BUNDLED_TEMPLATES: &str = include_str!("../templates/prompts.txt");

/// Rendered in place of an empty dialogue history.
pub const EMPTY_CONTEXT: &str = "(no prior turns)";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("template {template:?}: {message}")]
    Lint { template: String, message: String },
    #[error("template file: {0}")]
    TemplateFile(String),
    #[error("{step} step needs the output of the {missing} step")]
    MissingPriorStep { step: CotStep, missing: CotStep },
    #[error("the intent step takes no prior outputs")]
    UnexpectedPartial,
    #[error("cannot build a prompt for an empty act list")]
    EmptyActList,
    #[error("cannot rewrite an empty utterance")]
    EmptyUtterance,
    #[error("requirement set: {0}")]
    Requirements(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Var(String),
}

/// A text template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    segments: Vec<Segment>,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self, String> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut chars = source.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    text.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    text.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(ch) if ch.is_ascii_alphanumeric() || ch == '_' => name.push(ch),
                            _ => return Err(format!("unterminated or invalid placeholder after {{{name}")),
                        }
                    }
                    if name.is_empty() {
                        return Err("empty placeholder {}".into());
                    }
                    if !text.is_empty() {
                        segments.push(Segment::Text(std::mem::take(&mut text)));
                    }
                    segments.push(Segment::Var(name));
                }
                '}' => return Err("unmatched }".into()),
                _ => text.push(c),
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(Self { segments })
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Var(v) => Some(v.as_str()),
                Segment::Text(_) => None,
            })
            .collect()
    }

    /// Substitutes placeholders; linting guarantees every one has a value.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Var(v) => {
                    let value = vars.iter().find(|(k, _)| k == v).map(|(_, val)| *val).unwrap_or_default();
                    out.push_str(value);
                }
            }
        }
        out
    }
}

/// Every template the forge needs and the placeholders each must use.
const TEMPLATE_SPECS: &[(&str, &[&str])] = &[
    ("generator.system", &[]),
    ("generator.goal", &["goal"]),
    ("generator.context", &["context"]),
    ("generator.requirements", &["requirements"]),
    ("generator.partial", &["partial"]),
    ("generator.step.intent", &["options"]),
    ("generator.step.domain", &["options"]),
    ("generator.step.slot", &["options"]),
    ("generator.step.value", &["options"]),
    ("generator.feedback", &["requirement_id", "explanation"]),
    ("verifier.system", &[]),
    ("verifier.requirements", &["requirements"]),
    ("verifier.goal", &["goal"]),
    ("verifier.context", &["context"]),
    ("verifier.draft", &["draft"]),
    ("verifier.format", &[]),
    ("verifier.reask", &[]),
    ("nlg.system", &[]),
    ("nlg.translate", &["acts"]),
    ("nlg.enhance", &["conversation", "utterance"]),
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
    digest: String,
}

impl TemplateSet {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TEMPLATES).expect("bundled templates lint clean")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PromptError::TemplateFile(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut raw: BTreeMap<String, String> = BTreeMap::new();
        let mut current: Option<String> = None;
        for line in source.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix("===").and_then(|r| r.strip_suffix("===")) {
                let name = name.trim().to_string();
                if raw.contains_key(&name) {
                    return Err(PromptError::TemplateFile(format!("duplicate section {name:?}")));
                }
                raw.insert(name.clone(), String::new());
                current = Some(name);
            } else if let Some(name) = &current {
                let body = raw.get_mut(name).expect("section exists");
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut templates = BTreeMap::new();
        for (name, required) in TEMPLATE_SPECS {
            let lint = |message: String| PromptError::Lint { template: name.to_string(), message };
            let body = raw.remove(*name).ok_or_else(|| lint("section missing".into()))?;
            let template = Template::parse(body.trim()).map_err(lint)?;
            let used = template.placeholders();
            let required: BTreeSet<&str> = required.iter().copied().collect();
            if let Some(missing) = required.difference(&used).next() {
                return Err(lint(format!("placeholder {{{missing}}} not used")));
            }
            if let Some(unknown) = used.difference(&required).next() {
                return Err(lint(format!("unknown placeholder {{{unknown}}}")));
            }
            templates.insert(name.to_string(), template);
        }
        if let Some(extra) = raw.keys().next() {
            return Err(PromptError::Lint { template: extra.clone(), message: "unknown section".into() });
        }
        let digest = hex::encode(Sha256::digest(source.as_bytes()));
        Ok(Self { templates, digest })
    }

    /// SHA-256 of the template source, recorded in run manifests.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn get(&self, name: &str) -> &Template {
        &self.templates[name]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementKind {
    Generator,
    Verifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirement {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementSet {
    pub kind: RequirementKind,
    pub items: Vec<Requirement>,
}

impl RequirementSet {
    pub fn new(kind: RequirementKind, items: Vec<Requirement>) -> Result<Self, PromptError> {
        if items.is_empty() {
            return Err(PromptError::Requirements("requirement set is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &items {
            if r.id.trim().is_empty() || !seen.insert(r.id.as_str()) {
                return Err(PromptError::Requirements(format!("bad or duplicate id {:?}", r.id)));
            }
        }
        Ok(Self { kind, items })
    }

    fn from_pairs(kind: RequirementKind, pairs: &[(&str, &str)]) -> Self {
        let items = pairs.iter().map(|(id, text)| Requirement { id: id.to_string(), text: text.to_string() }).collect();
        Self::new(kind, items).expect("default requirements are well-formed")
    }

    pub fn default_generator() -> Self {
        Self::from_pairs(
            RequirementKind::Generator,
            &[
                ("G1", "Stay consistent with the user goal."),
                ("G2", "Produce one coherent set of dialogue acts per turn."),
                ("G3", "Do not request information the system has already provided."),
                ("G4", "Inform your constraints before requesting information."),
                ("G5", "End the dialogue with bye once every part of the goal is complete."),
                ("G6", "Output only the requested act components, with no extra words."),
            ],
        )
    }

    pub fn default_verifier() -> Self {
        Self::from_pairs(
            RequirementKind::Verifier,
            &[
                ("R1", "Every act is a well-formed (intent, domain, slot, value) quadruple."),
                ("R2", "Every domain and slot exists in the task ontology."),
                ("R3", "The acts do not contradict the goal or the dialogue context."),
                ("R4", "The acts do not say bye before the goal is complete."),
                ("R5", "The acts contain no meaningless or invented words."),
            ],
        )
    }

    /// Generator items followed by verifier items, for runs without a verifier.
    pub fn merged(generator: &RequirementSet, verifier: &RequirementSet) -> Self {
        let mut items = generator.items.clone();
        for r in &verifier.items {
            if !items.iter().any(|g| g.id == r.id) {
                items.push(r.clone());
            }
        }
        Self { kind: RequirementKind::Generator, items }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.items.iter().any(|r| r.id.eq_ignore_ascii_case(id))
    }

    pub fn canonical_id(&self, id: &str) -> Option<&str> {
        self.items.iter().find(|r| r.id.eq_ignore_ascii_case(id)).map(|r| r.id.as_str())
    }

    fn render(&self) -> String {
        self.items.iter().map(|r| format!("[{}] {}", r.id, r.text)).collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub system_text: String,
    pub user_text: String,
    pub chars: usize,
}

impl PromptText {
    fn new(system_text: String, user_text: String) -> Self {
        let chars = system_text.chars().count() + user_text.chars().count();
        Self { system_text, user_text, chars }
    }
}

/// Verifier feedback threaded into the next generation attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub requirement_id: String,
    pub explanation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotStep {
    Intent,
    Domain,
    Slot,
    Value,
}

impl CotStep {
    pub const ORDER: [CotStep; 4] = [CotStep::Intent, CotStep::Domain, CotStep::Slot, CotStep::Value];

    fn template(self) -> &'static str {
        match self {
            CotStep::Intent => "generator.step.intent",
            CotStep::Domain => "generator.step.domain",
            CotStep::Slot => "generator.step.slot",
            CotStep::Value => "generator.step.value",
        }
    }
}

impl fmt::Display for CotStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CotStep::Intent => "intent",
            CotStep::Domain => "domain",
            CotStep::Slot => "slot",
            CotStep::Value => "value",
        })
    }
}

/// One act under construction; fields fill in step order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialAct {
    pub intent: Option<Intent>,
    pub domain: Option<String>,
    pub slot: Option<String>,
}

impl PartialAct {
    fn has(&self, step: CotStep) -> bool {
        match step {
            CotStep::Intent => self.intent.is_some(),
            CotStep::Domain => self.domain.is_some(),
            CotStep::Slot => self.slot.is_some(),
            CotStep::Value => false,
        }
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(i) = &self.intent {
            parts.push(format!("intent={i}"));
        }
        if let Some(d) = &self.domain {
            parts.push(format!("domain={d}"));
        }
        if let Some(s) = &self.slot {
            parts.push(format!("slot={}", if s.is_empty() { "none" } else { s }));
        }
        parts.join(", ")
    }
}

/// Prompt ablations: each flag drops exactly one section.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub omit_goal: bool,
    pub omit_history: bool,
}

/// Intents offered to the generator at the intent step.
const USER_INTENTS: [Intent; 6] = [Intent::Inform, Intent::Request, Intent::Book, Intent::Greet, Intent::Thank, Intent::Bye];

pub struct PromptForge {
    templates: TemplateSet,
    ontology: Arc<Ontology>,
    ablation: Ablation,
}

impl PromptForge {
    pub fn new(templates: TemplateSet, ontology: Arc<Ontology>) -> Self {
        Self { templates, ontology, ablation: Ablation::default() }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn ontology(&self) -> &Ontology {
        &self.ontology
    }

    fn section(&self, name: &str, vars: &[(&str, &str)]) -> String {
        self.templates.get(name).render(vars).trim_end().to_string()
    }

    fn context_text(context: &DialogueContext) -> String {
        if context.is_empty() {
            EMPTY_CONTEXT.to_string()
        } else {
            context.render()
        }
    }

    pub fn generator_step_prompt(
        &self,
        goal: &UserGoal,
        context: &DialogueContext,
        requirements: &RequirementSet,
        step: CotStep,
        partial: &[PartialAct],
        feedback: Option<&Feedback>,
    ) -> Result<PromptText, PromptError> {
        match step {
            CotStep::Intent if !partial.is_empty() => return Err(PromptError::UnexpectedPartial),
            CotStep::Intent => {}
            _ => {
                for prior in CotStep::ORDER.iter().copied().take_while(|s| *s < step) {
                    if partial.is_empty() || partial.iter().any(|p| !p.has(prior)) {
                        return Err(PromptError::MissingPriorStep { step, missing: prior });
                    }
                }
            }
        }

        let mut sections = Vec::new();
        if !self.ablation.omit_goal {
            sections.push(self.section("generator.goal", &[("goal", &describe_goal(goal))]));
        }
        if !self.ablation.omit_history {
            sections.push(self.section("generator.context", &[("context", &Self::context_text(context))]));
        }
        sections.push(self.section("generator.requirements", &[("requirements", &requirements.render())]));
        if !partial.is_empty() {
            let lines: Vec<String> =
                partial.iter().enumerate().map(|(i, p)| format!("act {}: {}", i + 1, p.describe())).collect();
            sections.push(self.section("generator.partial", &[("partial", &lines.join("\n"))]));
        }
        sections.push(self.section(step.template(), &[("options", &self.step_options(step, partial))]));
        if let Some(fb) = feedback {
            sections.push(self.section(
                "generator.feedback",
                &[("requirement_id", &fb.requirement_id), ("explanation", &fb.explanation)],
            ));
        }
        Ok(PromptText::new(self.section("generator.system", &[]), sections.join("\n\n")))
    }

    fn step_options(&self, step: CotStep, partial: &[PartialAct]) -> String {
        match step {
            CotStep::Intent => USER_INTENTS.iter().map(Intent::as_str).collect::<Vec<_>>().join(", "),
            CotStep::Domain => {
                let mut d: Vec<&str> = self.ontology.domain_names().collect();
                d.push(GENERAL_DOMAIN);
                d.join(", ")
            }
            CotStep::Slot => {
                let per_act: Vec<String> = partial
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let domain = p.domain.as_deref().unwrap_or_default();
                        let slots = match self.ontology.domain(domain) {
                            Some(schema) => {
                                let mut s: BTreeSet<&str> = schema.informable.keys().map(String::as_str).collect();
                                s.extend(schema.requestable.iter().map(String::as_str));
                                s.extend(schema.bookable.keys().map(String::as_str));
                                s.into_iter().collect::<Vec<_>>().join(", ")
                            }
                            None => "none".to_string(),
                        };
                        format!("act {}: {slots}", i + 1)
                    })
                    .collect();
                per_act.join("; ")
            }
            CotStep::Value => {
                let per_act: Vec<String> = partial
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let domain = p.domain.as_deref().unwrap_or_default();
                        let slot = p.slot.as_deref().unwrap_or_default();
                        let values = self
                            .ontology
                            .domain(domain)
                            .and_then(|s| s.informable.get(slot).or_else(|| s.bookable.get(slot)))
                            .filter(|_| p.intent != Some(Intent::Request));
                        match values {
                            Some(v) => format!("act {}: {}", i + 1, v.join(", ")),
                            None => format!("act {}: (empty)", i + 1),
                        }
                    })
                    .collect();
                per_act.join("; ")
            }
        }
    }

    pub fn verifier_prompt(
        &self,
        goal: &UserGoal,
        context: &DialogueContext,
        requirements: &RequirementSet,
        draft_acts: &[DialogueAct],
    ) -> PromptText {
        let mut sections = vec![self.section("verifier.requirements", &[("requirements", &requirements.render())])];
        if !self.ablation.omit_goal {
            sections.push(self.section("verifier.goal", &[("goal", &describe_goal(goal))]));
        }
        if !self.ablation.omit_history {
            sections.push(self.section("verifier.context", &[("context", &Self::context_text(context))]));
        }
        sections.push(self.section("verifier.draft", &[("draft", &render_acts_unchecked(draft_acts))]));
        sections.push(self.section("verifier.format", &[]));
        PromptText::new(self.section("verifier.system", &[]), sections.join("\n\n"))
    }

    /// The verifier prompt with a format reminder appended.
    pub fn verifier_reask(&self, original: &PromptText) -> PromptText {
        PromptText::new(
            original.system_text.clone(),
            format!("{}\n\n{}", original.user_text, self.section("verifier.reask", &[])),
        )
    }

    pub fn act_to_utterance_prompt(&self, acts: &[DialogueAct]) -> Result<PromptText, PromptError> {
        if acts.is_empty() {
            return Err(PromptError::EmptyActList);
        }
        Ok(PromptText::new(
            self.section("nlg.system", &[]),
            self.section("nlg.translate", &[("acts", &render_acts_unchecked(acts))]),
        ))
    }

    pub fn enhance_utterance_prompt(&self, conversation: &str, utterance: &str) -> Result<PromptText, PromptError> {
        if utterance.trim().is_empty() {
            return Err(PromptError::EmptyUtterance);
        }
        Ok(PromptText::new(
            self.section("nlg.system", &[]),
            self.section("nlg.enhance", &[("conversation", conversation), ("utterance", utterance)]),
        ))
    }
}

fn slot_phrase(slot: &str) -> &str {
    match slot {
        "phone" => "phone number",
        "pricerange" => "price range",
        "stars" => "star rating",
        "parking" => "whether they have free parking",
        "internet" => "whether they have free wifi",
        other => other,
    }
}

fn join_list(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => (*one).to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn constraint_sentence(domain: &str, slot: &str, value: &str) -> String {
    match (slot, value) {
        ("food", v) => format!("The {domain} should serve {v} food."),
        ("area", v) => format!("The {domain} should be in the {v}."),
        ("pricerange", v) => format!("The {domain} should be in the {v} price range."),
        ("type", v) => format!("The {domain} should be a {v}."),
        ("stars", v) => format!("The {domain} should have a star rating of {v}."),
        ("parking", "yes") => format!("The {domain} should include free parking."),
        ("parking", _) => format!("The {domain} does not need to have free parking."),
        ("internet", "yes") => format!("The {domain} should include free wifi."),
        ("internet", _) => format!("The {domain} does not need to include free wifi."),
        (s, v) => format!("The {domain} should have {s} {v}."),
    }
}

/// Imperative natural-language rendering of a goal, one paragraph per domain.
pub fn describe_goal(goal: &UserGoal) -> String {
    let mut paragraphs = Vec::new();
    for (domain, d) in &goal.domains {
        let mut s: Vec<String> = Vec::new();
        s.push(match domain.as_str() {
            "restaurant" => "You are looking forward to trying local restaurants.".to_string(),
            "hotel" => "You are planning your trip and need a place to stay.".to_string(),
            other => format!("You need a {other}."),
        });
        match d.info.get("name") {
            Some(name) => s.push(format!("You are looking for a particular {domain}. Its name is called {name}.")),
            None => s.push(format!("You are looking for a {domain}.")),
        }
        for (slot, value) in d.info.iter().filter(|(k, _)| *k != "name") {
            s.push(constraint_sentence(domain, slot, value));
        }
        if let Some(book) = &d.book {
            let get = |k: &str| book.get(k).map(String::as_str).unwrap_or("?");
            s.push(match domain.as_str() {
                "restaurant" => format!(
                    "Once you find the restaurant you want to book a table for {} people at {} on {}.",
                    get("people"),
                    get("book time"),
                    get("book day")
                ),
                "hotel" => format!(
                    "Once you find the hotel you want to book it for {} people and {} nights starting from {}.",
                    get("people"),
                    get("book stay"),
                    get("book day")
                ),
                _ => {
                    let parts: Vec<String> = book.iter().map(|(k, v)| format!("{k} {v}")).collect();
                    format!("You want to make a booking with {}.", parts.join(", "))
                }
            });
        }
        let asks: Vec<&str> = d.reqt.iter().filter(|r| *r != "food").map(|r| slot_phrase(r)).collect();
        if !asks.is_empty() {
            s.push(format!("Once you find a {domain}, make sure you get {}.", join_list(&asks)));
        }
        if d.reqt.iter().any(|r| r == "food") {
            s.push("Make sure to ask about what food it serves.".to_string());
        }
        paragraphs.push(s.join(" "));
    }
    paragraphs.join("\n")
}
