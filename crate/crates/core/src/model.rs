//! Shared dialogue types: acts, goals, turns, contexts and session logs.

use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::duet::TurnTrace;
use crate::world::Ontology;

/// Domain label for acts that are not tied to a task domain.
pub const GENERAL_DOMAIN: &str = "general";

/// Reserved slot carrying a booking reference code.
pub const REF_SLOT: &str = "ref";

/// Closed intent vocabulary. Tokens outside it are kept as [`Intent::Unknown`]
/// so that parsing never fails on model drift; validation reports them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Intent {
    Inform,
    Request,
    Book,
    OfferBook,
    OfferBooked,
    NoOffer,
    NoBook,
    Recommend,
    Select,
    Greet,
    Bye,
    Thank,
    ReqMore,
    Unknown(String),
}

impl Intent {
    pub const ALL: [Intent; 13] = [
        Intent::Inform,
        Intent::Request,
        Intent::Book,
        Intent::OfferBook,
        Intent::OfferBooked,
        Intent::NoOffer,
        Intent::NoBook,
        Intent::Recommend,
        Intent::Select,
        Intent::Greet,
        Intent::Bye,
        Intent::Thank,
        Intent::ReqMore,
    ];

    pub fn from_token(token: &str) -> Self {
        let t = token.trim().to_lowercase();
        match t.as_str() {
            "inform" => Intent::Inform,
            "request" => Intent::Request,
            "book" => Intent::Book,
            "offer_book" => Intent::OfferBook,
            "offer_booked" => Intent::OfferBooked,
            "nooffer" => Intent::NoOffer,
            "nobook" => Intent::NoBook,
            "recommend" => Intent::Recommend,
            "select" => Intent::Select,
            "greet" => Intent::Greet,
            "bye" => Intent::Bye,
            "thank" => Intent::Thank,
            "reqmore" => Intent::ReqMore,
            _ => Intent::Unknown(t),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Intent::Inform => "inform",
            Intent::Request => "request",
            Intent::Book => "book",
            Intent::OfferBook => "offer_book",
            Intent::OfferBooked => "offer_booked",
            Intent::NoOffer => "nooffer",
            Intent::NoBook => "nobook",
            Intent::Recommend => "recommend",
            Intent::Select => "select",
            Intent::Greet => "greet",
            Intent::Bye => "bye",
            Intent::Thank => "thank",
            Intent::ReqMore => "reqmore",
            Intent::Unknown(s) => s,
        }
    }

    pub fn is_known(&self) -> bool {
        !matches!(self, Intent::Unknown(_))
    }

    /// Greet, bye and thank carry neither slot nor value.
    pub fn is_bare(&self) -> bool {
        matches!(self, Intent::Greet | Intent::Bye | Intent::Thank)
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Intent {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Intent {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Intent::from_token(&s))
    }
}

/// One `(intent, domain, slot, value)` quadruple.
///
/// Intent, domain and slot are normalised to trimmed lowercase on
/// construction. The value is trimmed but otherwise kept verbatim; equality
/// and hashing compare it case-insensitively.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "RawAct", into = "RawAct")]
pub struct DialogueAct {
    pub intent: Intent,
    pub domain: String,
    pub slot: String,
    pub value: String,
}

#[derive(Serialize, Deserialize)]
struct RawAct(String, String, String, String);

impl From<RawAct> for DialogueAct {
    fn from(r: RawAct) -> Self {
        DialogueAct::new(Intent::from_token(&r.0), &r.1, &r.2, &r.3)
    }
}

impl From<DialogueAct> for RawAct {
    fn from(a: DialogueAct) -> Self {
        RawAct(a.intent.as_str().to_string(), a.domain, a.slot, a.value)
    }
}

impl DialogueAct {
    pub fn new(intent: Intent, domain: &str, slot: &str, value: &str) -> Self {
        Self {
            intent,
            domain: domain.trim().to_lowercase(),
            slot: slot.trim().to_lowercase(),
            value: value.trim().to_string(),
        }
    }

    pub fn from_tokens(intent: &str, domain: &str, slot: &str, value: &str) -> Self {
        Self::new(Intent::from_token(intent), domain, slot, value)
    }

    pub fn bare(intent: Intent) -> Self {
        Self::new(intent, GENERAL_DOMAIN, "", "")
    }

    pub fn inform(domain: &str, slot: &str, value: &str) -> Self {
        Self::new(Intent::Inform, domain, slot, value)
    }

    pub fn request(domain: &str, slot: &str) -> Self {
        Self::new(Intent::Request, domain, slot, "")
    }

    /// Same act moved to another domain, for slotless domain acts such as
    /// `nooffer`.
    pub fn in_domain(mut self, domain: &str) -> Self {
        self.domain = domain.trim().to_lowercase();
        self
    }

    pub fn value_matches(&self, other: &str) -> bool {
        self.value.eq_ignore_ascii_case(other.trim())
    }
}

impl PartialEq for DialogueAct {
    fn eq(&self, other: &Self) -> bool {
        self.intent == other.intent
            && self.domain == other.domain
            && self.slot == other.slot
            && self.value.to_lowercase() == other.value.to_lowercase()
    }
}

impl Eq for DialogueAct {}

impl Hash for DialogueAct {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.intent.hash(state);
        self.domain.hash(state);
        self.slot.hash(state);
        self.value.to_lowercase().hash(state);
    }
}

impl fmt::Display for DialogueAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.intent, self.domain, self.slot, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("no bracketed act list found in text")]
    NoActFound,
    #[error("act #{index} has {found} components, expected 4")]
    MalformedAct { index: usize, found: usize },
    #[error("cannot render an empty act list")]
    EmptyActList,
}

/// Render acts in the canonical `[['intent', 'domain', 'slot', 'value']]` form.
pub fn render_act_list(acts: &[DialogueAct]) -> Result<String, CodecError> {
    if acts.is_empty() {
        return Err(CodecError::EmptyActList);
    }
    Ok(render_acts_unchecked(acts))
}

pub(crate) fn render_acts_unchecked(acts: &[DialogueAct]) -> String {
    let items: Vec<String> = acts
        .iter()
        .map(|a| {
            format!(
                "[{}, {}, {}, {}]",
                quote(a.intent.as_str()),
                quote(&a.domain),
                quote(&a.slot),
                quote(&a.value)
            )
        })
        .collect();
    format!("[{}]", items.join(", "))
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('\'');
    for c in s.chars() {
        if c == '\'' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('\'');
    out
}

/// Extract the first well-formed list of quadruples from arbitrary text.
pub fn parse_act_list(text: &str) -> Result<Vec<DialogueAct>, CodecError> {
    let chars: Vec<char> = text.chars().collect();
    for start in 0..chars.len() {
        if chars[start] != '[' {
            continue;
        }
        let mut p = QuadParser { chars: &chars, pos: start };
        if let Some(lists) = p.outer_list() {
            for (index, comps) in lists.iter().enumerate() {
                if comps.len() != 4 {
                    return Err(CodecError::MalformedAct { index, found: comps.len() });
                }
            }
            return Ok(lists
                .into_iter()
                .map(|c| DialogueAct::from_tokens(&c[0], &c[1], &c[2], &c[3]))
                .collect());
        }
    }
    Err(CodecError::NoActFound)
}

struct QuadParser<'a> {
    chars: &'a [char],
    pos: usize,
}

impl QuadParser<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    /// `[ inner (, inner)* ,? ]` with at least one inner list.
    fn outer_list(&mut self) -> Option<Vec<Vec<String>>> {
        if !self.eat('[') {
            return None;
        }
        let mut lists = vec![self.inner_list()?];
        loop {
            if self.eat(']') {
                return Some(lists);
            }
            if !self.eat(',') {
                return None;
            }
            if self.eat(']') {
                return Some(lists);
            }
            lists.push(self.inner_list()?);
        }
    }

    /// `[ str (, str)* ,? ]`, possibly empty.
    fn inner_list(&mut self) -> Option<Vec<String>> {
        if !self.eat('[') {
            return None;
        }
        let mut items = Vec::new();
        if self.eat(']') {
            return Some(items);
        }
        items.push(self.string()?);
        loop {
            if self.eat(']') {
                return Some(items);
            }
            if !self.eat(',') {
                return None;
            }
            if self.eat(']') {
                return Some(items);
            }
            items.push(self.string()?);
        }
    }

    fn string(&mut self) -> Option<String> {
        self.skip_ws();
        let q = self.peek()?;
        if q != '\'' && q != '"' {
            return None;
        }
        self.pos += 1;
        let mut out = String::new();
        loop {
            let c = self.peek()?;
            self.pos += 1;
            if c == '\\' {
                out.push(self.peek()?);
                self.pos += 1;
            } else if c == q {
                return Some(out);
            } else {
                out.push(c);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    UnknownIntent { index: usize, intent: String },
    UnknownDomain { index: usize, domain: String },
    UnknownSlot { index: usize, domain: String, slot: String },
    ValueOnRequest { index: usize, value: String },
    UnexpectedArguments { index: usize, intent: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_acts(acts: &[DialogueAct], ontology: &Ontology) -> ValidationReport {
    let mut violations = Vec::new();
    for (index, act) in acts.iter().enumerate() {
        if !act.intent.is_known() {
            violations.push(Violation::UnknownIntent { index, intent: act.intent.to_string() });
        }
        if act.intent.is_bare() && !(act.slot.is_empty() && act.value.is_empty()) {
            violations.push(Violation::UnexpectedArguments { index, intent: act.intent.to_string() });
        }
        if act.intent == Intent::Request && !act.value.is_empty() {
            violations.push(Violation::ValueOnRequest { index, value: act.value.clone() });
        }
        if act.domain == GENERAL_DOMAIN {
            continue;
        }
        match ontology.domain(&act.domain) {
            None => violations.push(Violation::UnknownDomain { index, domain: act.domain.clone() }),
            Some(schema) => {
                if !act.slot.is_empty() && !schema.has_slot(&act.slot) {
                    violations.push(Violation::UnknownSlot {
                        index,
                        domain: act.domain.clone(),
                        slot: act.slot.clone(),
                    });
                }
            }
        }
    }
    ValidationReport { violations }
}

/// Per-domain section of a user goal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    /// Constraints the user informs.
    pub info: BTreeMap<String, String>,
    /// Slots the user must obtain values for.
    pub reqt: Vec<String>,
    /// Booking constraints, absent when the user does not book.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub book: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    pub domains: BTreeMap<String, DomainGoal>,
}

impl UserGoal {
    pub fn domain(&self, name: &str) -> Option<&DomainGoal> {
        self.domains.get(name)
    }

    pub fn has_booking(&self) -> bool {
        self.domains.values().any(|d| d.book.is_some())
    }

    /// Checks the structural invariants against an ontology.
    pub fn check(&self, ontology: &Ontology) -> Result<(), String> {
        if self.domains.is_empty() {
            return Err("goal has no domain sections".into());
        }
        for (name, d) in &self.domains {
            let schema = ontology
                .domain(name)
                .ok_or_else(|| format!("goal domain {name:?} not in ontology"))?;
            for slot in d.info.keys().chain(d.reqt.iter()) {
                if !schema.has_slot(slot) {
                    return Err(format!("slot {slot:?} unknown in domain {name:?}"));
                }
            }
            if let Some(slot) = d.reqt.iter().find(|s| d.info.contains_key(*s)) {
                return Err(format!("slot {slot:?} is both informed and requested in {name:?}"));
            }
            for slot in d.book.iter().flat_map(|b| b.keys()) {
                if !schema.bookable.contains_key(slot) {
                    return Err(format!("slot {slot:?} not bookable in {name:?}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => "USER",
            Speaker::System => "SYSTEM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub turn_index: usize,
    pub speaker: Speaker,
    pub acts: Vec<DialogueAct>,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TurnTrace>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    #[default]
    Utterances,
    Acts,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DialogueContext {
    pub turns: Vec<DialogueTurn>,
    pub render_mode: RenderMode,
}

impl DialogueContext {
    pub fn new(render_mode: RenderMode) -> Self {
        Self { turns: Vec::new(), render_mode }
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn push(&mut self, speaker: Speaker, acts: Vec<DialogueAct>, utterance: String) {
        let turn_index = self.turns.len();
        self.turns.push(DialogueTurn { turn_index, speaker, acts, utterance, trace: None });
    }

    pub fn render(&self) -> String {
        self.render_as(self.render_mode)
    }

    pub fn render_as(&self, mode: RenderMode) -> String {
        let lines: Vec<String> = self
            .turns
            .iter()
            .map(|t| {
                let body = match mode {
                    RenderMode::Utterances => t.utterance.clone(),
                    RenderMode::Acts if t.acts.is_empty() => "[]".to_string(),
                    RenderMode::Acts => render_acts_unchecked(&t.acts),
                };
                format!("{}: {}", t.speaker.label(), body)
            })
            .collect();
        lines.join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    UserBye,
    TurnCap,
    Error,
}

/// A booking as announced by the system side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookingRecord {
    pub domain: String,
    pub reference: String,
    /// Entity name announced alongside the reference.
    pub name: Option<String>,
    pub constraints: BTreeMap<String, String>,
}

/// Outcome annotations derived from the system's acts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub bookings: Vec<BookingRecord>,
    /// Last value the system informed for each (domain, slot).
    pub provided: BTreeMap<String, BTreeMap<String, String>>,
}

impl Outcome {
    /// Replays system turns: `inform` acts fill `provided`; an `offer_booked`
    /// act on the reference slot opens a booking whose constraints are the
    /// other `offer_booked` slots of the same turn and whose name is the
    /// `name` informed in that turn.
    pub fn replay(turns: &[DialogueTurn]) -> Self {
        let mut out = Outcome::default();
        for turn in turns.iter().filter(|t| t.speaker == Speaker::System) {
            for act in &turn.acts {
                if act.intent == Intent::Inform && !act.slot.is_empty() && !act.value.is_empty() {
                    out.provided
                        .entry(act.domain.clone())
                        .or_default()
                        .insert(act.slot.clone(), act.value.clone());
                }
            }
            for act in &turn.acts {
                if act.intent != Intent::OfferBooked || act.slot != REF_SLOT {
                    continue;
                }
                let constraints = turn
                    .acts
                    .iter()
                    .filter(|a| {
                        a.intent == Intent::OfferBooked && a.domain == act.domain && a.slot != REF_SLOT
                    })
                    .map(|a| (a.slot.clone(), a.value.clone()))
                    .collect();
                let name = turn
                    .acts
                    .iter()
                    .find(|a| a.intent == Intent::Inform && a.domain == act.domain && a.slot == "name")
                    .map(|a| a.value.clone());
                out.bookings.push(BookingRecord {
                    domain: act.domain.clone(),
                    reference: act.value.clone(),
                    name,
                    constraints,
                });
            }
        }
        out
    }
}

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Complete record of one simulated dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueLog {
    pub v: u32,
    pub seed: u64,
    pub goal: UserGoal,
    pub turns: Vec<DialogueTurn>,
    pub outcome: Outcome,
    pub termination_reason: TerminationReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DialogueLog {
    pub fn new(seed: u64, goal: UserGoal, turns: Vec<DialogueTurn>, termination_reason: TerminationReason) -> Self {
        let outcome = Outcome::replay(&turns);
        Self { v: LOG_SCHEMA_VERSION, seed, goal, turns, outcome, termination_reason, error: None }
    }

    pub fn user_utterances(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::User)
            .map(|t| t.utterance.as_str())
    }

    /// True when the stored outcome matches a fresh replay of the turns.
    pub fn annotations_consistent(&self) -> bool {
        Outcome::replay(&self.turns) == self.outcome
    }
}
