//! Ontology, entity database, booking ledger and goal generator.
//!
//! The world file is JSON with two top-level sections:
//!
//! ```json
//! {
//!   "ontology": {
//!     "<domain>": {
//!       "informable": { "<slot>": ["candidate", ...] },
//!       "requestable": ["<slot>", ...],
//!       "bookable": { "<slot>": ["candidate", ...] }
//!     }
//!   },
//!   "entities": [
//!     { "domain": "<domain>", "id": "<id>", "attributes": { "<slot>": "<value>" } }
//!   ]
//! }
//! ```
//!
//! Every entity must carry a value for each informable and requestable slot
//! of its domain, and nothing else.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{DomainGoal, UserGoal, REF_SLOT};

const BUNDLED_WORLD: &str = include_str!("../data/world.json");

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("cannot read world file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("world file does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema violation at {location}: {message}")]
    SchemaViolation { location: String, message: String },
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("world has no entities to build a goal from")]
    EmptyWorld,
    #[error("domain {0:?} has no bookable slots")]
    UnbookableDomain(String),
    #[error("slot {slot:?} is not bookable in domain {domain:?}")]
    InvalidBookingSlot { domain: String, slot: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub informable: BTreeMap<String, Vec<String>>,
    pub requestable: Vec<String>,
    #[serde(default)]
    pub bookable: BTreeMap<String, Vec<String>>,
}

impl DomainSchema {
    pub fn has_slot(&self, slot: &str) -> bool {
        self.informable.contains_key(slot)
            || self.requestable.iter().any(|s| s == slot)
            || self.bookable.contains_key(slot)
            || (slot == REF_SLOT && self.is_bookable())
    }

    pub fn is_requestable(&self, slot: &str) -> bool {
        self.requestable.iter().any(|s| s == slot)
    }

    pub fn is_bookable(&self) -> bool {
        !self.bookable.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ontology {
    pub domains: BTreeMap<String, DomainSchema>,
}

impl Ontology {
    pub fn domain(&self, name: &str) -> Option<&DomainSchema> {
        self.domains.get(name)
    }

    pub fn domain_names(&self) -> impl Iterator<Item = &str> {
        self.domains.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub domain: String,
    pub id: String,
    pub attributes: BTreeMap<String, String>,
}

impl Entity {
    pub fn get(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).map(String::as_str)
    }

    pub fn matches(&self, constraints: &BTreeMap<String, String>) -> bool {
        constraints
            .iter()
            .all(|(slot, want)| self.get(slot).is_some_and(|have| have.eq_ignore_ascii_case(want.trim())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct World {
    pub ontology: Ontology,
    pub entities: Vec<Entity>,
}

impl World {
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_WORLD).expect("bundled world file is valid")
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| WorldError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let mut world: World = serde_json::from_str(text)?;
        world.entities.sort_by(|a, b| a.id.cmp(&b.id));
        world.validate()?;
        Ok(world)
    }

    fn validate(&self) -> Result<(), WorldError> {
        let violation = |location: String, message: String| WorldError::SchemaViolation { location, message };
        if self.ontology.domains.is_empty() {
            return Err(violation("ontology".into(), "no domains defined".into()));
        }
        for (name, schema) in &self.ontology.domains {
            for (slot, values) in schema.informable.iter().chain(schema.bookable.iter()) {
                if values.is_empty() {
                    return Err(violation(format!("ontology.{name}.{slot}"), "empty candidate value list".into()));
                }
            }
            let mut seen = HashSet::new();
            for slot in &schema.requestable {
                if !seen.insert(slot) {
                    return Err(violation(format!("ontology.{name}.requestable"), format!("duplicate slot {slot:?}")));
                }
            }
        }
        let mut ids = HashSet::new();
        for (i, e) in self.entities.iter().enumerate() {
            let location = format!("entities[{i}] ({})", e.id);
            if !ids.insert(&e.id) {
                return Err(violation(location, "duplicate entity id".into()));
            }
            let schema = self
                .ontology
                .domain(&e.domain)
                .ok_or_else(|| violation(location.clone(), format!("unknown domain {:?}", e.domain)))?;
            let required: BTreeSet<&String> = schema.informable.keys().chain(schema.requestable.iter()).collect();
            if let Some(missing) = required.iter().find(|s| !e.attributes.contains_key(**s)) {
                return Err(violation(location, format!("missing slot {missing:?}")));
            }
            if let Some(extra) = e.attributes.keys().find(|s| !required.contains(s)) {
                return Err(violation(location, format!("slot {extra:?} not in ontology")));
            }
        }
        Ok(())
    }

    /// Entities of `domain` whose attributes equal every constraint,
    /// case-insensitively, in id order.
    pub fn query_entities(
        &self,
        domain: &str,
        constraints: &BTreeMap<String, String>,
    ) -> Result<Vec<&Entity>, WorldError> {
        if self.ontology.domain(domain).is_none() {
            return Err(WorldError::UnknownDomain(domain.to_string()));
        }
        Ok(self
            .entities
            .iter()
            .filter(|e| e.domain == domain && e.matches(constraints))
            .collect())
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    pub fn entity_by_name(&self, domain: &str, name: &str) -> Option<&Entity> {
        self.entities
            .iter()
            .find(|e| e.domain == domain && e.get("name").is_some_and(|n| n.eq_ignore_ascii_case(name.trim())))
    }

    /// Random goal: 1–2 domains; per domain 1–3 informed constraints copied
    /// from one real entity (so the goal is always satisfiable), 1–3
    /// requested slots disjoint from them, and a booking section with
    /// probability 0.5 when the domain is bookable.
    pub fn generate_goal(&self, seed: u64) -> Result<UserGoal, WorldError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let populated: Vec<&str> = self
            .ontology
            .domain_names()
            .filter(|d| self.entities.iter().any(|e| e.domain == *d))
            .collect();
        if populated.is_empty() {
            return Err(WorldError::EmptyWorld);
        }
        let count = rng.random_range(1..=2usize).min(populated.len());
        let mut chosen: Vec<&str> = populated.choose_multiple(&mut rng, count).copied().collect();
        chosen.sort_unstable();

        let mut goal = UserGoal::default();
        for domain in chosen {
            let schema = &self.ontology.domains[domain];
            let pool: Vec<&Entity> = self.entities.iter().filter(|e| e.domain == domain).collect();
            let target = pool.choose(&mut rng).expect("populated domain");

            let mut informable: Vec<&String> = schema.informable.keys().collect();
            informable.shuffle(&mut rng);
            let n_info = rng.random_range(1..=3usize).min(informable.len());
            let info: BTreeMap<String, String> = informable[..n_info]
                .iter()
                .map(|s| ((*s).clone(), target.attributes[*s].clone()))
                .collect();

            let mut requestable: Vec<&String> =
                schema.requestable.iter().filter(|s| !info.contains_key(*s)).collect();
            requestable.shuffle(&mut rng);
            let n_reqt = rng.random_range(1..=3usize).min(requestable.len());
            let mut reqt: Vec<String> = requestable[..n_reqt].iter().map(|s| (*s).clone()).collect();
            reqt.sort();

            let book = if schema.is_bookable() && rng.random_bool(0.5) {
                Some(
                    schema
                        .bookable
                        .iter()
                        .map(|(slot, values)| (slot.clone(), values.choose(&mut rng).expect("non-empty").clone()))
                        .collect(),
                )
            } else {
                None
            };
            goal.domains.insert(domain.to_string(), DomainGoal { info, reqt, book });
        }
        Ok(goal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookingRef {
    pub reference: String,
    pub entity_id: String,
    pub constraints: BTreeMap<String, String>,
}

/// Per-session booking state. Reference codes are drawn from a seeded RNG
/// so a session replays identically.
#[derive(Debug, Clone)]
pub struct BookingLedger {
    rng: ChaCha8Rng,
    bookings: Vec<BookingRef>,
}

const REF_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

impl BookingLedger {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed ^ 0xB00C_1D), bookings: Vec::new() }
    }

    pub fn bookings(&self) -> &[BookingRef] {
        &self.bookings
    }

    pub fn book_entity(
        &mut self,
        ontology: &Ontology,
        entity: &Entity,
        constraints: &BTreeMap<String, String>,
    ) -> Result<BookingRef, WorldError> {
        let schema = ontology
            .domain(&entity.domain)
            .ok_or_else(|| WorldError::UnknownDomain(entity.domain.clone()))?;
        if !schema.is_bookable() {
            return Err(WorldError::UnbookableDomain(entity.domain.clone()));
        }
        if let Some(slot) = constraints.keys().find(|s| !schema.bookable.contains_key(*s)) {
            return Err(WorldError::InvalidBookingSlot { domain: entity.domain.clone(), slot: slot.clone() });
        }
        let reference = loop {
            let code: String = (0..8)
                .map(|_| *REF_ALPHABET.choose(&mut self.rng).expect("non-empty") as char)
                .collect();
            if !self.bookings.iter().any(|b| b.reference == code) {
                break code;
            }
        };
        let booking = BookingRef { reference, entity_id: entity.id.clone(), constraints: constraints.clone() };
        self.bookings.push(booking.clone());
        Ok(booking)
    }
}
