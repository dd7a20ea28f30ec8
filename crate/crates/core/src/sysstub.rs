//! A deterministic rule-based dialogue system over the bundled world.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::duet::{DialogueSystem, SimError};
use crate::model::{DialogueAct, Intent, Speaker, GENERAL_DOMAIN, REF_SLOT};
use crate::nlg::TemplateNlg;
use crate::world::{BookingLedger, BookingRef, World};

/// Above this many matches the system asks the user to narrow down.
pub const UNDERDETERMINED_MATCHES: usize = 5;

pub const DONTCARE: &str = "dontcare";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainState {
    pub constraints: BTreeMap<String, String>,
    pub booking: BTreeMap<String, String>,
    pub candidate: Option<String>,
    pub informed: BTreeSet<String>,
    /// Informable slots the user declared indifference to.
    pub dontcare: BTreeSet<String>,
    pub booked: Option<BookingRef>,
    /// The user has mentioned this domain at any point.
    pub active: bool,
}

#[derive(Debug, Clone)]
pub struct SystemState {
    pub domains: BTreeMap<String, DomainState>,
    ledger: BookingLedger,
}

impl SystemState {
    pub fn new(seed: u64) -> Self {
        Self { domains: BTreeMap::new(), ledger: BookingLedger::new(seed) }
    }

    pub fn bookings(&self) -> &[BookingRef] {
        self.ledger.bookings()
    }
}

pub struct SystemStub {
    world: Arc<World>,
    nlg: Arc<TemplateNlg>,
    state: SystemState,
}

impl SystemStub {
    pub fn new(world: Arc<World>, nlg: Arc<TemplateNlg>, seed: u64) -> Self {
        Self { world, nlg, state: SystemState::new(seed) }
    }

    pub fn state(&self) -> &SystemState {
        &self.state
    }

    /// Policy for one user turn, in priority order per mentioned domain.
    pub fn system_turn(&mut self, user_acts: &[DialogueAct]) -> Vec<DialogueAct> {
        if user_acts.iter().any(|a| a.intent == Intent::Bye) {
            return vec![DialogueAct::bare(Intent::Bye)];
        }
        let mut mentioned: Vec<&str> = Vec::new();
        for act in user_acts {
            if act.domain != GENERAL_DOMAIN && self.world.ontology.domain(&act.domain).is_some() && !mentioned.contains(&act.domain.as_str()) {
                mentioned.push(&act.domain);
            }
        }
        let mut out = Vec::new();
        for domain in mentioned {
            let acts: Vec<&DialogueAct> = user_acts.iter().filter(|a| a.domain == domain).collect();
            out.extend(self.domain_turn(domain, &acts));
        }
        if out.is_empty() {
            out.push(DialogueAct::bare(Intent::ReqMore));
        }
        out
    }

    fn domain_turn(&mut self, domain: &str, acts: &[&DialogueAct]) -> Vec<DialogueAct> {
        let schema = &self.world.ontology.domains[domain];
        let st = self.state.domains.entry(domain.to_string()).or_default();
        st.active = true;
        for act in acts {
            if !matches!(act.intent, Intent::Inform | Intent::Book) || act.slot.is_empty() {
                continue;
            }
            let target = if schema.informable.contains_key(&act.slot) && act.intent == Intent::Inform {
                &mut st.constraints
            } else if schema.bookable.contains_key(&act.slot) {
                &mut st.booking
            } else {
                continue;
            };
            if act.value.eq_ignore_ascii_case(DONTCARE) {
                target.remove(&act.slot);
                st.dontcare.insert(act.slot.clone());
            } else {
                target.insert(act.slot.clone(), act.value.clone());
            }
        }

        let matches = self.world.query_entities(domain, &st.constraints).unwrap_or_default();
        let previous = st.candidate.take();
        st.candidate = matches.first().map(|e| e.id.clone());
        if st.candidate != previous {
            st.informed.clear();
        }
        let Some(entity) = matches.first().copied() else {
            return vec![DialogueAct::bare(Intent::NoOffer).in_domain(domain)];
        };
        let name = entity.get("name").unwrap_or_default().to_string();

        let mut out = Vec::new();
        let requests: Vec<&str> = acts
            .iter()
            .filter(|a| a.intent == Intent::Request && !a.slot.is_empty())
            .map(|a| a.slot.as_str())
            .collect();
        for slot in &requests {
            if let Some(v) = entity.get(slot) {
                out.push(DialogueAct::inform(domain, slot, v));
                st.informed.insert(slot.to_string());
            }
        }
        let mut name_said = false;
        if !requests.is_empty() && !st.informed.contains("name") {
            out.insert(0, DialogueAct::inform(domain, "name", &name));
            st.informed.insert("name".into());
            name_said = true;
        }

        if acts.iter().any(|a| a.intent == Intent::Book) && st.booked.is_none() {
            if let Some(missing) = schema.bookable.keys().find(|s| !st.booking.contains_key(*s)) {
                out.push(DialogueAct::request(domain, missing));
            } else {
                match self.state.ledger.book_entity(&self.world.ontology, entity, &st.booking) {
                    Ok(booking) => {
                        out.push(DialogueAct::new(Intent::OfferBooked, domain, REF_SLOT, &booking.reference));
                        for (slot, value) in &booking.constraints {
                            out.push(DialogueAct::new(Intent::OfferBooked, domain, slot, value));
                        }
                        if !name_said {
                            out.push(DialogueAct::inform(domain, "name", &name));
                        }
                        st.booked = Some(booking);
                    }
                    Err(_) => out.push(DialogueAct::bare(Intent::NoBook).in_domain(domain)),
                }
            }
            return out;
        }
        if !out.is_empty() {
            return out;
        }

        if matches.len() > UNDERDETERMINED_MATCHES {
            if let Some(slot) = schema.informable.keys().find(|s| *s != "name" && !st.constraints.contains_key(*s) && !st.dontcare.contains(*s)) {
                return vec![DialogueAct::request(domain, slot)];
            }
        }
        let mut out = vec![DialogueAct::new(Intent::Recommend, domain, "name", &name)];
        if schema.is_bookable() && st.booked.is_none() {
            out.push(DialogueAct::bare(Intent::OfferBook).in_domain(domain));
        }
        out
    }
}

impl DialogueSystem for SystemStub {
    fn respond(&mut self, user_acts: &[DialogueAct]) -> Result<(Vec<DialogueAct>, String), SimError> {
        let acts = self.system_turn(user_acts);
        let utterance = self.nlg.realize(Speaker::System, &acts).map_err(|e| SimError::System(e.to_string()))?;
        Ok((acts, utterance))
    }
}
