//! Stack-based rule user simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::duet::{SimError, UserAction, UserSimulator};
use crate::model::{DialogueAct, DialogueContext, Intent, Speaker, UserGoal, REF_SLOT};
use crate::nlg::TemplateNlg;
use crate::sysstub::DONTCARE;

/// Acts (or booking groups) popped per user turn.
pub const POP_BUDGET: usize = 2;
/// Times unanswered requests and unfinished bookings are re-queued before bye.
pub const MAX_REASKS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Agenda {
    goal: UserGoal,
    /// Pending acts; the last element is the top.
    stack: Vec<DialogueAct>,
    requests: BTreeMap<(String, String), Option<String>>,
    booked: BTreeMap<String, bool>,
    relaxed: BTreeSet<String>,
    /// Goal constraints in the order they were informed.
    informed: Vec<(String, String)>,
    reasks: u32,
    failed: bool,
}

fn book_acts(domain: &str, book: &BTreeMap<String, String>) -> Vec<DialogueAct> {
    book.iter().map(|(s, v)| DialogueAct::new(Intent::Book, domain, s, v)).collect()
}

impl Agenda {
    pub fn new(goal: &UserGoal) -> Self {
        let mut top_down = Vec::new();
        for (d, g) in &goal.domains {
            top_down.extend(g.info.iter().map(|(s, v)| DialogueAct::inform(d, s, v)));
        }
        for (d, g) in &goal.domains {
            top_down.extend(g.reqt.iter().map(|s| DialogueAct::request(d, s)));
        }
        for (d, g) in &goal.domains {
            if let Some(book) = &g.book {
                top_down.extend(book_acts(d, book));
            }
        }
        top_down.push(DialogueAct::bare(Intent::Bye));
        top_down.reverse();

        let requests = goal
            .domains
            .iter()
            .flat_map(|(d, g)| g.reqt.iter().map(move |s| ((d.clone(), s.clone()), None)))
            .collect();
        let booked = goal.domains.iter().filter(|(_, g)| g.book.is_some()).map(|(d, _)| (d.clone(), false)).collect();
        Self {
            goal: goal.clone(),
            stack: top_down,
            requests,
            booked,
            relaxed: BTreeSet::new(),
            informed: Vec::new(),
            reasks: 0,
            failed: false,
        }
    }

    /// Pending acts, top first.
    pub fn pending(&self) -> Vec<&DialogueAct> {
        self.stack.iter().rev().collect()
    }

    pub fn failed(&self) -> bool {
        self.failed
    }

    pub fn goal(&self) -> &UserGoal {
        &self.goal
    }

    fn push_top(&mut self, act: DialogueAct) {
        self.stack.retain(|a| a != &act);
        self.stack.push(act);
    }

    fn give_up(&mut self) {
        self.stack.clear();
        self.stack.push(DialogueAct::bare(Intent::Bye));
        self.failed = true;
    }

    fn observe(&mut self, system_acts: &[DialogueAct]) {
        for act in system_acts {
            let d = act.domain.as_str();
            match act.intent {
                Intent::Inform => {
                    let key = (act.domain.clone(), act.slot.clone());
                    if let Some(status) = self.requests.get_mut(&key) {
                        *status = Some(act.value.clone());
                        self.stack.retain(|a| !(a.intent == Intent::Request && a.domain == d && a.slot == act.slot));
                    }
                }
                Intent::OfferBooked if act.slot == REF_SLOT => {
                    if let Some(done) = self.booked.get_mut(d) {
                        *done = true;
                        self.stack.retain(|a| !(a.intent == Intent::Book && a.domain == d));
                    }
                }
                Intent::Request => {
                    let goal = self.goal.domain(d);
                    let reply = match (goal.and_then(|g| g.info.get(&act.slot)), goal.and_then(|g| g.book.as_ref())) {
                        (Some(v), _) => DialogueAct::inform(d, &act.slot, v),
                        (None, Some(book)) if book.contains_key(&act.slot) => {
                            DialogueAct::new(Intent::Book, d, &act.slot, &book[&act.slot])
                        }
                        _ => DialogueAct::inform(d, &act.slot, DONTCARE),
                    };
                    self.push_top(reply);
                }
                Intent::NoOffer => {
                    let last = self.informed.iter().rev().find(|(dd, _)| dd == d).cloned();
                    match last {
                        Some((_, slot)) if self.relaxed.insert(d.to_string()) => {
                            self.push_top(DialogueAct::inform(d, &slot, DONTCARE));
                        }
                        _ => self.give_up(),
                    }
                }
                Intent::NoBook => self.give_up(),
                Intent::OfferBook => {
                    let informs_pending = self.stack.iter().any(|a| {
                        a.intent == Intent::Inform
                            && a.domain == d
                            && self.goal.domain(d).is_some_and(|g| g.info.contains_key(&a.slot))
                    });
                    if self.booked.get(d) == Some(&false) && !informs_pending {
                        let group: Vec<DialogueAct> = self
                            .stack
                            .iter()
                            .filter(|a| a.intent == Intent::Book && a.domain == d)
                            .cloned()
                            .collect();
                        self.stack.retain(|a| !(a.intent == Intent::Book && a.domain == d));
                        self.stack.extend(group);
                    }
                }
                _ => {}
            }
        }
    }

    /// Re-queues what is still missing, once per call, within the re-ask budget.
    fn requeue_missing(&mut self) -> bool {
        if self.failed || self.reasks >= MAX_REASKS {
            return false;
        }
        let mut missing = Vec::new();
        for (d, done) in &self.booked {
            if !done {
                if let Some(book) = self.goal.domain(d).and_then(|g| g.book.as_ref()) {
                    missing.extend(book_acts(d, book).into_iter().rev());
                }
            }
        }
        for ((d, s), status) in self.requests.iter().rev() {
            if status.is_none() {
                missing.push(DialogueAct::request(d, s));
            }
        }
        if missing.is_empty() {
            return false;
        }
        self.reasks += 1;
        for act in missing {
            self.push_top(act);
        }
        true
    }

    fn pop_turn(&mut self) -> Vec<DialogueAct> {
        let mut out: Vec<DialogueAct> = Vec::new();
        let mut units = 0;
        while units < POP_BUDGET {
            let Some(top) = self.stack.last().cloned() else { break };
            match top.intent {
                Intent::Bye => {
                    if !out.is_empty() {
                        break;
                    }
                    if self.stack.len() == 1 && self.requeue_missing() {
                        continue;
                    }
                    out.push(self.stack.pop().expect("non-empty"));
                    break;
                }
                Intent::Book => {
                    while self.stack.last().is_some_and(|a| a.intent == Intent::Book && a.domain == top.domain) {
                        out.push(self.stack.pop().expect("non-empty"));
                    }
                }
                _ => {
                    let act = self.stack.pop().expect("non-empty");
                    if act.intent == Intent::Inform
                        && self.goal.domain(&act.domain).is_some_and(|g| g.info.contains_key(&act.slot))
                    {
                        self.informed.push((act.domain.clone(), act.slot.clone()));
                    }
                    out.push(act);
                }
            }
            units += 1;
        }
        if out.is_empty() {
            out.push(DialogueAct::bare(Intent::Bye));
        }
        out
    }

    /// Applies the update rules for the system's last acts, then pops the
    /// next user turn.
    pub fn step(&self, system_acts: &[DialogueAct]) -> (Vec<DialogueAct>, Agenda) {
        let mut next = self.clone();
        next.observe(system_acts);
        let acts = next.pop_turn();
        (acts, next)
    }
}

pub struct AgendaSimulator {
    agenda: Agenda,
    nlg: Arc<TemplateNlg>,
    last_system: Vec<DialogueAct>,
}

impl AgendaSimulator {
    pub fn new(goal: &UserGoal, nlg: Arc<TemplateNlg>) -> Self {
        Self { agenda: Agenda::new(goal), nlg, last_system: Vec::new() }
    }

    pub fn agenda(&self) -> &Agenda {
        &self.agenda
    }
}

impl UserSimulator for AgendaSimulator {
    fn goal(&self) -> &UserGoal {
        self.agenda.goal()
    }

    fn user_turn(&mut self, _context: &DialogueContext) -> Result<UserAction, SimError> {
        let (acts, next) = self.agenda.step(&self.last_system);
        self.agenda = next;
        let utterance = self.nlg.realize(Speaker::User, &acts).map_err(|e| SimError::Simulator(e.to_string()))?;
        Ok(UserAction { acts, utterance, trace: None })
    }

    fn observe(&mut self, system_acts: &[DialogueAct]) {
        self.last_system = system_acts.to_vec();
    }
}
