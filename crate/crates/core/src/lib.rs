//! User simulation for task-oriented dialogue.
//!
//! A two-model simulator drafts user dialogue acts step by step and has a
//! second model check each draft against a requirement list before the acts
//! are turned into an utterance. An agenda-based rule simulator, a rule-based
//! dialogue system over a small bundled world, and goal-fulfillment and
//! lexical-diversity metrics complete the offline evaluation loop.

pub mod agenda;
pub mod backend;
pub mod duet;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nlg;
pub mod prompts;
pub mod sysstub;
pub mod verifier;
pub mod world;

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}
