//! Goal-fulfillment scoring over dialogue logs and lexical diversity over
//! user utterances.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{DialogueLog, DomainGoal};
use crate::world::{Entity, World};

pub const MSTTR_SEGMENT: usize = 50;
pub const HDD_SAMPLE: usize = 42;
pub const MTLD_THRESHOLD: f64 = 0.72;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no dialogue logs to evaluate")]
    EmptyLogSet,
    #[error("stream has {got} tokens, need at least {needed}")]
    ShortStream { needed: usize, got: usize },
    #[error("no MTLD factors completed")]
    ZeroFactors,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Lowercases, splits on whitespace and trims non-alphanumeric characters
/// from both ends of each token.
pub fn tokenize<'a>(utterances: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    utterances
        .into_iter()
        .flat_map(str::split_whitespace)
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn unique_ngrams<S: AsRef<str>>(stream: &[S], n: usize) -> usize {
    if n == 0 || stream.len() < n {
        return 0;
    }
    stream
        .windows(n)
        .map(|w| w.iter().map(AsRef::as_ref).collect::<Vec<&str>>())
        .collect::<HashSet<_>>()
        .len()
}

fn counts<S: AsRef<str>>(stream: &[S]) -> HashMap<&str, usize> {
    let mut c = HashMap::new();
    for t in stream {
        *c.entry(t.as_ref()).or_insert(0) += 1;
    }
    c
}

/// Unigram entropy in bits.
pub fn shannon_entropy<S: AsRef<str>>(stream: &[S]) -> f64 {
    let n = stream.len() as f64;
    -counts(stream)
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// `-Σ p(w1,w2) log2 p(w2|w1)` over adjacent pairs, in bits.
pub fn conditional_bigram_entropy<S: AsRef<str>>(stream: &[S]) -> f64 {
    if stream.len() < 2 {
        return 0.0;
    }
    let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
    let mut firsts: HashMap<&str, usize> = HashMap::new();
    for w in stream.windows(2) {
        *pairs.entry((w[0].as_ref(), w[1].as_ref())).or_insert(0) += 1;
        *firsts.entry(w[0].as_ref()).or_insert(0) += 1;
    }
    let total = (stream.len() - 1) as f64;
    -pairs
        .iter()
        .map(|((w1, _), &c)| {
            let joint = c as f64 / total;
            let cond = c as f64 / firsts[w1] as f64;
            joint * cond.log2()
        })
        .sum::<f64>()
}

pub fn msttr<S: AsRef<str>>(stream: &[S], segment: usize) -> Result<f64, MetricsError> {
    if segment == 0 {
        return Err(MetricsError::InvalidParameter("segment length must be positive".into()));
    }
    if stream.len() < segment {
        return Err(MetricsError::ShortStream { needed: segment, got: stream.len() });
    }
    let ratios: Vec<f64> = stream
        .chunks_exact(segment)
        .map(|seg| seg.iter().map(AsRef::as_ref).collect::<HashSet<&str>>().len() as f64 / segment as f64)
        .collect();
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Expected fraction of types seen in a random draw of `sample` tokens
/// without replacement.
pub fn hdd<S: AsRef<str>>(stream: &[S], sample: usize) -> Result<f64, MetricsError> {
    if sample == 0 {
        return Err(MetricsError::InvalidParameter("sample size must be positive".into()));
    }
    let n = stream.len();
    if n < sample {
        return Err(MetricsError::ShortStream { needed: sample, got: n });
    }
    let total: f64 = counts(stream)
        .values()
        .map(|&c| {
            // P(no occurrence) = C(n-c, s) / C(n, s) as a running product.
            let miss = if n - c < sample {
                0.0
            } else {
                (0..sample).map(|i| (n - c - i) as f64 / (n - i) as f64).product()
            };
            (1.0 - miss) / sample as f64
        })
        .sum();
    Ok(total)
}

fn mtld_pass<'a>(tokens: impl Iterator<Item = &'a str>, threshold: f64) -> (usize, f64) {
    let mut factors = 0.0;
    let mut types: HashSet<&str> = HashSet::new();
    let mut count = 0usize;
    let mut n = 0usize;
    for t in tokens {
        n += 1;
        count += 1;
        types.insert(t);
        if types.len() as f64 / count as f64 <= threshold {
            factors += 1.0;
            types.clear();
            count = 0;
        }
    }
    if count > 0 {
        let ttr = types.len() as f64 / count as f64;
        factors += (1.0 - ttr) / (1.0 - threshold);
    }
    (n, factors)
}

/// Bidirectional MTLD: mean of the forward and reversed passes.
pub fn mtld<S: AsRef<str>>(stream: &[S], threshold: f64) -> Result<f64, MetricsError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MetricsError::InvalidParameter("threshold must lie in (0, 1)".into()));
    }
    let (n, forward) = mtld_pass(stream.iter().map(AsRef::as_ref), threshold);
    let (_, backward) = mtld_pass(stream.iter().rev().map(AsRef::as_ref), threshold);
    if forward <= 0.0 || backward <= 0.0 {
        return Err(MetricsError::ZeroFactors);
    }
    Ok((n as f64 / forward + n as f64 / backward) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub tokens: usize,
    pub unigrams: usize,
    pub bigrams: usize,
    pub trigrams: usize,
    pub entropy: f64,
    pub conditional_entropy: f64,
    pub msttr: Option<f64>,
    pub hdd: Option<f64>,
    pub mtld: Option<f64>,
}

impl DiversityReport {
    pub fn from_stream<S: AsRef<str>>(stream: &[S]) -> Self {
        Self {
            tokens: stream.len(),
            unigrams: unique_ngrams(stream, 1),
            bigrams: unique_ngrams(stream, 2),
            trigrams: unique_ngrams(stream, 3),
            entropy: shannon_entropy(stream),
            conditional_entropy: conditional_bigram_entropy(stream),
            msttr: msttr(stream, MSTTR_SEGMENT).ok(),
            hdd: hdd(stream, HDD_SAMPLE).ok(),
            mtld: mtld(stream, MTLD_THRESHOLD).ok(),
        }
    }
}

/// Diversity over every user utterance in the logs, in log order.
pub fn diversity(logs: &[DialogueLog]) -> DiversityReport {
    let stream = tokenize(logs.iter().flat_map(DialogueLog::user_utterances));
    DiversityReport::from_stream(&stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueScore {
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub complete: bool,
    pub success: bool,
    pub booking_subtasks: usize,
    pub bookings_matched: usize,
    pub turns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FulfillmentReport {
    pub complete_rate: f64,
    pub success_rate: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when no dialogue had a booking subtask.
    pub book_rate: Option<f64>,
    pub avg_turns: f64,
    pub dialogues: Vec<DialogueScore>,
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
}

fn candidates<'w>(world: &'w World, domain: &str, goal: &DomainGoal) -> Vec<&'w Entity> {
    world.query_entities(domain, &goal.info).unwrap_or_default()
}

fn consistent(entity: &Entity, values: &BTreeMap<String, String>) -> bool {
    values.iter().all(|(s, v)| entity.get(s).is_none_or(|have| have.eq_ignore_ascii_case(v)))
}

pub fn score_dialogue(log: &DialogueLog, world: &World) -> DialogueScore {
    let provided_map = &log.outcome.provided;
    let mut provided: BTreeSet<(&str, &str)> = BTreeSet::new();
    for (d, slots) in provided_map {
        if let Some(schema) = world.ontology.domain(d) {
            for s in slots.keys().filter(|s| schema.is_requestable(s)) {
                provided.insert((d, s));
            }
        }
    }
    let requested: BTreeSet<(&str, &str)> =
        log.goal.domains.iter().flat_map(|(d, g)| g.reqt.iter().map(move |s| (d.as_str(), s.as_str()))).collect();

    let correct = provided
        .iter()
        .filter(|(d, s)| {
            requested.contains(&(*d, *s))
                && log.goal.domain(d).is_some_and(|g| {
                    let v = &provided_map[*d][*s];
                    candidates(world, d, g).iter().any(|e| e.get(s).is_some_and(|have| have.eq_ignore_ascii_case(v)))
                })
        })
        .count() as f64;
    let precision = match (provided.is_empty(), requested.is_empty()) {
        (true, true) => 1.0,
        (true, false) => 0.0,
        _ => correct / provided.len() as f64,
    };
    let recall = if requested.is_empty() { 1.0 } else { correct / requested.len() as f64 };

    let mut complete = requested.iter().all(|(d, s)| provided_map.get(*d).is_some_and(|m| m.contains_key(*s)));
    let mut values_ok = true;
    let mut booking_subtasks = 0;
    let mut bookings_matched = 0;
    for (d, g) in &log.goal.domains {
        let pool = candidates(world, d, g);
        if let Some(values) = provided_map.get(d) {
            values_ok &= pool.iter().any(|e| consistent(e, values));
        }
        let Some(book) = &g.book else { continue };
        booking_subtasks += 1;
        let records: Vec<_> = log.outcome.bookings.iter().filter(|b| &b.domain == d).collect();
        if records.is_empty() {
            complete = false;
            continue;
        }
        let matched = records.iter().any(|b| {
            let entity_ok = b
                .name
                .as_deref()
                .and_then(|n| world.entity_by_name(d, n))
                .is_some_and(|e| pool.iter().any(|p| p.id == e.id));
            let constraints_ok = b.constraints.len() == book.len()
                && book.iter().all(|(k, v)| b.constraints.get(k).is_some_and(|have| have.eq_ignore_ascii_case(v)));
            entity_ok && constraints_ok
        });
        if matched {
            bookings_matched += 1;
        }
    }
    let success = complete && values_ok && bookings_matched == booking_subtasks;
    DialogueScore {
        seed: log.seed,
        precision,
        recall,
        f1: harmonic(precision, recall),
        complete,
        success,
        booking_subtasks,
        bookings_matched,
        turns: log.turns.len(),
    }
}

pub fn fulfillment(logs: &[DialogueLog], world: &World) -> Result<FulfillmentReport, MetricsError> {
    if logs.is_empty() {
        return Err(MetricsError::EmptyLogSet);
    }
    let dialogues: Vec<DialogueScore> = crate::par_map(logs, |log| score_dialogue(log, world));
    let n = dialogues.len() as f64;
    let mean = |f: &dyn Fn(&DialogueScore) -> f64| dialogues.iter().map(f).sum::<f64>() / n;
    let precision = mean(&|d| d.precision);
    let recall = mean(&|d| d.recall);
    let subtasks: usize = dialogues.iter().map(|d| d.booking_subtasks).sum();
    let matched: usize = dialogues.iter().map(|d| d.bookings_matched).sum();
    Ok(FulfillmentReport {
        complete_rate: mean(&|d| f64::from(u8::from(d.complete))),
        success_rate: mean(&|d| f64::from(u8::from(d.success))),
        precision,
        recall,
        f1: harmonic(precision, recall),
        book_rate: (subtasks > 0).then(|| matched as f64 / subtasks as f64),
        avg_turns: mean(&|d| d.turns as f64),
        dialogues,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dialogues: usize,
    pub fulfillment: FulfillmentReport,
    pub diversity: DiversityReport,
}

impl EvaluationReport {
    pub fn build(logs: &[DialogueLog], world: &World) -> Result<Self, MetricsError> {
        Ok(Self { dialogues: logs.len(), fulfillment: fulfillment(logs, world)?, diversity: diversity(logs) })
    }

    /// Aligned two-row tables: goal fulfillment, then utterance diversity.
    pub fn render_table(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.p$}"));
        let f = &self.fulfillment;
        let d = &self.diversity;
        let tables = [
            (
                vec!["Complete", "Success", "Precision", "Recall", "F1", "Book", "Turns"],
                vec![
                    format!("{:.3}", f.complete_rate),
                    format!("{:.3}", f.success_rate),
                    format!("{:.3}", f.precision),
                    format!("{:.3}", f.recall),
                    format!("{:.3}", f.f1),
                    opt(f.book_rate, 3),
                    format!("{:.2}", f.avg_turns),
                ],
            ),
            (
                vec!["Unigrams", "Bigrams", "Trigrams", "Entropy", "CE", "MSTTR", "HDD", "MTLD"],
                vec![
                    d.unigrams.to_string(),
                    d.bigrams.to_string(),
                    d.trigrams.to_string(),
                    format!("{:.3}", d.entropy),
                    format!("{:.3}", d.conditional_entropy),
                    opt(d.msttr, 3),
                    opt(d.hdd, 3),
                    opt(d.mtld, 2),
                ],
            ),
        ];
        let mut out = String::new();
        for (header, row) in tables {
            let widths: Vec<usize> = header.iter().zip(&row).map(|(h, v)| h.len().max(v.len())).collect();
            let line = |cells: Vec<String>| {
                cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
            };
            let _ = writeln!(out, "{}", line(header.iter().map(|h| h.to_string()).collect()));
            let _ = writeln!(out, "{}", line(row));
            out.push('\n');
        }
        let _ = write!(out, "dialogues: {}", self.dialogues);
        out
    }
}
