#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};

use usersim::backend::{request_digest, CassetteBackend, CompletionBackend, CompletionRequest, FnBackend, ScriptedBackend};
use usersim::duet::{DualModelSimulator, ExhaustionPolicy, LoopConfig, TurnError, TurnTrace};
use usersim::generator::{ActGenerator, GenerationError};
use usersim::harness::{cmd_simulate, simulate_with, BackendSpec, ExperimentConfig, SessionRunner, SimulatorKind, LOG_FILE, MANIFEST_FILE};
use usersim::metrics::{
    conditional_bigram_entropy, fulfillment, hdd, msttr, mtld, score_dialogue, shannon_entropy, unique_ngrams, MetricsError,
    HDD_SAMPLE, MSTTR_SEGMENT, MTLD_THRESHOLD,
};
use usersim::model::{
    parse_act_list, render_act_list, DialogueAct, DialogueContext, DialogueLog, DialogueTurn, DomainGoal, Intent, RenderMode,
    Speaker, TerminationReason, UserGoal, REF_SLOT,
};
use usersim::prompts::{Ablation, CotStep, PartialAct, PromptForge, RequirementSet, TemplateSet};
use usersim::verifier::Verifier;
use usersim::world::World;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

pub const EXACT: f64 = 1e-9;
pub const MONTE_CARLO: f64 = 1e-2;

// ---------------------------------------------------------------- metrics

fn lcg_stream(n: usize, vocab: u64, seed: u64) -> Vec<String> {
    let mut x = seed;
    (0..n)
        .map(|_| {
            x = (x * 1_103_515_245 + 12_345) % (1 << 31);
            format!("w{}", x % vocab)
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

pub fn corpus(name: &str) -> Vec<String> {
    match name {
        "alt4" => words("a b a b"),
        "aab2" => words("a a b a a b"),
        "aaab" => words("a a a b"),
        "cat" => words("the cat sat on the mat the cat ran"),
        "period30" => (0..30).map(|i| format!("t{}", i % 7)).collect(),
        "lcg120" => lcg_stream(120, 12, 7),
        "ab100" => [vec!["a".to_string(); 50], vec!["b".to_string(); 50]].concat(),
        "distinct100" => (0..100).map(|i| format!("d{i}")).collect(),
        "lcg75" => lcg_stream(75, 30, 3),
        "lcg150" => lcg_stream(150, 40, 11),
        "same50" => vec!["x".to_string(); 50],
        "aaaa" => words("a a a a"),
        other => panic!("no corpus {other}"),
    }
}

pub struct MetricRow {
    pub name: &'static str,
    pub ngrams: [usize; 3],
    pub entropy: f64,
    pub conditional: f64,
    pub msttr: Option<f64>,
    pub hdd: Option<f64>,
    pub mtld: Option<f64>,
}

/// Values from an independent exact-arithmetic implementation.
pub const METRIC_TABLE: [MetricRow; 12] = [
    MetricRow { name: "alt4", ngrams: [2, 2, 2], entropy: 1.0, conditional: 0.0, msttr: None, hdd: None, mtld: Some(4.0) },
    MetricRow { name: "aab2", ngrams: [2, 3, 3], entropy: 0.9182958340544896, conditional: 0.8, msttr: None, hdd: None, mtld: Some(3.0) },
    MetricRow { name: "aaab", ngrams: [2, 2, 2], entropy: 0.8112781244591328, conditional: 0.9182958340544896, msttr: None, hdd: None, mtld: Some(4.0) },
    MetricRow { name: "cat", ngrams: [6, 7, 7], entropy: 2.4193819456463714, conditional: 0.5943609377704336, msttr: None, hdd: None, mtld: Some(9.0) },
    MetricRow { name: "period30", ngrams: [7, 7, 7], entropy: 2.799581230646065, conditional: 0.0, msttr: None, hdd: None, mtld: Some(10.0) },
    MetricRow {
        name: "lcg120",
        ngrams: [12, 35, 73],
        entropy: 3.5218167116322188,
        conditional: 1.4241130310709478,
        msttr: Some(0.24),
        hdd: Some(0.2794573656173327),
        mtld: Some(10.92200107584723),
    },
    MetricRow {
        name: "ab100",
        ngrams: [2, 3, 4],
        entropy: 1.0,
        conditional: 0.07143461744536397,
        msttr: Some(0.02),
        hdd: Some(0.047619047619047616),
        mtld: Some(2.0),
    },
    MetricRow {
        name: "distinct100",
        ngrams: [100, 99, 98],
        entropy: 6.6438561897747395,
        conditional: 0.0,
        msttr: Some(1.0),
        hdd: Some(1.0000000000000007),
        mtld: None,
    },
    MetricRow {
        name: "lcg75",
        ngrams: [28, 68, 72],
        entropy: 4.621891945228928,
        conditional: 1.4394527823651546,
        msttr: Some(0.54),
        hdd: Some(0.5517577953308478),
        mtld: Some(23.56902356902357),
    },
    MetricRow {
        name: "lcg150",
        ngrams: [40, 112, 139],
        entropy: 5.220234278059015,
        conditional: 1.4739133545290088,
        msttr: Some(0.66),
        hdd: Some(0.6490631448797574),
        mtld: Some(38.85867505495338),
    },
    MetricRow {
        name: "same50",
        ngrams: [1, 1, 1],
        entropy: 0.0,
        conditional: 0.0,
        msttr: Some(0.02),
        hdd: Some(0.023809523809523808),
        mtld: Some(2.0),
    },
    MetricRow { name: "aaaa", ngrams: [1, 1, 1], entropy: 0.0, conditional: 0.0, msttr: None, hdd: None, mtld: Some(2.0) },
];

/// Mean fraction of types over 10^5 random 42-token draws.
pub const HDD_MONTE_CARLO_LCG120: f64 = 0.2794604761904762;
pub const HDD_MONTE_CARLO_AB100: f64 = 0.047619047619047616;

fn close(name: &str, metric: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure!((got - want).abs() <= tol, "{name}/{metric}: got {got}, want {want} (tol {tol})");
    Ok(())
}

fn optional(name: &str, metric: &str, got: Result<f64, MetricsError>, want: Option<f64>) -> Result<(), String> {
    match (got, want) {
        (Ok(g), Some(w)) => close(name, metric, g, w, EXACT),
        (Err(_), None) => Ok(()),
        (g, w) => Err(format!("{name}/{metric}: got {g:?}, want {w:?}")),
    }
}

/// Every fixture row against the implementation; returns checks made.
pub fn check_metric_oracles() -> Result<usize, String> {
    let mut checks = 0;
    for row in &METRIC_TABLE {
        let s = corpus(row.name);
        for (n, want) in row.ngrams.iter().enumerate() {
            ensure!(unique_ngrams(&s, n + 1) == *want, "{}/{}-grams: got {}", row.name, n + 1, unique_ngrams(&s, n + 1));
        }
        close(row.name, "entropy", shannon_entropy(&s), row.entropy, EXACT)?;
        close(row.name, "conditional", conditional_bigram_entropy(&s), row.conditional, EXACT)?;
        optional(row.name, "msttr", msttr(&s, MSTTR_SEGMENT), row.msttr)?;
        optional(row.name, "hdd", hdd(&s, HDD_SAMPLE), row.hdd)?;
        optional(row.name, "mtld", mtld(&s, MTLD_THRESHOLD), row.mtld)?;
        checks += 8;
    }
    let got = hdd(&corpus("lcg120"), HDD_SAMPLE).map_err(|e| e.to_string())?;
    close("lcg120", "hdd~mc", got, HDD_MONTE_CARLO_LCG120, MONTE_CARLO)?;
    let got = hdd(&corpus("ab100"), HDD_SAMPLE).map_err(|e| e.to_string())?;
    close("ab100", "hdd~mc", got, HDD_MONTE_CARLO_AB100, MONTE_CARLO)?;
    let all_distinct: Vec<String> = (0..HDD_SAMPLE).map(|i| format!("d{i}")).collect();
    close("distinct42", "hdd", hdd(&all_distinct, HDD_SAMPLE).map_err(|e| e.to_string())?, 1.0, EXACT)?;
    ensure!(
        mtld(&corpus("distinct100"), MTLD_THRESHOLD) == Err(MetricsError::ZeroFactors),
        "distinct100 should complete no MTLD factor"
    );
    let reordered = mtld(&words("a a b b"), MTLD_THRESHOLD).map_err(|e| e.to_string())?;
    close("aabb", "mtld", reordered, 2.0, EXACT)?;
    Ok(checks + 5)
}

// ------------------------------------------------------------ fulfillment

pub const UGLY_DUCKLING_PHONE: &str = "01223439563";
pub const UGLY_DUCKLING_POSTCODE: &str = "cb41cr";
pub const ROYAL_SPICE_POSTCODE: &str = "cb27mp";
pub const GOLDEN_WOK_PHONE: &str = "01223198702";

/// Chinese, centre, expensive: matched by ugly duckling and royal spice.
pub fn restaurant_goal(reqt: &[&str], book: Option<&[(&str, &str)]>) -> UserGoal {
    let info = [("food", "chinese"), ("area", "centre"), ("pricerange", "expensive")]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let book = book.map(|b| b.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect());
    let mut goal = UserGoal::default();
    goal.domains.insert("restaurant".into(), DomainGoal { info, reqt: reqt.iter().map(|s| s.to_string()).collect(), book });
    goal
}

/// One user turn before each system turn.
pub fn fixture_log(seed: u64, goal: UserGoal, system: Vec<Vec<DialogueAct>>, reason: TerminationReason) -> DialogueLog {
    let mut turns = Vec::new();
    for acts in system {
        let turn_index = turns.len();
        turns.push(DialogueTurn {
            turn_index,
            speaker: Speaker::User,
            acts: vec![DialogueAct::bare(Intent::Greet)],
            utterance: "hello".into(),
            trace: None,
        });
        turns.push(DialogueTurn { turn_index: turn_index + 1, speaker: Speaker::System, acts, utterance: "ok".into(), trace: None });
    }
    DialogueLog::new(seed, goal, turns, reason)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expected {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub complete: bool,
    pub success: bool,
    pub booking_subtasks: usize,
    pub bookings_matched: usize,
    pub turns: usize,
}

fn inform(slot: &str, value: &str) -> DialogueAct {
    DialogueAct::inform("restaurant", slot, value)
}

fn booked(reference: &str, day: &str, name: &str) -> Vec<DialogueAct> {
    vec![
        DialogueAct::new(Intent::OfferBooked, "restaurant", REF_SLOT, reference),
        DialogueAct::new(Intent::OfferBooked, "restaurant", "book day", day),
        DialogueAct::new(Intent::OfferBooked, "restaurant", "book time", "19:15"),
        DialogueAct::new(Intent::OfferBooked, "restaurant", "people", "2"),
        inform("name", name),
    ]
}

const BOOKING: [(&str, &str); 3] = [("book day", "monday"), ("book time", "19:15"), ("people", "2")];

const TWO_THIRDS: f64 = 2.0 / 3.0;

/// Hand-scored logs over the chinese/centre/expensive goal.
pub fn fulfillment_fixtures() -> Vec<(&'static str, DialogueLog, Expected)> {
    let e = |precision, recall, f1, complete, success, booking_subtasks, bookings_matched, turns| Expected {
        precision,
        recall,
        f1,
        complete,
        success,
        booking_subtasks,
        bookings_matched,
        turns,
    };
    let bye = TerminationReason::UserBye;
    vec![
        (
            "success",
            fixture_log(
                1,
                restaurant_goal(&["phone", "postcode"], None),
                vec![
                    vec![DialogueAct::new(Intent::Recommend, "restaurant", "name", "ugly duckling")],
                    vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE), inform("postcode", UGLY_DUCKLING_POSTCODE)],
                ],
                bye,
            ),
            e(1.0, 1.0, 1.0, true, true, 0, 0, 4),
        ),
        (
            "complete_not_success",
            fixture_log(
                2,
                restaurant_goal(&["phone", "postcode"], None),
                vec![
                    vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE)],
                    vec![inform("name", "royal spice"), inform("postcode", ROYAL_SPICE_POSTCODE)],
                ],
                bye,
            ),
            e(1.0, 1.0, 1.0, true, false, 0, 0, 4),
        ),
        (
            "nooffer",
            fixture_log(
                3,
                restaurant_goal(&["phone"], None),
                vec![vec![DialogueAct::bare(Intent::NoOffer).in_domain("restaurant")]],
                bye,
            ),
            e(0.0, 0.0, 0.0, false, false, 0, 0, 2),
        ),
        (
            "turn_cap",
            fixture_log(
                4,
                restaurant_goal(&["phone", "postcode"], None),
                vec![
                    vec![DialogueAct::bare(Intent::ReqMore)],
                    vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE)],
                    vec![DialogueAct::bare(Intent::ReqMore)],
                ],
                TerminationReason::TurnCap,
            ),
            e(1.0, 0.5, TWO_THIRDS, false, false, 0, 0, 6),
        ),
        (
            "booking_mismatch",
            fixture_log(
                5,
                restaurant_goal(&["phone"], Some(&BOOKING)),
                vec![vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE)], booked("AB12", "tuesday", "ugly duckling")],
                bye,
            ),
            e(1.0, 1.0, 1.0, true, false, 1, 0, 4),
        ),
        (
            "booking_success",
            fixture_log(
                6,
                restaurant_goal(&["phone"], Some(&BOOKING)),
                vec![vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE)], booked("AB13", "monday", "ugly duckling")],
                bye,
            ),
            e(1.0, 1.0, 1.0, true, true, 1, 1, 4),
        ),
        (
            "booking_wrong_entity",
            fixture_log(
                7,
                restaurant_goal(&["phone"], Some(&BOOKING)),
                vec![vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE)], booked("AB14", "monday", "golden wok")],
                bye,
            ),
            e(1.0, 1.0, 1.0, true, false, 1, 0, 4),
        ),
        (
            "extra_postcode",
            fixture_log(
                8,
                restaurant_goal(&["phone"], None),
                vec![vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE), inform("postcode", UGLY_DUCKLING_POSTCODE)]],
                bye,
            ),
            e(0.5, 1.0, TWO_THIRDS, true, true, 0, 0, 2),
        ),
        (
            "wrong_value",
            fixture_log(9, restaurant_goal(&["phone"], None), vec![vec![inform("phone", GOLDEN_WOK_PHONE)]], bye),
            e(0.0, 0.0, 0.0, true, false, 0, 0, 2),
        ),
        (
            "no_requests",
            fixture_log(
                10,
                restaurant_goal(&[], None),
                vec![vec![DialogueAct::new(Intent::Recommend, "restaurant", "name", "ugly duckling")]],
                bye,
            ),
            e(1.0, 1.0, 1.0, true, true, 0, 0, 2),
        ),
        (
            "booking_missing",
            fixture_log(
                11,
                restaurant_goal(&["phone"], Some(&BOOKING)),
                vec![vec![inform("name", "ugly duckling"), inform("phone", UGLY_DUCKLING_PHONE)]],
                TerminationReason::TurnCap,
            ),
            e(1.0, 1.0, 1.0, false, false, 1, 0, 2),
        ),
    ]
}

/// Macro averages over all eleven fixtures, scored by hand.
pub struct ExpectedReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub complete_rate: f64,
    pub success_rate: f64,
    pub book_rate: f64,
    pub avg_turns: f64,
}

pub const FIXTURE_REPORT: ExpectedReport = ExpectedReport {
    precision: 8.5 / 11.0,
    recall: 8.5 / 11.0,
    f1: 8.5 / 11.0,
    complete_rate: 8.0 / 11.0,
    success_rate: 4.0 / 11.0,
    book_rate: 0.25,
    avg_turns: 36.0 / 11.0,
};

pub fn check_fulfillment() -> Result<usize, String> {
    let world = World::bundled();
    let fixtures = fulfillment_fixtures();
    for (name, log, want) in &fixtures {
        let s = score_dialogue(log, &world);
        let got = Expected {
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            complete: s.complete,
            success: s.success,
            booking_subtasks: s.booking_subtasks,
            bookings_matched: s.bookings_matched,
            turns: s.turns,
        };
        let floats_ok = [(got.precision, want.precision), (got.recall, want.recall), (got.f1, want.f1)]
            .iter()
            .all(|(g, w)| (g - w).abs() <= EXACT);
        let rest_ok = (got.complete, got.success, got.booking_subtasks, got.bookings_matched, got.turns)
            == (want.complete, want.success, want.booking_subtasks, want.bookings_matched, want.turns);
        ensure!(floats_ok && rest_ok, "{name}: got {got:?}, want {want:?}");
    }
    let logs: Vec<DialogueLog> = fixtures.iter().map(|(_, l, _)| l.clone()).collect();
    let r = fulfillment(&logs, &world).map_err(|e| e.to_string())?;
    let w = &FIXTURE_REPORT;
    for (metric, got, want) in [
        ("precision", r.precision, w.precision),
        ("recall", r.recall, w.recall),
        ("f1", r.f1, w.f1),
        ("complete", r.complete_rate, w.complete_rate),
        ("success", r.success_rate, w.success_rate),
        ("book", r.book_rate.unwrap_or(f64::NAN), w.book_rate),
        ("turns", r.avg_turns, w.avg_turns),
    ] {
        close("report", metric, got, want, EXACT)?;
    }
    Ok(fixtures.len())
}

// ---------------------------------------------------------- rule vs rule

pub const RULE_DIALOGUES: usize = 100;
pub const MIN_SUCCESS: f64 = 0.90;
pub const MAX_AVG_TURNS: f64 = 15.0;

pub fn agenda_logs(dialogues: usize, seed: u64) -> Vec<DialogueLog> {
    let config = ExperimentConfig { simulator: SimulatorKind::Agenda, dialogues, seed, ..Default::default() };
    let runner = SessionRunner::with_backends(config, None, None).expect("agenda runner");
    let mut logs = Vec::new();
    runner.run_batch(&runner.seeds(), |l| logs.push(l));
    logs
}

/// Agenda simulator against the system stub; returns (success, avg turns).
pub fn check_rule_vs_rule() -> Result<(f64, f64), String> {
    let world = World::bundled();
    let logs = agenda_logs(RULE_DIALOGUES, 0);
    ensure!(logs.len() == RULE_DIALOGUES, "expected {RULE_DIALOGUES} logs, got {}", logs.len());
    let r = fulfillment(&logs, &world).map_err(|e| e.to_string())?;
    ensure!(
        r.success_rate >= MIN_SUCCESS && r.avg_turns <= MAX_AVG_TURNS,
        "success {:.3} (min {MIN_SUCCESS}), avg turns {:.2} (max {MAX_AVG_TURNS})",
        r.success_rate,
        r.avg_turns
    );
    Ok((r.success_rate, r.avg_turns))
}

// ------------------------------------------------------------ duet loop

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Accept,
    Reject,
    /// The draft fails ontology validation, so no verifier call happens.
    Invalid,
}

pub const EVENTS: [Event; 3] = [Event::Accept, Event::Reject, Event::Invalid];

const VALID_DRAFT: [&str; 4] = ["request", "restaurant", "phone", ""];
const INVALID_DRAFT: [&str; 4] = ["request", "restaurant", "stars", ""];

pub fn all_scripts(len: usize) -> Vec<Vec<Event>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|s| {
                EVENTS.iter().map(move |e| {
                    let mut s = s.clone();
                    s.push(*e);
                    s
                })
            })
            .collect();
    }
    out
}

pub fn reject_reason(iteration: usize) -> String {
    format!("reason number {iteration}")
}

pub struct DuetRun {
    pub result: Result<TurnTrace, TurnError>,
    pub generator: Arc<ScriptedBackend>,
    pub verifier: Arc<ScriptedBackend>,
}

pub fn forge() -> Arc<PromptForge> {
    let world = World::bundled();
    Arc::new(PromptForge::new(TemplateSet::bundled(), Arc::new(world.ontology.clone())))
}

/// Runs one user turn where iteration `i` plays `script[i]`. The backends
/// hold exactly the responses the expected number of iterations consumes.
pub fn run_script(script: &[Event], config: LoopConfig) -> DuetRun {
    let max = if config.verifier_enabled { config.max_iterations as usize } else { 1 };
    let used = match script.iter().take(max).position(|e| *e == Event::Accept || !config.verifier_enabled) {
        Some(p) => p + 1,
        None => max.min(script.len()),
    };
    let mut gen = Vec::new();
    let mut ver = Vec::new();
    for (i, e) in script.iter().take(used).enumerate() {
        let draft = if *e == Event::Invalid { INVALID_DRAFT } else { VALID_DRAFT };
        gen.extend(draft.iter().map(|s| s.to_string()));
        match e {
            Event::Accept => ver.push("ACCEPT".to_string()),
            Event::Reject => ver.push(format!("REJECT R{}: {}", i % 5 + 1, reject_reason(i))),
            Event::Invalid => {}
        }
    }
    gen.push("I need the phone number.".into());
    gen.push("Could I have the phone number?".into());
    let generator = Arc::new(ScriptedBackend::new(gen));
    let verifier = Arc::new(ScriptedBackend::new(ver));
    let f = forge();
    let g = ActGenerator::new(generator.clone() as Arc<dyn CompletionBackend>, f.clone(), RequirementSet::default_generator());
    let v = Verifier::new(verifier.clone(), f, RequirementSet::default_verifier());
    let sim = DualModelSimulator::new(restaurant_goal(&["phone"], None), g, Some(v), config);
    let result = sim.next_user_turn(&DialogueContext::default());
    DuetRun { result, generator, verifier }
}

fn expected_feedback(event: Event, iteration: usize) -> Vec<String> {
    match event {
        Event::Reject => vec![format!("requirement R{}: {}", iteration % 5 + 1, reject_reason(iteration))],
        Event::Invalid => vec!["requirement ontology:".into(), "unknown_slot".into()],
        Event::Accept => Vec::new(),
    }
}

/// Checks one script against the loop's contract.
pub fn check_script(script: &[Event], policy: ExhaustionPolicy) -> Result<(), String> {
    let max = script.len();
    let config = LoopConfig { max_iterations: max as u32, verifier_enabled: true, on_exhaustion: policy };
    let run = run_script(script, config);
    let first_accept = script.iter().position(|e| *e == Event::Accept);
    let used = first_accept.map_or(max, |p| p + 1);
    let exhausted = first_accept.is_none();
    let any_valid = script.iter().any(|e| *e != Event::Invalid);
    let verifier_calls = script[..used].iter().filter(|e| **e != Event::Invalid).count();
    let tag = format!("{script:?} {policy:?}");

    ensure!(run.verifier.calls() == verifier_calls, "{tag}: verifier calls {} != {verifier_calls}", run.verifier.calls());
    ensure!(run.verifier.calls() <= max, "{tag}: verifier over budget");
    let realised = match (&run.result, exhausted, policy, any_valid) {
        (Err(TurnError::TurnAborted { iterations }), true, ExhaustionPolicy::AbortTurn, _) => {
            ensure!(*iterations as usize == max, "{tag}: aborted after {iterations}");
            false
        }
        (Err(TurnError::NoValidDraft { iterations }), true, ExhaustionPolicy::UseLastDraft, false) => {
            ensure!(*iterations as usize == max, "{tag}: no valid draft after {iterations}");
            false
        }
        (Ok(trace), _, _, _) if !exhausted || (policy == ExhaustionPolicy::UseLastDraft && any_valid) => {
            ensure!(trace.iterations_used as usize == used, "{tag}: used {} != {used}", trace.iterations_used);
            ensure!(trace.iterations.len() == used, "{tag}: trace length");
            ensure!(trace.exhausted == exhausted, "{tag}: exhausted flag");
            ensure!(trace.final_acts == vec![DialogueAct::request("restaurant", "phone")], "{tag}: final acts {:?}", trace.final_acts);
            for (i, (it, e)) in trace.iterations.iter().zip(script).enumerate() {
                ensure!(it.draft.attempt_index as usize == i + 1, "{tag}: attempt index");
                ensure!(it.violations.is_empty() == (*e != Event::Invalid), "{tag}: violations at {i}");
                ensure!(
                    it.verdict.as_ref().map(|v| v.accepted()) == match e {
                        Event::Accept => Some(true),
                        Event::Reject => Some(false),
                        Event::Invalid => None,
                    },
                    "{tag}: verdict at {i}"
                );
            }
            let u = trace.utterance.as_ref().ok_or_else(|| format!("{tag}: no utterance"))?;
            ensure!(u.enhanced == "Could I have the phone number?", "{tag}: utterance {:?}", u.enhanced);
            true
        }
        (other, ..) => return Err(format!("{tag}: unexpected outcome {other:?}")),
    };

    let prompts = run.generator.transcript();
    let step_calls = 4 * used;
    ensure!(prompts.len() == step_calls + if realised { 2 } else { 0 }, "{tag}: generator calls {}", prompts.len());
    ensure!(prompts.len() <= 4 * max + 2, "{tag}: generator over budget");
    let unused = if realised { 0 } else { 2 };
    ensure!(run.generator.remaining() == unused, "{tag}: {} unused generator responses", run.generator.remaining());
    ensure!(prompts[..4].iter().all(|p| !p.user_text.contains("[FEEDBACK]")), "{tag}: feedback in first draft");
    for i in 1..used {
        let wanted = expected_feedback(script[i - 1], i - 1);
        for p in &prompts[4 * i..4 * i + 4] {
            ensure!(p.user_text.matches("[FEEDBACK]").count() == 1, "{tag}: iteration {} lacks one feedback section", i + 1);
            for w in &wanted {
                ensure!(p.user_text.contains(w.as_str()), "{tag}: iteration {} step prompt lacks {w:?}", i + 1);
            }
            if i >= 2 && script[i - 2] == Event::Reject {
                let stale = reject_reason(i - 2);
                ensure!(!p.user_text.contains(&stale), "{tag}: stale feedback {stale:?} at iteration {}", i + 1);
            }
        }
    }
    Ok(())
}

/// With verification off the first draft is final whatever the script says.
pub fn check_script_without_verifier(script: &[Event]) -> Result<(), String> {
    let config = LoopConfig { max_iterations: script.len() as u32, verifier_enabled: false, ..Default::default() };
    let run = run_script(script, config);
    let tag = format!("{script:?} without verifier");
    ensure!(run.verifier.calls() == 0, "{tag}: verifier called");
    match (&run.result, script[0]) {
        (Err(TurnError::Generation(GenerationError::InvalidActs { .. })), Event::Invalid) => {
            ensure!(run.generator.calls() == 4, "{tag}: generator calls {}", run.generator.calls());
        }
        (Ok(trace), e) if e != Event::Invalid => {
            ensure!(trace.iterations_used == 1 && trace.iterations.len() == 1, "{tag}: {} iterations", trace.iterations_used);
            ensure!(trace.iterations[0].verdict.is_none(), "{tag}: verdict present");
            ensure!(!trace.exhausted, "{tag}: marked exhausted");
            ensure!(run.generator.calls() == 6, "{tag}: generator calls {}", run.generator.calls());
        }
        (other, _) => return Err(format!("{tag}: unexpected outcome {other:?}")),
    }
    Ok(())
}

/// Every script of length 1..=4 under both exhaustion policies and with the
/// verifier disabled; returns scripts checked.
pub fn check_duet_exhaustive() -> Result<usize, String> {
    let mut n = 0;
    for len in 1..=4 {
        for script in all_scripts(len) {
            check_script(&script, ExhaustionPolicy::UseLastDraft)?;
            check_script(&script, ExhaustionPolicy::AbortTurn)?;
            check_script_without_verifier(&script)?;
            n += 1;
        }
    }
    Ok(n)
}

// ---------------------------------------------------------------- codec

pub const CODEC_CASES: u32 = 10_000;

pub fn known_intent() -> impl Strategy<Value = Intent> {
    proptest::sample::select(Intent::ALL.to_vec())
}

pub fn act_strategy() -> impl Strategy<Value = DialogueAct> {
    (known_intent(), "[a-z]{1,10}", "[a-z ]{0,10}", "\\PC{0,16}").prop_map(|(i, d, s, v)| DialogueAct::new(i, &d, &s, &v))
}

pub fn act_list_strategy() -> impl Strategy<Value = Vec<DialogueAct>> {
    proptest::collection::vec(act_strategy(), 1..6)
}

/// Text biased towards the codec's syntax so fuzzing reaches deep states.
pub fn fuzz_text_strategy() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("[".to_string()),
        Just("]".to_string()),
        Just(",".to_string()),
        Just("'".to_string()),
        Just("\"".to_string()),
        Just("\\".to_string()),
        Just(" ".to_string()),
        "[a-z]{1,4}",
        "\\PC{1,3}",
    ];
    proptest::collection::vec(piece, 0..40).prop_map(|v| v.concat())
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(PtConfig { cases, failure_persistence: None, ..PtConfig::default() })
}

pub fn check_codec_roundtrip(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&act_list_strategy(), |acts| {
            let text = render_act_list(&acts).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let back = parse_act_list(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(&back, &acts);
            for (a, b) in back.iter().zip(&acts) {
                prop_assert_eq!(&a.value, &b.value);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn check_parser_totality(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&fuzz_text_strategy(), |text| {
            let outcome = std::panic::catch_unwind(|| parse_act_list(&text));
            prop_assert!(outcome.is_ok(), "parser panicked on {:?}", text);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

// ------------------------------------------------------------- ablation

pub fn sample_context(mode: RenderMode) -> DialogueContext {
    let mut ctx = DialogueContext::new(mode);
    ctx.push(Speaker::User, vec![DialogueAct::inform("restaurant", "pricerange", "cheap")], "I need a cheap restaurant.".into());
    ctx.push(
        Speaker::System,
        vec![DialogueAct::new(Intent::Recommend, "restaurant", "name", "the nirala")],
        "How about the nirala?".into(),
    );
    ctx
}

pub const UTTERANCE_LINE: &str = "USER: I need a cheap restaurant.";
pub const ACTS_LINE: &str = "USER: [['inform', 'restaurant', 'pricerange', 'cheap']]";

pub struct PromptPair {
    pub generator: String,
    pub verifier: String,
}

pub fn prompts_with(ablation: Ablation, mode: RenderMode) -> PromptPair {
    let world = World::bundled();
    let forge = PromptForge::new(TemplateSet::bundled(), Arc::new(world.ontology.clone())).with_ablation(ablation);
    let goal = restaurant_goal(&["phone"], None);
    let ctx = sample_context(mode);
    let partial = vec![PartialAct { intent: Some(Intent::Request), ..Default::default() }];
    let generator = forge
        .generator_step_prompt(&goal, &ctx, &RequirementSet::default_generator(), CotStep::Domain, &partial, None)
        .expect("prompt builds")
        .user_text;
    let verifier = forge
        .verifier_prompt(&goal, &ctx, &RequirementSet::default_verifier(), &[DialogueAct::request("restaurant", "phone")])
        .user_text;
    PromptPair { generator, verifier }
}

/// The `[HEADER]` section of `text`, up to the blank line that ends it.
pub fn section<'a>(text: &'a str, header: &str) -> Option<&'a str> {
    let start = text.find(header)?;
    let rest = &text[start..];
    Some(rest.find("\n\n").map_or(rest, |end| &rest[..end]))
}

fn without(text: &str, header: &str) -> Option<String> {
    let s = section(text, header)?;
    Some(text.replacen(&format!("{s}\n\n"), "", 1))
}

pub fn check_ablation() -> Result<usize, String> {
    let base = prompts_with(Ablation::default(), RenderMode::Utterances);
    let mut checks = 0;
    for (ablation, header, kept) in [
        (Ablation { omit_goal: true, omit_history: false }, "[GOAL]", "[CONTEXT]"),
        (Ablation { omit_goal: false, omit_history: true }, "[CONTEXT]", "[GOAL]"),
    ] {
        let ablated = prompts_with(ablation, RenderMode::Utterances);
        for (label, full, cut) in [("generator", &base.generator, &ablated.generator), ("verifier", &base.verifier, &ablated.verifier)] {
            ensure!(full.contains(header) && !cut.contains(header), "{label} {header}: section not dropped");
            ensure!(cut.contains(kept) && cut.contains("[REQUIREMENTS]"), "{label} {header}: other sections lost");
            ensure!(without(full, header).as_deref() == Some(cut.as_str()), "{label} {header}: more than one section changed");
            checks += 1;
        }
    }
    let utterances = prompts_with(Ablation::default(), RenderMode::Utterances);
    let acts = prompts_with(Ablation::default(), RenderMode::Acts);
    for (label, u, a) in [("generator", &utterances.generator, &acts.generator), ("verifier", &utterances.verifier, &acts.verifier)] {
        ensure!(u.contains(UTTERANCE_LINE) && !u.contains(ACTS_LINE), "{label}: utterance-mode context");
        ensure!(a.contains(ACTS_LINE) && !a.contains(UTTERANCE_LINE), "{label}: act-mode context");
        ensure!(section(u, "[CONTEXT]") != section(a, "[CONTEXT]"), "{label}: context sections equal");
        ensure!(without(u, "[CONTEXT]") == without(a, "[CONTEXT]"), "{label}: render mode touched other sections");
        checks += 1;
    }
    Ok(checks)
}

// ------------------------------------------------------------ determinism

fn pick(digest: &str, salt: usize, n: usize) -> usize {
    let start = (salt * 8) % (digest.len() - 8);
    (u64::from_str_radix(&digest[start..start + 8], 16).expect("hex digest") % n as u64) as usize
}

fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    let start = text.find(marker)? + marker.len();
    let rest = &text[start..];
    Some(rest.split('\n').next().unwrap_or(rest).trim_end_matches('.'))
}

fn per_act(list: &str) -> Vec<Vec<&str>> {
    list.split("; ")
        .map(|item| {
            let body = item.split_once(": ").map_or(item, |(_, b)| b);
            body.split(", ").map(str::trim).collect()
        })
        .collect()
}

/// A deterministic stand-in for a chat model that reads the prompt format.
pub fn heuristic_reply(req: &CompletionRequest) -> String {
    let digest = request_digest(req);
    let text = &req.user_text;
    if req.system_text.contains("reviewer") {
        return if pick(&digest, 0, 3) == 0 { "REJECT R2: the draft is too vague".into() } else { "ACCEPT".into() };
    }
    if let Some(sentence) = after(text, "[SENTENCE]\n") {
        return sentence.to_string();
    }
    if let Some(acts) = after(text, "[END EXAMPLE]\n") {
        let acts = parse_act_list(acts).unwrap_or_default();
        let parts: Vec<String> = acts
            .iter()
            .map(|a| match a.intent {
                Intent::Inform | Intent::Book => format!("{} {}", a.slot, a.value),
                Intent::Request => format!("what is the {}", a.slot),
                _ => a.intent.to_string(),
            })
            .collect();
        return format!("I would like {}.", parts.join(" and "));
    }
    if let Some(options) = after(text, "Choose from: ") {
        if text.contains("Decide the intent") {
            if text.contains(usersim::prompts::EMPTY_CONTEXT) {
                return "inform".into();
            }
            return ["inform", "request", "inform, request", "book", "bye"][pick(&digest, 1, 5)].into();
        }
        let goal = section(text, "[GOAL]").unwrap_or_default();
        let partial = section(text, "[DECIDED SO FAR]").unwrap_or_default();
        if ["intent=bye", "intent=thank", "intent=greet"].iter().any(|b| partial.contains(b)) {
            return "general".into();
        }
        return options
            .split(", ")
            .find(|d| *d != "general" && goal.contains(d))
            .unwrap_or("general")
            .to_string();
    }
    if let Some(list) = after(text, "Valid slots: ") {
        let picks: Vec<&str> = per_act(list).iter().enumerate().map(|(i, s)| s[pick(&digest, 2 + i, s.len())]).collect();
        return picks.join(", ");
    }
    if let Some(list) = after(text, "Known values: ") {
        let picks: Vec<&str> = per_act(list)
            .iter()
            .enumerate()
            .map(|(i, v)| if v == &["(empty)"] { "" } else { v[pick(&digest, 6 + i, v.len())] })
            .collect();
        return picks.join(" | ");
    }
    "ACCEPT".into()
}

pub const DETERMINISM_DIALOGUES: usize = 8;

pub fn duet_config(out: &Path, cassette: Option<&Path>) -> ExperimentConfig {
    ExperimentConfig {
        simulator: SimulatorKind::Duet,
        generator: cassette.map(|c| BackendSpec::Replay { cassette: c.to_path_buf() }),
        dialogues: DETERMINISM_DIALOGUES,
        seed: 40,
        max_user_turns: 6,
        parallelism: 4,
        output_dir: out.to_path_buf(),
        ..Default::default()
    }
}

/// Records a cassette through the heuristic model into `dir`.
pub fn record_cassette(dir: &Path) -> Result<PathBuf, String> {
    let cassette = dir.join("cassette.jsonl");
    let inner: Arc<dyn CompletionBackend> = Arc::new(FnBackend::new(heuristic_reply));
    let backend: Arc<dyn CompletionBackend> = Arc::new(CassetteBackend::record(inner, &cassette).map_err(|e| e.to_string())?);
    let runner = SessionRunner::with_backends(duet_config(&dir.join("record"), None), Some(backend.clone()), Some(backend))
        .map_err(|e| e.to_string())?;
    let summary = simulate_with(runner).map_err(|e| e.to_string())?;
    ensure!(summary.errors == 0, "recording run had {} errored dialogues", summary.errors);
    Ok(cassette)
}

/// Two replays of one cassette write byte-identical logs and manifests,
/// which also match the recording run's log.
pub fn check_determinism(dir: &Path) -> Result<usize, String> {
    let cassette = record_cassette(dir)?;
    let mut runs = Vec::new();
    for name in ["replay-a", "replay-b"] {
        let out = dir.join(name);
        let summary = cmd_simulate(duet_config(&out, Some(&cassette))).map_err(|e| e.to_string())?;
        ensure!(summary.errors == 0, "{name}: {} errored dialogues", summary.errors);
        ensure!(summary.dialogues == DETERMINISM_DIALOGUES, "{name}: {} dialogues", summary.dialogues);
        let log = std::fs::read(out.join(LOG_FILE)).map_err(|e| e.to_string())?;
        let manifest = std::fs::read(out.join(MANIFEST_FILE)).map_err(|e| e.to_string())?;
        runs.push((log, manifest));
    }
    ensure!(runs[0].0 == runs[1].0, "replayed logs differ");
    ensure!(runs[0].1 == runs[1].1, "replayed manifests differ");
    let recorded = std::fs::read(dir.join("record").join(LOG_FILE)).map_err(|e| e.to_string())?;
    ensure!(recorded == runs[0].0, "replayed log differs from the recording");
    Ok(runs[0].0.len())
}
