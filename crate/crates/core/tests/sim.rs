use std::collections::BTreeMap;

use agentvote_core::sim::{
    exact_outvote_probability, generate_corpus, hallucination_audit, majority_accuracy_binary, simulate_response,
    HallucinationKind, HallucinationRates, SimAgentProfile, SyntheticCase, REFERENCE_COMMITTEE,
};
use agentvote_core::vote::{decide, tally, Denominator};
use agentvote_core::{repair_and_extract, AgentVote, FinalLabel, LabelId, TaskSchema};

const AF600_MIX: [f64; 3] = [0.867, 0.087, 0.047];

fn run(
    profiles: &[SimAgentProfile],
    corpus: &[SyntheticCase],
    k: u32,
    s: &TaskSchema,
) -> (Vec<AgentVote>, BTreeMap<String, FinalLabel>) {
    let mut all = Vec::new();
    let mut outcomes = BTreeMap::new();
    for case in corpus {
        let votes: Vec<AgentVote> = profiles
            .iter()
            .map(|p| repair_and_extract(&simulate_response(p, case, s).text, &case.case_id, &p.agent_id, s).annotation)
            .collect();
        let t = tally(&votes, s).unwrap();
        outcomes.insert(case.case_id.clone(), decide(&case.case_id, &t, k, Denominator::Committee).unwrap().outcome);
        all.extend(votes);
    }
    (all, outcomes)
}

fn truth_of(corpus: &[SyntheticCase]) -> BTreeMap<String, LabelId> {
    corpus.iter().map(|c| (c.case_id.clone(), c.truth)).collect()
}

#[test]
fn binary_majority_matches_enumeration_and_beats_individual() {
    for step in 1..50 {
        let p = 0.5 + step as f64 / 100.0;
        let mut brute = 0.0;
        for mask in 0u32..128 {
            let correct = mask.count_ones();
            if correct >= 4 {
                brute += p.powi(correct as i32) * (1.0 - p).powi(7 - correct as i32);
            }
        }
        let exact = majority_accuracy_binary(7, p);
        assert!((exact - brute).abs() < 1e-12, "p={p}");
        assert!(exact >= p, "p={p}");
    }
}

#[test]
fn responses_are_deterministic_and_schedule_free() {
    let s = TaskSchema::ecg_af();
    let corpus = generate_corpus(300, &AF600_MIX, 1, &s).unwrap();
    let mut p = SimAgentProfile::from_preset(&REFERENCE_COMMITTEE[1], &s, 11).unwrap();
    p.malformed_json_rate = 0.3;
    let forward: Vec<String> = corpus.iter().map(|c| simulate_response(&p, c, &s).text).collect();
    let backward: Vec<String> = corpus.iter().rev().map(|c| simulate_response(&p, c, &s).text).collect();
    assert!(forward.iter().eq(backward.iter().rev()));
}

#[test]
fn all_af_mix_is_filter_relevant_wording() {
    let s = TaskSchema::ecg_af();
    let corpus = generate_corpus(200, &[1.0, 0.0, 0.0], 3, &s).unwrap();
    let af = s.label_id("AF").unwrap();
    for c in &corpus {
        assert_eq!(c.truth, af);
        let t = &c.report_text;
        assert!(
            ["fibrillation", "flutter", "AFib", "AF"].iter().any(|w| t.contains(w)),
            "{t}"
        );
    }
}

#[test]
fn zero_rates_give_an_all_zero_audit() {
    let s = TaskSchema::ecg_af();
    let corpus = generate_corpus(500, &AF600_MIX, 2, &s).unwrap();
    let profiles: Vec<_> = (0..7)
        .map(|i| SimAgentProfile::with_accuracy(format!("a{i}"), &s, 0.9, i).unwrap())
        .collect();
    let (votes, outcomes) = run(&profiles, &corpus, 4, &s);
    let audit = hallucination_audit(&votes, &outcomes, &truth_of(&corpus), &s);
    assert_eq!(audit.total.injected, 0);
    assert_eq!(audit.total.wrong_vote, 0);
    assert_eq!(audit.total.outvoted, 0);
}

#[test]
fn single_agent_never_outvotes_itself() {
    let s = TaskSchema::ecg_af();
    let corpus = generate_corpus(2000, &AF600_MIX, 5, &s).unwrap();
    let rates = HallucinationRates { fabricated_fact: 0.05, self_contradiction: 0.05, ..Default::default() };
    let p = SimAgentProfile::calibrated("solo", &s, 0.95, rates, 9).unwrap();
    let (votes, outcomes) = run(&[p], &corpus, 1, &s);
    let audit = hallucination_audit(&votes, &outcomes, &truth_of(&corpus), &s);
    assert!(audit.total.wrong_vote > 0);
    assert_eq!(audit.total.outvoted_fraction(), Some(0.0));
}

#[test]
fn injected_events_are_conserved() {
    let s = TaskSchema::ecg_af();
    let corpus = generate_corpus(1500, &AF600_MIX, 8, &s).unwrap();
    let profiles: Vec<_> = REFERENCE_COMMITTEE
        .iter()
        .map(|p| SimAgentProfile::from_preset(p, &s, 21).unwrap())
        .collect();
    let mut expected: BTreeMap<&str, u64> = BTreeMap::new();
    for p in &profiles {
        for c in &corpus {
            if let Some(k) = simulate_response(p, c, &s).hallucination {
                *expected.entry(k.name()).or_default() += 1;
            }
        }
    }
    let (votes, outcomes) = run(&profiles, &corpus, 4, &s);
    let audit = hallucination_audit(&votes, &outcomes, &truth_of(&corpus), &s);
    for kind in HallucinationKind::ALL {
        let got = audit.per_kind[kind.name()].injected;
        assert_eq!(got, expected.get(kind.name()).copied().unwrap_or(0), "{}", kind.name());
    }
    assert!(audit.total.outvoted <= audit.total.wrong_vote);
    assert!(audit.total.wrong_vote <= audit.total.injected);
}

#[test]
fn outvote_probability_edge_cases() {
    let af = LabelId::from_index(0);
    let non = LabelId::from_index(1);
    let sure = vec![1.0, 0.0, 0.0];
    // six agents certain of the truth always beat one dissenter
    assert!((exact_outvote_probability(&vec![sure.clone(); 6], af, non, 4) - 1.0).abs() < 1e-15);
    // nobody else: the wrong vote wins
    assert_eq!(exact_outvote_probability(&[], af, non, 0), 0.0);
    // one other agent ties at best
    assert_eq!(exact_outvote_probability(&[sure], af, non, 0), 0.0);
}
