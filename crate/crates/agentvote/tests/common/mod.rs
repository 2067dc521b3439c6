//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use agentvote_core::{FinalLabel, LabelId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One pattern element: any char of `set`, repeated `min..=max` times.
#[derive(Clone, Copy)]
struct Piece {
    set: &'static [char],
    min: usize,
    max: usize,
}

const fn one(set: &'static [char]) -> Piece {
    Piece { set, min: 1, max: 1 }
}

const F: &[char] = &['f', 'F'];
const IA: &[char] = &['i', 'a'];
const TCS: &[char] = &['t', 'c', 's'];
const OO: &[char] = &['o', 'ó'];

fn lit(s: &'static str) -> Vec<Piece> {
    // Leak one-char sets so pieces can hold 'static slices.
    s.chars()
        .map(|c| one(Box::leak(vec![c].into_boxed_slice())))
        .collect()
}

fn seq(parts: Vec<Vec<Piece>>) -> Vec<Piece> {
    parts.into_iter().flatten().collect()
}

/// The relevance language written out by hand: each alternative as a list
/// of pieces, matched by exhaustive backtracking below.
fn alternatives() -> Vec<Vec<Piece>> {
    vec![
        // variant spellings of fibrillation
        seq(vec![
            vec![one(F), one(IA)],
            lit("br"),
            vec![one(IA), Piece { set: &['l'], min: 1, max: 2 }],
            lit("a"),
            vec![one(TCS)],
            lit("i"),
            vec![one(OO)],
            lit("n"),
        ]),
        // fibri with trailing dots
        seq(vec![vec![one(F)], lit("ibri"), vec![Piece { set: &['.'], min: 0, max: usize::MAX }]]),
        seq(vec![lit("A"), vec![one(F)], lit("ib")]),
        lit("AF"),
        // flutter side
        seq(vec![vec![one(F)], lit("lutter")]),
        lit("AFL"),
    ]
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn boundary(chars: &[char], i: usize) -> bool {
    let before = i > 0 && is_word(chars[i - 1]);
    let after = i < chars.len() && is_word(chars[i]);
    before != after
}

fn ends(pieces: &[Piece], chars: &[char], at: usize, out: &mut Vec<usize>) {
    let Some((p, rest)) = pieces.split_first() else {
        out.push(at);
        return;
    };
    let mut pos = at;
    let mut count = 0;
    loop {
        if count >= p.min {
            ends(rest, chars, pos, out);
        }
        if count == p.max || pos >= chars.len() || !p.set.contains(&chars[pos]) {
            break;
        }
        pos += 1;
        count += 1;
    }
}

/// Independent decision procedure for the production relevance filter.
pub fn reference_relevant(text: &str) -> bool {
    let chars: Vec<char> = text.chars().collect();
    let alts = alternatives();
    for start in 0..=chars.len() {
        if !boundary(&chars, start) {
            continue;
        }
        for alt in &alts {
            let mut out = Vec::new();
            ends(alt, &chars, start, &mut out);
            if out.into_iter().any(|e| e > start && boundary(&chars, e)) {
                return true;
            }
        }
    }
    false
}

const FRAGMENTS: [&str; 30] = [
    "fibrillation", "fabrillacion", "fibrilación", "fibrilation", "fibrillasion", "fibri", "fibri.", "fibri..",
    "Fibri", "AF", "AFib", "Afib", "AFIB", "AFL", "AFFECT", "flutter", "Flutter", "flutters", "defibrillator",
    "atrial", "a", "F", "f", "_", "ó", "1", "ibr", "illa", "ation", "lutter",
];
const SEPARATORS: [&str; 8] = [" ", "", ".", ",", "-", "\n", "_", "/"];

/// Short strings built from filter-relevant fragments and near misses.
pub fn random_filter_text(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    for _ in 0..rng.random_range(1..6) {
        s.push_str(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
        s.push_str(SEPARATORS[rng.random_range(0..SEPARATORS.len())]);
    }
    s
}

/// Brute-force ensemble rule: the unique most-voted label if it has at
/// least `k` votes, else Review. `None` entries are invalid votes.
pub fn brute_decide(votes: &[Option<usize>], n_labels: usize, k: u32) -> FinalLabel {
    let mut counts = vec![0u32; n_labels];
    for v in votes.iter().flatten() {
        counts[*v] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let winners: Vec<usize> = (0..n_labels).filter(|&l| counts[l] == max && max > 0).collect();
    if winners.len() == 1 && max >= k {
        FinalLabel::Valid(LabelId::from_index(winners[0]))
    } else {
        FinalLabel::Review
    }
}

pub fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// A simulated ECG config with `n_agents` agents written into `dir`.
pub fn sim_config(dir: &Path, n_cases: usize, n_agents: usize, min_votes: u32, seed: u64) -> PathBuf {
    let prompt = assets().join("prompts").join("ecg_af.yaml");
    let committee = agentvote_core::sim::REFERENCE_COMMITTEE;
    let mut yaml = format!(
        "task: {{builtin: ecg_af}}\n\
         prompt: {}\n\
         synthetic_corpus: {{n: {n_cases}, mix: [0.867, 0.087, 0.047], seed: {seed}}}\n\
         run_dir: run\n\
         voting: {{min_votes: {min_votes}, sweep: [0, {min_votes}, {n_agents}]}}\n\
         concurrency: {{agents: 3, requests_per_agent: 2}}\n\
         agents:\n",
        prompt.display()
    );
    for i in 0..n_agents {
        let p = &committee[i % committee.len()];
        let r = p.hallucination_rates();
        yaml.push_str(&format!(
            "  - agent_id: {}-{i}\n    backend: simulated\n    simulation:\n      seed: {}\n      accuracy: {}\n      malformed_json_rate: 0.05\n      hallucination: {{fabricated_fact: {}, uncertainty_confusion: {}, misunderstanding: {}, self_contradiction: {}}}\n",
            p.agent_id,
            seed * 100 + i as u64,
            p.accuracy,
            r.fabricated_fact,
            r.uncertainty_confusion,
            r.misunderstanding,
            r.self_contradiction
        ));
    }
    let path = dir.join("config.yaml");
    std::fs::write(&path, yaml).unwrap();
    path
}
