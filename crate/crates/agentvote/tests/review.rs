use agentvote::corpus::CorpusRecord;
use agentvote::pipeline::{enqueue_flagged, final_rows};
use agentvote::prefilter::CorpusPartition;
use agentvote::review::{ReviewError, ReviewReason, ReviewStatus, ReviewStore};
use agentvote::tables::{FinalRow, Source};
use agentvote_core::vote::{sweep, DecisionTable, Denominator};
use agentvote_core::{AgentVote, TaskSchema};
use tempfile::TempDir;

/// Seven raw votes per case; `None` is an invalid vote.
const CASES: [(&str, [Option<&str>; 7]); 7] = [
    ("tie", [Some("AF"), Some("AF"), Some("AF"), Some("Not AF"), Some("Not AF"), Some("Not AF"), None]),
    (
        "short",
        [Some("AF"), Some("AF"), Some("AF"), Some("Not AF"), Some("Not AF"), Some("Possible AF"), Some("Not Specified")],
    ),
    (
        "three_way",
        [Some("AF"), Some("AF"), Some("Not AF"), Some("Not AF"), Some("Possible AF"), Some("Possible AF"), None],
    ),
    ("unsure5", [Some("Possible AF"); 7]),
    (
        "unsure4",
        [Some("Not Specified"), Some("Not Specified"), Some("Possible AF"), Some("Possible AF"), Some("AF"), Some("AF"), None],
    ),
    ("clear_af", [Some("AF"); 7]),
    ("clear_non", [Some("Not AF"), Some("Not AF"), Some("Not AF"), Some("Not AF"), Some("Not AF"), Some("Not AF"), None]),
];

struct Fixture {
    _dir: TempDir,
    path: std::path::PathBuf,
    schema: TaskSchema,
    table: DecisionTable,
    cases: Vec<(String, Vec<AgentVote>)>,
    corpus: Vec<CorpusRecord>,
}

fn fixture() -> Fixture {
    let schema = TaskSchema::ecg_af();
    let cases: Vec<(String, Vec<AgentVote>)> = CASES
        .iter()
        .map(|(id, raws)| {
            let votes = raws
                .iter()
                .enumerate()
                .map(|(i, r)| match r {
                    Some(r) => AgentVote::valid(*id, format!("a{i}"), schema.raw_id(r).unwrap(), None, "", false).unwrap(),
                    None => AgentVote::invalid(*id, format!("a{i}"), "unparseable output"),
                })
                .collect();
            (id.to_string(), votes)
        })
        .collect();
    let table = sweep(&cases, &[4], &schema, Denominator::Committee).unwrap().remove(0);
    let corpus = CASES
        .iter()
        .map(|(id, _)| CorpusRecord { case_id: id.to_string(), report_text: format!("report {id}") })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("review.jsonl");
    Fixture { _dir: dir, path, schema, table, cases, corpus }
}

impl Fixture {
    fn open(&self) -> ReviewStore {
        ReviewStore::open(&self.path, self.schema.clone()).unwrap()
    }

    fn filled(&self) -> ReviewStore {
        let mut store = self.open();
        enqueue_flagged(&mut store, &self.schema, &self.table, &self.cases, &self.corpus).unwrap();
        store
    }

    fn machine(&self) -> Vec<FinalRow> {
        let part = CorpusPartition {
            relevant_ids: self.corpus.iter().map(|r| r.case_id.clone()).collect(),
            irrelevant_ids: Vec::new(),
        };
        final_rows(&self.schema, &self.corpus, &part, &self.table).unwrap()
    }
}

#[test]
fn review_and_flag_outcomes_are_queued_once() {
    let f = fixture();
    let mut store = f.open();
    assert_eq!(enqueue_flagged(&mut store, &f.schema, &f.table, &f.cases, &f.corpus).unwrap(), 5);
    assert_eq!(enqueue_flagged(&mut store, &f.schema, &f.table, &f.cases, &f.corpus).unwrap(), 0);
    let ids: Vec<&str> = store.queue(None).iter().map(|it| it.case_id.as_str()).collect();
    assert_eq!(ids, ["tie", "short", "three_way", "unsure5", "unsure4"]);

    let reason = |id: &str| store.get(id).unwrap().reason;
    assert_eq!(reason("tie"), ReviewReason::Tie);
    assert_eq!(reason("three_way"), ReviewReason::Tie);
    assert_eq!(reason("short"), ReviewReason::BelowThreshold);
    assert_eq!(reason("unsure5"), ReviewReason::FlagLabel);
    assert_eq!(reason("unsure4"), ReviewReason::FlagLabel);

    let tie = store.get("tie").unwrap();
    assert_eq!(tie.machine_outcome, "Review");
    assert_eq!(tie.invalid_votes, 1);
    assert_eq!(tie.votes.len(), 7);
    assert_eq!(tie.report_text, "report tie");
    assert_eq!(store.get("unsure4").unwrap().machine_outcome, "Uncertain");
    assert_eq!(store.stats().pending, 5);
}

#[test]
fn adjudication_rules() {
    let f = fixture();
    let mut store = f.filled();
    let err = store.submit_adjudication("tie", "Review", "dr a", "").unwrap_err();
    assert!(matches!(err, ReviewError::Validation(_)), "{err}");
    let err = store.submit_adjudication("tie", "AF", " ", "").unwrap_err();
    assert!(matches!(err, ReviewError::Validation(_)), "{err}");
    let err = store.submit_adjudication("clear_af", "AF", "dr a", "").unwrap_err();
    assert!(matches!(err, ReviewError::NotFound(_)), "{err}");

    let item = store.submit_adjudication("tie", "Non-AF", "dr a", "sinus on review").unwrap();
    assert_eq!(item.status, ReviewStatus::Adjudicated);
    assert_eq!(item.human_label.as_deref(), Some("Non-AF"));
    let err = store.submit_adjudication("tie", "AF", "dr b", "").unwrap_err();
    assert!(matches!(err, ReviewError::Conflict(_)), "{err}");
    // the conflicting submit changed nothing
    assert_eq!(store.get("tie").unwrap().human_label.as_deref(), Some("Non-AF"));

    let err = store.reopen("short", "dr b").unwrap_err();
    assert!(matches!(err, ReviewError::Conflict(_)), "{err}");
    let item = store.reopen("tie", "dr b").unwrap();
    assert_eq!(item.status, ReviewStatus::Pending);
    assert_eq!(item.human_label, None);
    store.submit_adjudication("tie", "AF", "dr b", "").unwrap();
    assert_eq!(store.get("tie").unwrap().reviewer.as_deref(), Some("dr b"));
}

#[test]
fn export_without_adjudications_is_the_machine_table() {
    let f = fixture();
    let store = f.filled();
    let machine = f.machine();
    let export = store.export_final(&machine);
    assert_eq!(export.len(), machine.len());
    for (e, m) in export.iter().zip(&machine) {
        assert_eq!((&e.case_id, &e.final_label, e.source), (&m.case_id, &m.final_label, m.source));
        assert_eq!(e.pending, store.get(&m.case_id).is_some());
    }
}

#[test]
fn adjudications_supersede_machine_labels() {
    let f = fixture();
    let mut store = f.filled();
    store.submit_adjudication("short", "AF", "dr a", "").unwrap();
    store.submit_adjudication("unsure5", "Non-AF", "dr a", "").unwrap();
    let export = store.export_final(&f.machine());
    let row = |id: &str| export.iter().find(|r| r.case_id == id).unwrap();
    assert_eq!((row("short").final_label.as_str(), row("short").source), ("AF", Source::HumanReview));
    assert_eq!(row("unsure5").final_label, "Non-AF");
    assert!(!row("unsure5").pending);
    assert!(row("tie").pending);
    assert_eq!((row("clear_af").final_label.as_str(), row("clear_af").source), ("AF", Source::Ensemble));

    let stats = store.stats();
    assert_eq!((stats.pending, stats.adjudicated), (3, 2));
    // "short" had AF as its unique plurality; "unsure5" did not
    assert_eq!(stats.agree_with_plurality, 1);
}

#[test]
fn log_replay_restores_state() {
    let f = fixture();
    let mut store = f.filled();
    store.submit_adjudication("tie", "AF", "dr a", "note").unwrap();
    store.reopen("tie", "dr b").unwrap();
    store.submit_adjudication("tie", "Non-AF", "dr b", "").unwrap();
    store.submit_adjudication("unsure4", "Uncertain", "dr a", "").unwrap();
    let before: Vec<_> = store.queue(None).into_iter().cloned().collect();
    let stats = store.stats();
    drop(store);

    let reopened = f.open();
    let after: Vec<_> = reopened.queue(None).into_iter().cloned().collect();
    assert_eq!(before, after);
    assert_eq!(reopened.stats(), stats);
}

#[test]
fn corrupt_log_names_the_line() {
    let f = fixture();
    drop(f.filled());
    let mut text = std::fs::read_to_string(&f.path).unwrap();
    text.push_str("{not json\n");
    std::fs::write(&f.path, text).unwrap();
    match ReviewStore::open(&f.path, f.schema.clone()) {
        Err(ReviewError::Corrupt { line, .. }) => assert_eq!(line, 6),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corrupt log accepted"),
    }
}
