//! Corpus and ground-truth files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use agentvote_core::sim::SyntheticCase;
use agentvote_core::{LabelId, RawCategory, TaskSchema};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub case_id: String,
    pub report_text: String,
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl" | "ndjson" | "json")
    )
}

/// Reads a CSV (`case_id,report_text`) or JSON-lines corpus, chosen by file
/// extension.
pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = File::open(path).with_context(|| format!("opening corpus {}", path.display()))?;
    if is_jsonl(path) {
        let mut out = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CorpusRecord = serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: bad corpus record", path.display(), i + 1))?;
            out.push(rec);
        }
        Ok(out)
    } else {
        let mut r = csv::Reader::from_reader(file);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["case_id", "report_text"] {
            bail!(
                "{}: expected header case_id,report_text, found {}",
                path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            );
        }
        r.deserialize()
            .enumerate()
            .map(|(i, rec)| rec.with_context(|| format!("{}: record {}", path.display(), i + 1)))
            .collect()
    }
}

pub fn write_corpus_csv<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = &'a CorpusRecord>,
{
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["case_id", "report_text"])?;
    for r in records {
        w.write_record([&r.case_id, &r.report_text])?;
    }
    w.flush()?;
    Ok(())
}

/// Ground truth per case; `wording` is the optional raw category the report
/// was written to express (used only by simulated agents).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TruthTable {
    pub labels: BTreeMap<String, LabelId>,
    pub wording: BTreeMap<String, RawCategory>,
}

impl TruthTable {
    pub fn from_synthetic(cases: &[SyntheticCase]) -> Self {
        TruthTable {
            labels: cases.iter().map(|c| (c.case_id.clone(), c.truth)).collect(),
            wording: cases.iter().map(|c| (c.case_id.clone(), c.wording)).collect(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRow {
    case_id: String,
    label: String,
    #[serde(default)]
    raw: Option<String>,
}

/// Reads `case_id,label[,raw]`. Labels must be members of `V`.
pub fn read_truth(path: &Path, schema: &TaskSchema) -> Result<TruthTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening truth {}", path.display()))?;
    let mut table = TruthTable::default();
    for (i, row) in r.deserialize::<TruthRow>().enumerate() {
        let row = row.with_context(|| format!("{}: record {}", path.display(), i + 1))?;
        let Some(label) = schema.label_id(&row.label) else {
            bail!("{}: case {}: label {:?} is not in {:?}", path.display(), row.case_id, row.label, schema.valid_set());
        };
        if let Some(raw) = row.raw.as_deref().filter(|r| !r.is_empty()) {
            let Some(raw_id) = schema.parse_raw_category(raw) else {
                bail!("{}: case {}: unknown raw category {raw:?}", path.display(), row.case_id);
            };
            table.wording.insert(row.case_id.clone(), raw_id);
        }
        if table.labels.insert(row.case_id.clone(), label).is_some() {
            bail!("{}: duplicate case_id {:?}", path.display(), row.case_id);
        }
    }
    Ok(table)
}

pub fn write_truth_csv(path: &Path, cases: &[SyntheticCase], schema: &TaskSchema) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["case_id", "label", "raw"])?;
    for c in cases {
        w.write_record([&c.case_id, schema.label_name(c.truth), schema.raw_name(c.wording)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn synthetic_records(cases: &[SyntheticCase]) -> Vec<CorpusRecord> {
    cases
        .iter()
        .map(|c| CorpusRecord {
            case_id: c.case_id.clone(),
            report_text: c.report_text.clone(),
        })
        .collect()
}

/// Appends one JSON value per line.
pub fn append_jsonl<T: Serialize, W: Write>(out: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_jsonl_agree() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![
            CorpusRecord { case_id: "1".into(), report_text: "Atrial fibrillation, \"rapid\".\nLine two".into() },
            CorpusRecord { case_id: "2".into(), report_text: "Sinus rhythm".into() },
        ];
        let csv_path = dir.path().join("c.csv");
        write_corpus_csv(&csv_path, &recs).unwrap();
        assert_eq!(read_corpus(&csv_path).unwrap(), recs);
        let jl = dir.path().join("c.jsonl");
        let mut f = File::create(&jl).unwrap();
        for r in &recs {
            append_jsonl(&mut f, r).unwrap();
        }
        drop(f);
        assert_eq!(read_corpus(&jl).unwrap(), recs);
    }

    #[test]
    fn wrong_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "id,text\n1,x\n").unwrap();
        assert!(read_corpus(&p).unwrap_err().to_string().contains("expected header"));
    }

    #[test]
    fn truth_labels_validated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let s = TaskSchema::ecg_af();
        std::fs::write(&p, "case_id,label,raw\n1,AF,Probable AF\n2,Non-AF,\n").unwrap();
        let t = read_truth(&p, &s).unwrap();
        assert_eq!(t.labels.len(), 2);
        assert_eq!(t.wording.len(), 1);
        std::fs::write(&p, "case_id,label\n1,Review\n").unwrap();
        assert!(read_truth(&p, &s).is_err());
    }
}
