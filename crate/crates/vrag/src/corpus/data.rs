use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::tokenize;
use super::vocab::{marker, TokenId};
use crate::error::{Error, Result};

/// Responses equal to this literal mark unanswerable instances; the loader
/// drops them and reports how many.
pub const CANNOT_ANSWER: &str = "CANNOT-ANSWER";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    S1,
    S2,
}

impl Speaker {
    pub fn marker_id(self) -> TokenId {
        match self {
            Speaker::S1 => marker::S1,
            Speaker::S2 => marker::S2,
        }
    }
}

/// One dialog turn, with the raw text kept for lossless re-serialization.
#[derive(Debug, Clone)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DialogInstance {
    pub id: String,
    pub turns: Vec<Turn>,
    pub response_text: String,
    pub response_tokens: Vec<String>,
    pub gold_doc_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DocumentRecord {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

/// All splits plus the shared document collection.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<DocumentRecord>,
    pub train: Vec<DialogInstance>,
    pub val: Vec<DialogInstance>,
    pub test: Vec<DialogInstance>,
}

/// Per-split counts of instances dropped for unanswerable responses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub dropped_train: usize,
    pub dropped_val: usize,
    pub dropped_test: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    speaker: Speaker,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialog {
    id: String,
    context: Vec<RawTurn>,
    response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_doc_id: Option<String>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Loads a documents JSONL file. Duplicate ids are an error naming both
/// offending lines.
pub fn load_documents(path: &Path) -> Result<Vec<DocumentRecord>> {
    let reader = open(path)?;
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, line_no, format!("bad document record: {}", e)))?;
        if let Some(&first) = seen.get(&raw.id) {
            return Err(Error::DuplicateDocId {
                path: path.to_path_buf(),
                id: raw.id,
                first_line: first,
                line: line_no,
            });
        }
        seen.insert(raw.id.clone(), line_no);
        let tokens = tokenize(&raw.text);
        if tokens.is_empty() {
            return Err(Error::data(path, line_no, "document has no tokens"));
        }
        docs.push(DocumentRecord {
            id: raw.id,
            text: raw.text,
            tokens,
        });
    }
    Ok(docs)
}

/// Loads a dialogs JSONL file, dropping unanswerable instances. Returns the
/// surviving instances and the dropped count.
pub fn load_dialogs(path: &Path) -> Result<(Vec<DialogInstance>, usize)> {
    let reader = open(path)?;
    let mut out = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDialog = serde_json::from_str(&line)
            .map_err(|e| Error::data(path, line_no, format!("bad dialog record: {}", e)))?;
        if raw.response == CANNOT_ANSWER {
            dropped += 1;
            continue;
        }
        if raw.context.is_empty() {
            return Err(Error::data(path, line_no, "dialog has no context turns"));
        }
        let response_tokens = tokenize(&raw.response);
        if response_tokens.is_empty() {
            return Err(Error::data(path, line_no, "response is empty after tokenization"));
        }
        let turns = raw
            .context
            .into_iter()
            .map(|t| Turn {
                speaker: t.speaker,
                tokens: tokenize(&t.text),
                text: t.text,
            })
            .collect();
        out.push(DialogInstance {
            id: raw.id,
            turns,
            response_text: raw.response,
            response_tokens,
            gold_doc_id: raw.gold_doc_id,
        });
    }
    Ok((out, dropped))
}

/// Loads `documents.jsonl` plus `train/val/test.jsonl` from a directory and
/// cross-checks every gold document id against the collection.
pub fn load_dataset(dir: &Path) -> Result<(Corpus, LoadReport)> {
    let documents = load_documents(&dir.join("documents.jsonl"))?;
    let known: HashMap<&str, ()> = documents.iter().map(|d| (d.id.as_str(), ())).collect();

    let load_split = |name: &str| -> Result<(Vec<DialogInstance>, usize)> {
        let path = dir.join(name);
        let (instances, dropped) = load_dialogs(&path)?;
        for inst in &instances {
            if let Some(gold) = &inst.gold_doc_id {
                if !known.contains_key(gold.as_str()) {
                    return Err(Error::data(
                        &path,
                        0,
                        format!("instance `{}` names unknown gold document `{}`", inst.id, gold),
                    ));
                }
            }
        }
        Ok((instances, dropped))
    };

    let (train, dropped_train) = load_split("train.jsonl")?;
    let (val, dropped_val) = load_split("val.jsonl")?;
    let (test, dropped_test) = load_split("test.jsonl")?;
    Ok((
        Corpus {
            documents,
            train,
            val,
            test,
        },
        LoadReport {
            dropped_train,
            dropped_val,
            dropped_test,
        },
    ))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn save_documents(path: &Path, docs: &[DocumentRecord]) -> Result<()> {
    let mut w = writer(path)?;
    for d in docs {
        let raw = RawDocument {
            id: d.id.clone(),
            text: d.text.clone(),
        };
        serde_json::to_writer(&mut w, &raw).map_err(|e| Error::data(path, 0, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_dialogs(path: &Path, dialogs: &[DialogInstance]) -> Result<()> {
    let mut w = writer(path)?;
    for d in dialogs {
        let raw = RawDialog {
            id: d.id.clone(),
            context: d
                .turns
                .iter()
                .map(|t| RawTurn {
                    speaker: t.speaker,
                    text: t.text.clone(),
                })
                .collect(),
            response: d.response_text.clone(),
            gold_doc_id: d.gold_doc_id.clone(),
        };
        serde_json::to_writer(&mut w, &raw).map_err(|e| Error::data(path, 0, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Convenience used by tests and the data generator: writes a whole corpus
/// into a directory in the layout `load_dataset` expects.
pub fn save_dataset(dir: &Path, corpus: &Corpus) -> Result<()> {
    save_documents(&dir.join("documents.jsonl"), &corpus.documents)?;
    save_dialogs(&dir.join("train.jsonl"), &corpus.train)?;
    save_dialogs(&dir.join("val.jsonl"), &corpus.val)?;
    save_dialogs(&dir.join("test.jsonl"), &corpus.test)
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dataset(dir, self)
    }

    pub fn document(&self, id: &str) -> Option<&DocumentRecord> {
        self.documents.iter().find(|d| d.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(path: &Path, lines: &[&str]) {
        let mut f = File::create(path).unwrap();
        for l in lines {
            writeln!(f, "{}", l).unwrap();
        }
    }

    #[test]
    fn documents_load_and_tokenize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("documents.jsonl");
        write_lines(&p, &[r#"{"id":"d1","text":"Hello, World"}"#]);
        let docs = load_documents(&p).unwrap();
        assert_eq!(docs[0].tokens, vec!["hello", ",", "world"]);
        assert_eq!(docs[0].text, "Hello, World");
    }

    #[test]
    fn duplicate_doc_id_reports_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("documents.jsonl");
        write_lines(
            &p,
            &[
                r#"{"id":"d1","text":"one"}"#,
                r#"{"id":"d2","text":"two"}"#,
                r#"{"id":"d1","text":"three"}"#,
            ],
        );
        let err = load_documents(&p).unwrap_err();
        match err {
            Error::DuplicateDocId {
                id,
                first_line,
                line,
                ..
            } => {
                assert_eq!(id, "d1");
                assert_eq!(first_line, 1);
                assert_eq!(line, 3);
            }
            other => panic!("unexpected error: {:?}", other),
        }
    }

    #[test]
    fn malformed_line_error_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        write_lines(
            &p,
            &[
                r#"{"id":"a","context":[{"speaker":"s1","text":"hi"}],"response":"yes"}"#,
                r#"{"id":"b","context":"#,
            ],
        );
        let err = load_dialogs(&p).unwrap_err().to_string();
        assert!(err.contains("train.jsonl:2"), "{}", err);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        write_lines(
            &p,
            &[r#"{"id":"a","context":[{"speaker":"s1","text":"hi"}],"response":"yes","extra":1}"#],
        );
        assert!(load_dialogs(&p).is_err());
    }

    #[test]
    fn unanswerable_instances_are_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        write_lines(
            &p,
            &[
                r#"{"id":"a","context":[{"speaker":"s1","text":"hi"}],"response":"CANNOT-ANSWER"}"#,
                r#"{"id":"b","context":[{"speaker":"s1","text":"hi"}],"response":"fine"}"#,
            ],
        );
        let (instances, dropped) = load_dialogs(&p).unwrap();
        assert_eq!(instances.len(), 1);
        assert_eq!(instances[0].id, "b");
        assert_eq!(dropped, 1);
    }

    #[test]
    fn unknown_gold_doc_id_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_lines(
            &dir.path().join("documents.jsonl"),
            &[r#"{"id":"d1","text":"content here"}"#],
        );
        let dialog = r#"{"id":"a","context":[{"speaker":"s1","text":"hi"}],"response":"ok","gold_doc_id":"missing"}"#;
        write_lines(&dir.path().join("train.jsonl"), &[dialog]);
        write_lines(&dir.path().join("val.jsonl"), &[]);
        write_lines(&dir.path().join("test.jsonl"), &[]);
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing"), "{}", err);
    }

    #[test]
    fn save_then_load_round_trips_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.jsonl");
        let lines = [
            r#"{"id":"a","context":[{"speaker":"s1","text":"Hi there!"},{"speaker":"s2","text":"Yes?"}],"response":"Sure thing.","gold_doc_id":"d9"}"#,
            r#"{"id":"b","context":[{"speaker":"s1","text":"ok"}],"response":"fine"}"#,
        ];
        write_lines(&p, &lines);
        let (instances, _) = load_dialogs(&p).unwrap();
        let p2 = dir.path().join("copy.jsonl");
        save_dialogs(&p2, &instances).unwrap();
        let a = std::fs::read_to_string(&p).unwrap();
        let b = std::fs::read_to_string(&p2).unwrap();
        assert_eq!(a, b);
    }
}
