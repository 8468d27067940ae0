//! Multiple-choice task files: one JSON record per line.
//!
//! ```json
//! {"id":"hs-0","examples":[[{"role":"context","sentences":[[5,6],[7]]},
//!   {"role":"completion","sentences":[[8]]}]],
//!  "query":[{"role":"context","sentences":[[9,10]]}],
//!  "choices":[[11],[12,13]],"gold":1}
//! ```
//!
//! Sentences arrive already tokenized and split; the engine never tokenizes.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Section {
    pub role: String,
    pub sentences: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl Section {
    pub fn token_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.sentences.iter().flatten().copied()
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

/// An example passage: an ordered list of sections.
pub type Example = Vec<Section>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McInstance {
    pub id: String,
    pub examples: Vec<Example>,
    pub query: Example,
    pub choices: Vec<Vec<u32>>,
    pub gold: usize,
}

impl McInstance {
    /// The few-shot examples followed by the query passage; this is the
    /// context that gets segmented and composed.
    pub fn context_examples(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter().chain(std::iter::once(&self.query))
    }

    /// All context token ids in reading order.
    pub fn context_ids(&self) -> Vec<u32> {
        self.context_examples()
            .flat_map(|ex| ex.iter().flat_map(Section::token_ids))
            .collect()
    }

    pub fn validate(&self, vocab_size: Option<usize>) -> std::result::Result<(), String> {
        if self.gold >= self.choices.len() {
            return Err(format!(
                "gold out of range ({} with {} choices)",
                self.gold,
                self.choices.len()
            ));
        }
        for (i, c) in self.choices.iter().enumerate() {
            if c.is_empty() {
                return Err(format!("empty choice {i}"));
            }
        }
        for section in self.context_examples().flatten() {
            if section.sentences.iter().any(Vec::is_empty) {
                return Err(format!("empty sentence in section {:?}", section.role));
            }
        }
        if let Some(v) = vocab_size {
            let ids = self
                .context_ids()
                .into_iter()
                .chain(self.choices.iter().flatten().copied());
            for id in ids {
                if id as usize >= v {
                    return Err(format!("token id {id} out of range for vocabulary of {v}"));
                }
            }
        }
        Ok(())
    }
}

/// Reads and validates every record; blank lines are skipped, order is kept.
pub fn load_task(path: &Path, vocab_size: Option<usize>) -> Result<Vec<McInstance>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec_err = |msg: String| Error::TaskRecord {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let inst: McInstance = serde_json::from_str(&line).map_err(|e| rec_err(format!("malformed record: {e}")))?;
        inst.validate(vocab_size).map_err(rec_err)?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_task(path: &Path, instances: &[McInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, inst)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn zero_shot_single_line() {
        let f = write(&[
            r#"{"id":"a","examples":[],"query":[{"role":"context","sentences":[[1,2]]}],"choices":[[3],[4],[5],[6]],"gold":2}"#,
        ]);
        let t = load_task(f.path(), Some(10)).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t[0].examples.is_empty());
        assert_eq!(t[0].choices.len(), 4);
        assert_eq!(t[0].context_ids(), vec![1, 2]);
    }

    #[test]
    fn gold_out_of_range_reports_line() {
        let f = write(&[r#"{"id":"a","examples":[],"query":[],"choices":[[3],[4],[5],[6]],"gold":4}"#]);
        let err = load_task(f.path(), None).unwrap_err();
        match &err {
            Error::TaskRecord { line, msg, .. } => {
                assert_eq!(*line, 1);
                assert!(msg.starts_with("gold out of range"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_out_of_vocab_records() {
        let f = write(&[
            r#"{"id":"a","examples":[],"query":[],"choices":[[3]],"gold":0}"#,
            r#"{"id":"b","examples":[],"query":[],"choices":[[3]]"#,
        ]);
        match load_task(f.path(), None).unwrap_err() {
            Error::TaskRecord { line, msg, .. } => {
                assert_eq!(line, 2);
                assert!(msg.contains("malformed"));
            }
            other => panic!("{other:?}"),
        }
        let f = write(&[r#"{"id":"a","examples":[],"query":[],"choices":[[30]],"gold":0}"#]);
        assert!(load_task(f.path(), Some(10)).is_err());
        assert!(load_task(f.path(), None).is_ok());
    }

    #[test]
    fn write_then_load_preserves_order_and_ids() {
        let inst = |id: &str| McInstance {
            id: id.into(),
            examples: vec![vec![Section {
                role: "context".into(),
                sentences: vec![vec![1], vec![2, 3]],
                text: Some("x y z".into()),
            }]],
            query: vec![Section {
                role: "context".into(),
                sentences: vec![vec![4]],
                text: None,
            }],
            choices: vec![vec![5], vec![6, 7]],
            gold: 1,
        };
        let all: Vec<_> = (0..20).map(|i| inst(&format!("q{i}"))).collect();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_task(f.path(), &all).unwrap();
        let back = load_task(f.path(), Some(8)).unwrap();
        assert_eq!(back, all);
    }
}
