//! Line-delimited JSON corpora.
//!
//! Each line is one dialogue record. An optional first line
//! `{"roles": [...], "speakers": [...]}` fixes the role and speaker
//! inventories; without it both are collected from the records.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialogue::Dialogue;
use crate::error::{Error, Result};
use crate::tagger::Tagset;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub roles: Vec<String>,
    #[serde(default)]
    pub speakers: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub roles: Vec<String>,
    pub speakers: Vec<usize>,
    pub dialogues: Vec<Dialogue>,
}

/// A loaded corpus together with non-fatal notices.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub corpus: Corpus,
    pub warnings: Vec<String>,
}

impl Corpus {
    pub fn new(roles: Vec<String>, speakers: Vec<usize>, dialogues: Vec<Dialogue>) -> Self {
        Corpus { roles, speakers, dialogues }
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn tagset(&self) -> Result<Tagset> {
        Tagset::new(self.roles.clone())
    }

    pub fn header(&self) -> CorpusHeader {
        CorpusHeader {
            roles: self.roles.clone(),
            speakers: self.speakers.clone(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header())?;
        out.push('\n');
        for d in &self.dialogues {
            out.push_str(&serde_json::to_string(d)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_jsonl()?.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Loaded> {
        parse_corpus(&fs::read_to_string(path)?)
    }
}

fn is_header(v: &serde_json::Value) -> bool {
    v.get("roles").is_some() && v.get("dialogue_id").is_none()
}

pub fn parse_corpus(text: &str) -> Result<Loaded> {
    let mut warnings = Vec::new();
    let mut header: Option<CorpusHeader> = None;
    let mut dialogues: Vec<(usize, Dialogue)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if is_header(&value) {
            if header.is_some() || !dialogues.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: "inventory header must be the first record".into(),
                });
            }
            header = Some(serde_json::from_value(value).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?);
            continue;
        }
        let d: Dialogue = serde_json::from_value(value).map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        dialogues.push((line, d));
    }

    let (roles, speakers) = match header {
        Some(h) => (h.roles, h.speakers),
        None => {
            let roles: BTreeSet<&str> = dialogues
                .iter()
                .flat_map(|(_, d)| d.roles.iter().map(|r| r.role.as_str()))
                .collect();
            (roles.into_iter().map(String::from).collect(), Vec::new())
        }
    };
    let mut speakers: BTreeSet<usize> = speakers.into_iter().collect();
    let mut seen = HashSet::new();
    for (line, d) in &dialogues {
        d.validate(Some(&roles)).map_err(|e| Error::Parse {
            line: *line,
            msg: e.to_string(),
        })?;
        if !seen.insert(d.dialogue_id.as_str()) {
            return Err(Error::Parse {
                line: *line,
                msg: format!("duplicate dialogue id {:?}", d.dialogue_id),
            });
        }
        speakers.extend(d.speakers());
    }
    if dialogues.is_empty() {
        warnings.push("corpus contains no dialogues".to_string());
    }
    Ok(Loaded {
        corpus: Corpus {
            roles,
            speakers: speakers.into_iter().collect(),
            dialogues: dialogues.into_iter().map(|(_, d)| d).collect(),
        },
        warnings,
    })
}
