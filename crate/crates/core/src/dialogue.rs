//! Dialogue records, their linearised node sequence and the word vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagger::{spans_from_tags, tags_from_spans, LabelSpan, Tagset};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: usize,
    pub tokens: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicatePos {
    pub utt: usize,
    pub idx: usize,
}

/// Argument span over tokens `start..=end` of utterance `utt`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoleSpan {
    pub role: String,
    pub utt: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PronounLabel {
    pub utt: usize,
    pub idx: usize,
    pub referent: usize,
}

/// One corpus record: a dialogue with its predicate and labelled arguments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub utterances: Vec<Utterance>,
    pub predicate: PredicatePos,
    #[serde(default)]
    pub roles: Vec<RoleSpan>,
    #[serde(default)]
    pub pronouns: Vec<PronounLabel>,
}

impl Dialogue {
    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidDialogue {
            id: self.dialogue_id.clone(),
            reason: reason.into(),
        }
    }

    /// Structural checks. With a role inventory, every role must belong to it.
    pub fn validate(&self, roles: Option<&[String]>) -> Result<()> {
        let last = self
            .utterances
            .len()
            .checked_sub(1)
            .ok_or_else(|| self.invalid("dialogue has no utterances"))?;
        let p = self.predicate;
        if p.utt != last {
            return Err(self.invalid(format!(
                "predicate must be in the last utterance ({last}), found in utterance {}",
                p.utt
            )));
        }
        if p.idx >= self.utterances[last].tokens.len() {
            return Err(self.invalid(format!("predicate index {} out of range", p.idx)));
        }
        let mut taken: HashMap<(usize, usize), usize> = HashMap::new();
        for (k, s) in self.roles.iter().enumerate() {
            let utt = self
                .utterances
                .get(s.utt)
                .ok_or_else(|| self.invalid(format!("span {k} refers to missing utterance {}", s.utt)))?;
            if s.start > s.end || s.end >= utt.tokens.len() {
                return Err(self.invalid(format!(
                    "span {k} ({}..={}) out of range for utterance {} of length {}",
                    s.start,
                    s.end,
                    s.utt,
                    utt.tokens.len()
                )));
            }
            if let Some(inv) = roles {
                if !inv.iter().any(|r| r == &s.role) {
                    return Err(self.invalid(format!("unknown role {:?}", s.role)));
                }
            }
            for i in s.start..=s.end {
                if let Some(other) = taken.insert((s.utt, i), k) {
                    return Err(self.invalid(format!("spans {other} and {k} overlap")));
                }
            }
        }
        for pr in &self.pronouns {
            let ok = self.utterances.get(pr.utt).is_some_and(|u| pr.idx < u.tokens.len());
            if !ok {
                return Err(self.invalid(format!("pronoun at ({}, {}) out of range", pr.utt, pr.idx)));
            }
        }
        Ok(())
    }

    pub fn speakers(&self) -> BTreeSet<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Word,
    Speaker,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    pub surface: String,
    pub utt: usize,
    pub speaker: usize,
    pub position: usize,
    /// Token index inside the utterance; `None` for speaker nodes.
    pub token: Option<usize>,
    pub is_predicate: bool,
}

/// Flattened dialogue: per utterance one speaker node then its words.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSequence {
    pub nodes: Vec<Node>,
    pub predicate: usize,
    /// Gold BIO label per node; speaker nodes are always `O`.
    pub labels: Vec<usize>,
    /// `(node index, referent speaker)` for every labelled pronoun.
    pub pronouns: Vec<(usize, usize)>,
    utt_offsets: Vec<usize>,
}

pub fn speaker_surface(speaker: usize) -> String {
    format!("<spk{speaker}>")
}

impl NodeSequence {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node index of token `idx` in utterance `utt`.
    pub fn node_index(&self, utt: usize, idx: usize) -> usize {
        self.utt_offsets[utt] + 1 + idx
    }

    pub fn utterance_of(&self, node: usize) -> usize {
        self.nodes[node].utt
    }

    /// Converts node labels to utterance-coordinate spans. Speaker nodes are
    /// never part of a span and close any span that reaches them.
    pub fn role_spans(&self, labels: &[usize], tagset: &Tagset) -> Vec<RoleSpan> {
        let masked: Vec<usize> = labels
            .iter()
            .zip(&self.nodes)
            .map(|(&l, n)| if n.kind == NodeKind::Speaker { 0 } else { l })
            .collect();
        spans_from_tags(&masked, tagset)
            .into_iter()
            .map(|s| {
                let first = &self.nodes[s.start];
                let last = &self.nodes[s.end];
                RoleSpan {
                    role: tagset.roles()[s.role].clone(),
                    utt: first.utt,
                    start: first.token.expect("word node"),
                    end: last.token.expect("word node"),
                }
            })
            .collect()
    }
}

/// Flattens a validated dialogue and projects its gold spans onto BIO labels.
pub fn linearize(d: &Dialogue, tagset: &Tagset) -> Result<NodeSequence> {
    d.validate(Some(tagset.roles()))?;
    let mut nodes = Vec::new();
    let mut utt_offsets = Vec::with_capacity(d.utterances.len());
    for (u, utt) in d.utterances.iter().enumerate() {
        utt_offsets.push(nodes.len());
        nodes.push(Node {
            kind: NodeKind::Speaker,
            surface: speaker_surface(utt.speaker),
            utt: u,
            speaker: utt.speaker,
            position: nodes.len(),
            token: None,
            is_predicate: false,
        });
        for (t, tok) in utt.tokens.iter().enumerate() {
            nodes.push(Node {
                kind: NodeKind::Word,
                surface: tok.clone(),
                utt: u,
                speaker: utt.speaker,
                position: nodes.len(),
                token: Some(t),
                is_predicate: u == d.predicate.utt && t == d.predicate.idx,
            });
        }
    }
    let predicate = utt_offsets[d.predicate.utt] + 1 + d.predicate.idx;
    let spans: Vec<LabelSpan> = d
        .roles
        .iter()
        .map(|s| {
            let off = utt_offsets[s.utt] + 1;
            LabelSpan {
                role: tagset.role_index(&s.role).expect("validated"),
                start: off + s.start,
                end: off + s.end,
            }
        })
        .collect();
    let labels = tags_from_spans(&spans, nodes.len(), tagset)?;
    let pronouns = d
        .pronouns
        .iter()
        .map(|p| (utt_offsets[p.utt] + 1 + p.idx, p.referent))
        .collect();
    Ok(NodeSequence {
        nodes,
        predicate,
        labels,
        pronouns,
        utt_offsets,
    })
}

pub const UNK: &str = "<unk>";

/// Sorted token list; a token's id is its rank. `<unk>` is always present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut set: BTreeSet<String> = tokens.into_iter().collect();
        set.insert(UNK.to_string());
        let tokens: Vec<String> = set.into_iter().collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Every word and speaker surface seen in `dialogues`.
    pub fn build<'a, I: IntoIterator<Item = &'a Dialogue>>(dialogues: I) -> Self {
        let mut all = Vec::new();
        for d in dialogues {
            for u in &d.utterances {
                all.push(speaker_surface(u.speaker));
                all.extend(u.tokens.iter().cloned());
            }
        }
        Self::from_tokens(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.unk())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        for line in f.lines() {
            let line = line?;
            if !line.is_empty() {
                tokens.push(line);
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tagger::Tag;

    pub(crate) fn toy_tagset() -> Tagset {
        Tagset::new(vec!["A0".into(), "A1".into(), "AM-LOC".into()]).unwrap()
    }

    fn utt(speaker: usize, words: &str) -> Utterance {
        Utterance {
            speaker,
            tokens: words.split_whitespace().map(String::from).collect(),
        }
    }

    pub(crate) fn toy_dialogue() -> Dialogue {
        Dialogue {
            dialogue_id: "d0".into(),
            utterances: vec![utt(0, "the red box"), utt(1, "i moved it there")],
            predicate: PredicatePos { utt: 1, idx: 1 },
            roles: vec![
                RoleSpan {
                    role: "A0".into(),
                    utt: 0,
                    start: 1,
                    end: 2,
                },
                RoleSpan {
                    role: "A1".into(),
                    utt: 1,
                    start: 0,
                    end: 0,
                },
            ],
            pronouns: vec![PronounLabel {
                utt: 1,
                idx: 0,
                referent: 1,
            }],
        }
    }

    #[test]
    fn linearize_counts_and_labels() {
        let ts = toy_tagset();
        let seq = linearize(&toy_dialogue(), &ts).unwrap();
        assert_eq!(seq.len(), 2 + 7);
        assert_eq!(seq.nodes.iter().filter(|n| n.is_predicate).count(), 1);
        assert_eq!(seq.predicate, 6);
        assert_eq!(seq.nodes[6].surface, "moved");
        assert_eq!(seq.nodes[0].kind, NodeKind::Speaker);
        assert_eq!(seq.nodes[4].kind, NodeKind::Speaker);
        assert_eq!(seq.labels[2], ts.index(Tag::B(0)));
        assert_eq!(seq.labels[3], ts.index(Tag::I(0)));
        assert_eq!(seq.labels[5], ts.index(Tag::B(1)));
        assert_eq!(seq.labels[0], 0);
        assert_eq!(seq.pronouns, vec![(5, 1)]);
    }

    #[test]
    fn projection_roundtrips() {
        let ts = toy_tagset();
        let d = toy_dialogue();
        let seq = linearize(&d, &ts).unwrap();
        let mut back = seq.role_spans(&seq.labels, &ts);
        let mut gold = d.roles.clone();
        back.sort();
        gold.sort();
        assert_eq!(back, gold);
    }

    #[test]
    fn speaker_nodes_break_spans() {
        let ts = toy_tagset();
        let seq = linearize(&toy_dialogue(), &ts).unwrap();
        let mut labels = vec![0; seq.len()];
        labels[3] = ts.index(Tag::B(0));
        labels[4] = ts.index(Tag::I(0));
        labels[5] = ts.index(Tag::I(0));
        let spans = seq.role_spans(&labels, &ts);
        assert_eq!(spans.len(), 2);
        assert!(spans.iter().all(|s| s.start == s.end));
    }

    #[test]
    fn validation_errors() {
        let ts = toy_tagset();
        let mut d = toy_dialogue();
        d.predicate = PredicatePos { utt: 0, idx: 0 };
        let e = linearize(&d, &ts).unwrap_err().to_string();
        assert!(e.contains("last utterance"), "{e}");

        let mut d = toy_dialogue();
        d.predicate.idx = 9;
        assert!(linearize(&d, &ts).is_err());

        let mut d = toy_dialogue();
        d.roles.push(RoleSpan {
            role: "A1".into(),
            utt: 0,
            start: 2,
            end: 2,
        });
        assert!(linearize(&d, &ts).unwrap_err().to_string().contains("overlap"));

        let mut d = toy_dialogue();
        d.roles[0].role = "A9".into();
        assert!(linearize(&d, &ts).unwrap_err().to_string().contains("unknown role"));
    }

    #[test]
    fn vocab_sorted_with_unknown() {
        let v = Vocab::build([&toy_dialogue()]);
        let toks = v.tokens();
        assert!(toks.windows(2).all(|w| w[0] < w[1]));
        assert!(v.contains("<spk0>"));
        assert_eq!(v.id("never-seen"), v.unk());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }
}
