//! Templated synthetic dialogues for desk-scale training.
//!
//! Every predicate belongs to one of `groups` lexical classes, and so does
//! every role filler (`filler index mod groups`). A filler is an argument
//! only when its class matches the predicate's; fillers from other classes
//! appear as unlabelled distractors. Arguments are planted in the current
//! utterance or, with probability `cross_fraction`, in an earlier one.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::dialogue::{Dialogue, PredicatePos, PronounLabel, RoleSpan, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    /// Upper bound on tokens per utterance.
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub roles: Vec<String>,
    pub predicates: usize,
    pub fillers_per_role: usize,
    pub groups: usize,
    /// Probability that a role is present in a dialogue.
    pub role_rate: f64,
    pub cross_fraction: f64,
    /// Relative weights for arguments 1, 2 and 3+ utterances back.
    pub cross_distance: [f64; 3],
    /// Probability that an utterance contains a first/second-person pronoun.
    pub pronoun_rate: f64,
    /// Probability that an utterance contains a distractor filler.
    pub distractor_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dialogues: 2500,
            min_utterances: 2,
            max_utterances: 6,
            max_tokens: 12,
            vocab_size: 200,
            roles: vec!["A0".into(), "A1".into(), "AM-LOC".into()],
            predicates: 4,
            fillers_per_role: 8,
            groups: 2,
            role_rate: 0.8,
            cross_fraction: 0.4,
            cross_distance: [0.6, 0.3, 0.1],
            pronoun_rate: 0.3,
            distractor_rate: 0.5,
        }
    }
}

const PREPOSITIONS: [&str; 3] = ["at", "in", "on"];
const PRONOUNS_SELF: [&str; 2] = ["i", "me"];
const PRONOUNS_OTHER: [&str; 2] = ["you", "your"];
const ADJECTIVES: usize = 12;

/// Closed vocabulary of the generator.
#[derive(Clone, Debug)]
struct Lexicon {
    predicates: Vec<String>,
    fillers: Vec<Vec<String>>,
    adjectives: Vec<String>,
    noise: Vec<String>,
}

fn role_stem(role: &str) -> String {
    role.to_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect()
}

fn is_modifier(role: &str) -> bool {
    role.starts_with("AM-")
}

impl SynthConfig {
    fn fixed_vocab(&self) -> usize {
        self.predicates
            + self.roles.len() * self.fillers_per_role
            + PREPOSITIONS.len()
            + PRONOUNS_SELF.len()
            + PRONOUNS_OTHER.len()
            + ADJECTIVES
    }

    /// Longest utterance the templates can require before noise words.
    fn required_tokens(&self) -> usize {
        // predicate, two tokens per argument, a distractor phrase, a pronoun,
        // one noise word
        1 + 2 * self.roles.len() + 2 + 1 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dialogues == 0 {
            return bad("at least one dialogue is required".into());
        }
        if self.roles.is_empty() {
            return bad("role inventory is empty".into());
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad(format!(
                "utterance range {}..={} is empty",
                self.min_utterances, self.max_utterances
            ));
        }
        if !(0.0..=1.0).contains(&self.cross_fraction) {
            return bad(format!("cross fraction {} outside [0, 1]", self.cross_fraction));
        }
        if self.cross_fraction > 0.0 && self.min_utterances < 2 {
            return bad("cross-utterance arguments need at least two utterances per dialogue".into());
        }
        if self.cross_distance.iter().any(|w| *w < 0.0) || self.cross_distance.iter().sum::<f64>() <= 0.0 {
            return bad("cross distance weights must be nonnegative with a positive sum".into());
        }
        for (name, p) in [
            ("role rate", self.role_rate),
            ("pronoun rate", self.pronoun_rate),
            ("distractor rate", self.distractor_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.groups == 0 || self.predicates < self.groups || self.fillers_per_role < 2 * self.groups {
            return bad(format!(
                "need at least one predicate and two fillers per role in each of {} groups",
                self.groups
            ));
        }
        if self.vocab_size < self.fixed_vocab() + 1 {
            return bad(format!(
                "vocabulary of {} cannot hold the {} template words plus noise",
                self.vocab_size,
                self.fixed_vocab()
            ));
        }
        if self.max_tokens < self.required_tokens() {
            return bad(format!(
                "utterances of at most {} tokens cannot hold spans needing {}",
                self.max_tokens,
                self.required_tokens()
            ));
        }
        Ok(())
    }

    fn lexicon(&self) -> Lexicon {
        let width = |n: usize| n.saturating_sub(1).to_string().len().max(2);
        let pw = width(self.predicates);
        let fw = width(self.fillers_per_role);
        let noise_count = self.vocab_size - self.fixed_vocab();
        let nw = width(noise_count);
        Lexicon {
            predicates: (0..self.predicates).map(|i| format!("v{i:0pw$}")).collect(),
            fillers: self
                .roles
                .iter()
                .map(|r| {
                    let stem = role_stem(r);
                    (0..self.fillers_per_role).map(|j| format!("{stem}_{j:0fw$}")).collect()
                })
                .collect(),
            adjectives: (0..ADJECTIVES).map(|i| format!("adj{i:02}")).collect(),
            noise: (0..noise_count).map(|i| format!("w{i:0nw$}")).collect(),
        }
    }
}

/// A contiguous run of tokens placed as a unit inside an utterance.
struct Chunk {
    tokens: Vec<String>,
    kind: ChunkKind,
}

enum ChunkKind {
    Argument(usize),
    Predicate,
    Pronoun(usize),
    Plain,
}

fn weighted_distance<R: Rng + ?Sized>(weights: &[f64; 3], max_back: usize, rng: &mut R) -> usize {
    let avail: Vec<f64> = (0..3).map(|i| if i < max_back { weights[i] } else { 0.0 }).collect();
    let total: f64 = avail.iter().sum();
    if total <= 0.0 {
        // only distances with zero weight fit; fall back to the nearest one
        return 1;
    }
    let mut x = rng.random_range(0.0..total);
    let mut bucket = avail.iter().rposition(|w| *w > 0.0).expect("positive total");
    for (i, w) in avail.iter().enumerate() {
        if x < *w {
            bucket = i;
            break;
        }
        x -= w;
    }
    if bucket < 2 {
        bucket + 1
    } else {
        rng.random_range(3..=max_back)
    }
}

fn filler_phrase<R: Rng + ?Sized>(lex: &Lexicon, role: usize, name: &str, filler: usize, rng: &mut R) -> Vec<String> {
    let noun = lex.fillers[role][filler].clone();
    if rng.random_bool(0.5) {
        return vec![noun];
    }
    let first = if is_modifier(name) {
        PREPOSITIONS.choose(rng).expect("nonempty").to_string()
    } else {
        lex.adjectives.choose(rng).expect("nonempty").clone()
    };
    vec![first, noun]
}

fn one_dialogue<R: Rng + ?Sized>(cfg: &SynthConfig, lex: &Lexicon, id: String, rng: &mut R) -> Dialogue {
    let g = cfg.groups;
    let n = rng.random_range(cfg.min_utterances..=cfg.max_utterances);
    let last = n - 1;
    let first_speaker = rng.random_range(0..2usize);
    let speakers: Vec<usize> = (0..n).map(|u| (first_speaker + u) % 2).collect();
    let pred = rng.random_range(0..cfg.predicates);
    let group = pred % g;

    let mut chunks: Vec<Vec<Chunk>> = (0..n).map(|_| Vec::new()).collect();
    chunks[last].push(Chunk {
        tokens: vec![lex.predicates[pred].clone()],
        kind: ChunkKind::Predicate,
    });

    let mut present: Vec<usize> = (0..cfg.roles.len()).filter(|_| rng.random_bool(cfg.role_rate)).collect();
    if present.is_empty() {
        present.push(rng.random_range(0..cfg.roles.len()));
    }
    for &role in &present {
        let utt = if last > 0 && rng.random_bool(cfg.cross_fraction) {
            last - weighted_distance(&cfg.cross_distance, last, rng)
        } else {
            last
        };
        let slot = rng.random_range(0..cfg.fillers_per_role / g);
        let filler = slot * g + group;
        let tokens = filler_phrase(lex, role, &cfg.roles[role], filler, rng);
        chunks[utt].push(Chunk {
            tokens,
            kind: ChunkKind::Argument(role),
        });
    }

    for (u, utt_chunks) in chunks.iter_mut().enumerate() {
        if rng.random_bool(cfg.distractor_rate) {
            let role = rng.random_range(0..cfg.roles.len());
            let other = (group + rng.random_range(1..g.max(2))) % g;
            let slot = rng.random_range(0..cfg.fillers_per_role / g);
            let filler = slot * g + other;
            if filler % g != group {
                let tokens = filler_phrase(lex, role, &cfg.roles[role], filler, rng);
                utt_chunks.push(Chunk {
                    tokens,
                    kind: ChunkKind::Plain,
                });
            }
        }
        if rng.random_bool(cfg.pronoun_rate) {
            let speaker = speakers[u];
            let (word, referent) = if rng.random_bool(0.5) {
                (*PRONOUNS_SELF.choose(rng).expect("nonempty"), speaker)
            } else {
                (*PRONOUNS_OTHER.choose(rng).expect("nonempty"), 1 - speaker)
            };
            utt_chunks.push(Chunk {
                tokens: vec![word.to_string()],
                kind: ChunkKind::Pronoun(referent),
            });
        }
        let used: usize = utt_chunks.iter().map(|c| c.tokens.len()).sum();
        let room = cfg.max_tokens - used;
        let noise = rng.random_range(1..=3usize).min(room);
        for _ in 0..noise {
            utt_chunks.push(Chunk {
                tokens: vec![lex.noise.choose(rng).expect("nonempty").clone()],
                kind: ChunkKind::Plain,
            });
        }
        utt_chunks.shuffle(rng);
    }

    let mut utterances = Vec::with_capacity(n);
    let mut roles = Vec::new();
    let mut pronouns = Vec::new();
    let mut predicate = PredicatePos { utt: last, idx: 0 };
    for (u, utt_chunks) in chunks.into_iter().enumerate() {
        let mut tokens = Vec::new();
        for c in utt_chunks {
            let start = tokens.len();
            let end = start + c.tokens.len() - 1;
            match c.kind {
                ChunkKind::Argument(role) => roles.push(RoleSpan {
                    role: cfg.roles[role].clone(),
                    utt: u,
                    start,
                    end,
                }),
                ChunkKind::Predicate => predicate = PredicatePos { utt: u, idx: start },
                ChunkKind::Pronoun(referent) => pronouns.push(PronounLabel { utt: u, idx: start, referent }),
                ChunkKind::Plain => {}
            }
            tokens.extend(c.tokens);
        }
        utterances.push(Utterance {
            speaker: speakers[u],
            tokens,
        });
    }
    roles.sort_by_key(|r| (r.utt, r.start));
    Dialogue {
        dialogue_id: id,
        utterances,
        predicate,
        roles,
        pronouns,
    }
}

/// Deterministic corpus for `(config, seed)`.
pub fn gen_synthetic(config: &SynthConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let lex = config.lexicon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues = (0..config.dialogues)
        .map(|i| one_dialogue(config, &lex, format!("syn{seed}-{i:05}"), &mut rng))
        .collect();
    Ok(Corpus::new(config.roles.clone(), vec![0, 1], dialogues))
}

/// Splits in order by the given fractions; the last split takes the rest.
pub fn split(corpus: &Corpus, fractions: &[f64]) -> Result<Vec<Corpus>> {
    if fractions.is_empty() || fractions.iter().any(|f| *f < 0.0) || fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
    }
    let n = corpus.len();
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (start + (f * n as f64).round() as usize).min(n)
        };
        out.push(Corpus::new(
            corpus.roles.clone(),
            corpus.speakers.clone(),
            corpus.dialogues[start..end].to_vec(),
        ));
        start = end;
    }
    Ok(out)
}

/// Cross-utterance share of all argument spans.
pub fn cross_ratio(corpus: &Corpus) -> f64 {
    let (mut cross, mut all) = (0usize, 0usize);
    for d in &corpus.dialogues {
        for r in &d.roles {
            all += 1;
            cross += usize::from(r.utt != d.predicate.utt);
        }
    }
    if all == 0 {
        0.0
    } else {
        cross as f64 / all as f64
    }
}
