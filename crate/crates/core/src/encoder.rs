//! Dialogue encoder: four-channel input embedding, a small self-attention
//! stack, and the pronoun speaker-prediction objective.
//!
//! Input rows concatenate position, speaker, word and predicate-indicator
//! embeddings. In PSP mode the predicate channel is a single learned
//! "absent" vector shared by every node, so that both modes produce the same
//! width and share every other weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::dialogue::{NodeSequence, Vocab};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub num_speakers: usize,
    pub max_positions: usize,
    pub word_dim: usize,
    pub speaker_dim: usize,
    pub position_dim: usize,
    pub predicate_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    /// Replace speaker ids by two segment ids (history vs. current turn).
    #[serde(default)]
    pub segment_pairing: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            num_speakers: 2,
            max_positions: 256,
            word_dim: 64,
            speaker_dim: 8,
            position_dim: 16,
            predicate_dim: 8,
            layers: 2,
            heads: 4,
            hidden: 96,
            ffn_hidden: 192,
            segment_pairing: false,
        }
    }
}

impl EncoderConfig {
    pub fn input_dim(&self) -> usize {
        self.position_dim + self.speaker_dim + self.word_dim + self.predicate_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(Error::Config("empty vocabulary or position table".into()));
        }
        if self.num_speakers < 2 {
            return Err(Error::Config("at least two speakers required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    Psp,
    Task,
}

const PRED_NO: usize = 0;
const PRED_YES: usize = 1;
const PRED_ABSENT: usize = 2;

#[derive(Clone, Debug)]
struct AttentionLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DialogueEncoder {
    pub config: EncoderConfig,
    position: ParamId,
    speaker: ParamId,
    word: ParamId,
    predicate: ParamId,
    input: Linear,
    layers: Vec<AttentionLayer>,
    psp_head: Linear,
}

/// Integer channels of one node sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedIds {
    pub positions: Vec<usize>,
    pub speakers: Vec<usize>,
    pub words: Vec<usize>,
    pub predicate: Vec<usize>,
}

impl DialogueEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let emb = |store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R| {
            store.add_uniform(name, rows, dim, 0.5, rng)
        };
        let position = emb(store, "enc.position", c.max_positions, c.position_dim, rng);
        let speaker = emb(store, "enc.speaker", c.num_speakers, c.speaker_dim, rng);
        let word = emb(store, "enc.word", c.vocab_size, c.word_dim, rng);
        let predicate = emb(store, "enc.predicate", 3, c.predicate_dim, rng);
        let input = Linear::new(store, "enc.input", c.input_dim(), c.hidden, true, rng);
        let layers = (0..c.layers)
            .map(|l| {
                let n = format!("enc.layer{l}");
                AttentionLayer {
                    query: Linear::new(store, &format!("{n}.query"), c.hidden, c.hidden, false, rng),
                    key: Linear::new(store, &format!("{n}.key"), c.hidden, c.hidden, false, rng),
                    value: Linear::new(store, &format!("{n}.value"), c.hidden, c.hidden, false, rng),
                    output: Linear::new(store, &format!("{n}.output"), c.hidden, c.hidden, true, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), c.hidden),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), c.hidden, c.ffn_hidden, c.hidden, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), c.hidden),
                }
            })
            .collect();
        let psp_head = Linear::new(store, "psp.classifier", c.hidden, c.num_speakers, true, rng);
        Ok(DialogueEncoder {
            config,
            position,
            speaker,
            word,
            predicate,
            input,
            layers,
            psp_head,
        })
    }

    pub fn ids(&self, seq: &NodeSequence, vocab: &Vocab, mode: EmbedMode) -> Result<EncodedIds> {
        let c = &self.config;
        let current = seq.nodes.last().map_or(0, |n| n.utt);
        let mut ids = EncodedIds {
            positions: Vec::with_capacity(seq.len()),
            speakers: Vec::with_capacity(seq.len()),
            words: Vec::with_capacity(seq.len()),
            predicate: Vec::with_capacity(seq.len()),
        };
        for n in &seq.nodes {
            ids.positions.push(n.position.min(c.max_positions - 1));
            let spk = if c.segment_pairing {
                usize::from(n.utt == current)
            } else {
                n.speaker
            };
            if spk >= c.num_speakers {
                return Err(Error::Config(format!(
                    "speaker id {spk} outside the {}-speaker table",
                    c.num_speakers
                )));
            }
            ids.speakers.push(spk);
            ids.words.push(vocab.id(&n.surface).min(c.vocab_size - 1));
            ids.predicate.push(match mode {
                EmbedMode::Psp => PRED_ABSENT,
                EmbedMode::Task if n.is_predicate => PRED_YES,
                EmbedMode::Task => PRED_NO,
            });
        }
        Ok(ids)
    }

    /// `K × (d_p + d_q + d_w + d_prd)` input rows.
    pub fn embed_inputs(&self, tape: &mut Tape, store: &ParamStore, ids: &EncodedIds) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        for (table, idx) in [
            (self.position, &ids.positions),
            (self.speaker, &ids.speakers),
            (self.word, &ids.words),
            (self.predicate, &ids.predicate),
        ] {
            let t = tape.param(store, table);
            parts.push(tape.gather_rows(t, idx)?);
        }
        tape.concat_cols(&parts)
    }

    /// Projection to the hidden size, then the attention stack.
    pub fn contextualize(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = self.input.forward(tape, store, x)?;
        let heads = self.config.heads;
        let dk = self.config.hidden / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for layer in &self.layers {
            let q = layer.query.forward(tape, store, h)?;
            let k = layer.key.forward(tape, store, h)?;
            let v = layer.value.forward(tape, store, h)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (s, e) = (hd * dk, (hd + 1) * dk);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let w = tape.softmax_rows(scores);
                outs.push(tape.matmul(w, vh)?);
            }
            let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
            let att = layer.output.forward(tape, store, merged)?;
            let res = tape.add(h, att)?;
            h = layer.norm1.forward(tape, store, res)?;
            let ff = layer.ffn.forward(tape, store, h)?;
            let res = tape.add(h, ff)?;
            h = layer.norm2.forward(tape, store, res)?;
        }
        Ok(h)
    }

    /// Embedding, input dropout and contextualisation in one call.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &EncodedIds,
        dropout: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let x = self.embed_inputs(tape, store, ids)?;
        let x = tape.dropout(x, dropout, train, rng);
        self.contextualize(tape, store, x)
    }

    /// Speaker log-probabilities at the given rows of `h`.
    pub fn psp_log_probs(&self, tape: &mut Tape, store: &ParamStore, h: Var, rows: &[usize]) -> Result<Var> {
        let sel = tape.gather_rows(h, rows)?;
        let logits = self.psp_head.forward(tape, store, sel)?;
        Ok(tape.log_softmax_rows(logits))
    }

    /// Mean cross-entropy of the referent speaker over labelled pronouns.
    pub fn psp_loss(&self, tape: &mut Tape, store: &ParamStore, h: Var, pronouns: &[(usize, usize)]) -> Result<Var> {
        if pronouns.is_empty() {
            return Err(Error::Empty("psp_loss"));
        }
        let rows: Vec<usize> = pronouns.iter().map(|&(r, _)| r).collect();
        let targets: Vec<usize> = pronouns.iter().map(|&(_, s)| s).collect();
        if let Some(&bad) = targets.iter().find(|&&s| s >= self.config.num_speakers) {
            return Err(Error::Config(format!("pronoun referent {bad} outside speaker table")));
        }
        let lp = self.psp_log_probs(tape, store, h, &rows)?;
        crate::tagger::sequence_loss(tape, lp, &targets)
    }

    pub fn psp_head(&self) -> &Linear {
        &self.psp_head
    }
}
