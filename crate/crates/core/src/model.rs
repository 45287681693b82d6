//! The full tagger: encoder, latent graph, GCN, fusion and classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::dialogue::{linearize, Dialogue, NodeSequence, RoleSpan, Vocab};
use crate::encoder::{DialogueEncoder, EmbedMode, EncoderConfig};
use crate::entmax::{alpha_from_raw, AlphaParam};
use crate::error::{Error, Result};
use crate::gcn::{Fusion, FusionMode, GcnConfig, GcnStack};
use crate::inducer::{self, EdgeMode, InducerConfig, ParamHeads};
use crate::tagger::{viterbi_decode, Classifier, Tagset, TransitionMask};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Feed encoder states straight to the shape heads.
    pub no_pgi: bool,
    /// Use the raw HardKuma edges without entmax.
    pub no_prune: bool,
    /// Add graph and context features instead of gating them.
    pub no_gate: bool,
    /// Skip the speaker-prediction pretraining phase.
    pub no_psp: bool,
    /// Two segment ids (history / current turn) instead of speaker ids.
    pub bert_style_pairing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub inducer: InducerConfig,
    pub gcn: GcnConfig,
    pub dropout: f64,
    pub alpha_init: f64,
    pub ablations: Ablations,
    /// Sample edge noise during training; otherwise use median noise.
    pub stochastic_edges: bool,
    /// Median noise at inference.
    pub deterministic_eval: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            inducer: InducerConfig::default(),
            gcn: GcnConfig::default(),
            dropout: 0.5,
            alpha_init: 1.5,
            ablations: Ablations::default(),
            stochastic_edges: true,
            deterministic_eval: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.gcn.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.alpha_init > 1.0 && self.alpha_init < 2.0) {
            return Err(Error::Config(format!("alpha_init {} outside (1, 2)", self.alpha_init)));
        }
        Ok(())
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub log_probs: Var,
    pub edges_raw: Var,
    /// Equal to `edges_raw` when pruning is ablated.
    pub edges: Var,
    pub gate: Option<Var>,
}

/// Dense dump of one dialogue's latent graph.
#[derive(Clone, Debug, Serialize)]
pub struct GraphDump {
    pub dialogue_id: String,
    pub surfaces: Vec<String>,
    pub predicate: usize,
    pub alpha: f64,
    pub edges_raw: Vec<Vec<f64>>,
    /// `None` when pruning is disabled.
    pub edges_pruned: Option<Vec<Vec<f64>>>,
    pub support: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct PolarModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tagset: Tagset,
    pub vocab: Vocab,
    pub encoder: DialogueEncoder,
    pub heads: ParamHeads,
    pub gcn: GcnStack,
    pub fusion: Fusion,
    pub classifier: Classifier,
    pub alpha: ParamId,
    mask: TransitionMask,
}

impl PolarModel {
    /// Builds a model; `config.encoder.vocab_size` is set from `vocab`.
    pub fn new<R: Rng + ?Sized>(mut config: ModelConfig, tagset: Tagset, vocab: Vocab, rng: &mut R) -> Result<Self> {
        config.encoder.vocab_size = vocab.len();
        config.encoder.segment_pairing = config.ablations.bert_style_pairing;
        if config.encoder.segment_pairing {
            config.encoder.num_speakers = config.encoder.num_speakers.max(2);
        }
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = DialogueEncoder::new(&mut store, config.encoder.clone(), rng)?;
        let hidden = config.encoder.hidden;
        let heads = ParamHeads::new(&mut store, hidden, config.inducer.clone(), rng);
        let gcn = GcnStack::new(&mut store, hidden, config.gcn.clone(), rng)?;
        let mode = if config.ablations.no_gate {
            FusionMode::Additive
        } else {
            FusionMode::Gated
        };
        let fusion = Fusion::new(&mut store, hidden, config.gcn.hidden, mode, rng);
        let classifier = Classifier::new(&mut store, "classifier", config.gcn.hidden, tagset.len(), rng);
        let raw = AlphaParam::from_alpha(config.alpha_init)?.raw;
        let alpha = store.add("prune.alpha", Tensor::scalar(raw));
        let mask = TransitionMask::bio(&tagset);
        Ok(PolarModel {
            config,
            store,
            tagset,
            vocab,
            encoder,
            heads,
            gcn,
            fusion,
            classifier,
            alpha,
            mask,
        })
    }

    pub fn alpha_value(&self) -> f64 {
        alpha_from_raw(self.store.value(self.alpha).item())
    }

    pub fn linearize(&self, d: &Dialogue) -> Result<NodeSequence> {
        linearize(d, &self.tagset)
    }

    fn edge_mode(&self, train: bool) -> EdgeMode {
        let stochastic = if train {
            self.config.stochastic_edges
        } else {
            !self.config.deterministic_eval
        };
        if stochastic {
            EdgeMode::Stochastic
        } else {
            EdgeMode::Deterministic
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, seq: &NodeSequence, train: bool, rng: &mut R) -> Result<Forward> {
        let store = &self.store;
        let ab = &self.config.ablations;
        let ids = self.encoder.ids(seq, &self.vocab, EmbedMode::Task)?;
        let h = self.encoder.encode(tape, store, &ids, self.config.dropout, train, rng)?;

        let head_in = if ab.no_pgi {
            h
        } else {
            inducer::pgi_attend(tape, h, seq.predicate)?.0
        };
        let (a, b) = self.heads.forward(tape, store, head_in)?;
        let noise = inducer::edge_noise(seq.len(), self.edge_mode(train), self.config.inducer.noise, rng);
        let edges_raw = inducer::induce(tape, a, b, &noise, &self.config.inducer)?;
        let edges = if ab.no_prune {
            edges_raw
        } else {
            let raw = tape.param(store, self.alpha);
            inducer::prune(tape, edges_raw, raw, self.config.inducer.prune_axis)?
        };

        let r = self.gcn.forward(tape, store, h, edges)?;
        let fused = self.fusion.forward(tape, store, r, h)?;
        let feats = tape.dropout(fused.features, self.config.dropout, train, rng);
        let log_probs = self.classifier.forward(tape, store, feats)?;
        Ok(Forward {
            log_probs,
            edges_raw,
            edges,
            gate: fused.gate,
        })
    }

    /// Best BIO-valid label sequence for `seq` in evaluation mode.
    pub fn decode<R: Rng + ?Sized>(&self, seq: &NodeSequence, rng: &mut R) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, seq, false, rng)?;
        Ok(viterbi_decode(tape.value(out.log_probs), &self.mask))
    }

    /// Predicted spans in utterance coordinates.
    pub fn predict<R: Rng + ?Sized>(&self, d: &Dialogue, rng: &mut R) -> Result<Vec<RoleSpan>> {
        let seq = self.linearize(d)?;
        let labels = self.decode(&seq, rng)?;
        Ok(seq.role_spans(&labels, &self.tagset))
    }

    pub fn inspect_graph<R: Rng + ?Sized>(&self, d: &Dialogue, rng: &mut R) -> Result<GraphDump> {
        let seq = self.linearize(d)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &seq, false, rng)?;
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let raw = tape.value(out.edges_raw);
        let (pruned, support) = if self.config.ablations.no_prune {
            (None, None)
        } else {
            let p = tape.value(out.edges);
            let support = (0..p.rows()).map(|r| p.row(r).iter().filter(|&&v| v > 0.0).count()).collect();
            (Some(rows(p)), Some(support))
        };
        Ok(GraphDump {
            dialogue_id: d.dialogue_id.clone(),
            surfaces: seq.nodes.iter().map(|n| n.surface.clone()).collect(),
            predicate: seq.predicate,
            alpha: self.alpha_value(),
            edges_raw: rows(raw),
            edges_pruned: pruned,
            support,
        })
    }
}
