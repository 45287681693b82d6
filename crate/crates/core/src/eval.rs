//! Span-level precision, recall and F1 over all, cross- and
//! intra-utterance arguments.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dialogue::{Dialogue, RoleSpan};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

/// Miss rate of gold arguments a given number of utterances before the
/// predicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub distance: String,
    pub support: usize,
    pub missed: usize,
    /// `1 − recall`; `None` without support.
    pub error_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dialogues: usize,
    pub all: Prf,
    pub cross: Prf,
    pub intra: Prf,
    pub by_distance: Vec<DistanceRow>,
}

const BUCKETS: [&str; 3] = ["1", "2", "3+"];

#[derive(Default)]
struct Counts {
    correct: usize,
    predicted: usize,
    gold: usize,
}

pub fn evaluate(predictions: &[Dialogue], gold: &[Dialogue]) -> Result<EvalReport> {
    let mut pred_by_id: HashMap<&str, &Dialogue> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        pred_by_id.insert(&p.dialogue_id, p);
    }
    let gold_ids: HashSet<&str> = gold.iter().map(|g| g.dialogue_id.as_str()).collect();
    if let Some(p) = predictions.iter().find(|p| !gold_ids.contains(p.dialogue_id.as_str())) {
        return Err(Error::UnmatchedDialogue(p.dialogue_id.clone()));
    }

    let (mut cross, mut intra) = (Counts::default(), Counts::default());
    let mut dist_support = [0usize; 3];
    let mut dist_hit = [0usize; 3];
    for g in gold {
        let p = pred_by_id
            .get(g.dialogue_id.as_str())
            .ok_or_else(|| Error::UnmatchedDialogue(g.dialogue_id.clone()))?;
        let prd = g.predicate.utt;
        let gold_set: HashSet<&RoleSpan> = g.roles.iter().collect();
        let pred_set: HashSet<&RoleSpan> = p.roles.iter().collect();
        for s in &pred_set {
            let c = if s.utt == prd { &mut intra } else { &mut cross };
            c.predicted += 1;
        }
        for s in &gold_set {
            let hit = pred_set.contains(s);
            let c = if s.utt == prd { &mut intra } else { &mut cross };
            c.gold += 1;
            c.correct += usize::from(hit);
            if s.utt < prd {
                let b = (prd - s.utt - 1).min(2);
                dist_support[b] += 1;
                dist_hit[b] += usize::from(hit);
            }
        }
    }
    let prf = |c: &Counts| Prf::from_counts(c.correct, c.predicted, c.gold);
    let all = Prf::from_counts(
        cross.correct + intra.correct,
        cross.predicted + intra.predicted,
        cross.gold + intra.gold,
    );
    let by_distance = BUCKETS
        .iter()
        .enumerate()
        .map(|(i, name)| DistanceRow {
            distance: (*name).to_string(),
            support: dist_support[i],
            missed: dist_support[i] - dist_hit[i],
            error_rate: (dist_support[i] > 0).then(|| 1.0 - dist_hit[i] as f64 / dist_support[i] as f64),
        })
        .collect();
    Ok(EvalReport {
        dialogues: gold.len(),
        all,
        cross: prf(&cross),
        intra: prf(&intra),
        by_distance,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dialogues: {}", self.dialogues);
        let _ = writeln!(s, "{:<8}{:>10}{:>10}{:>10}{:>9}{:>11}{:>7}", "scope", "P", "R", "F1", "correct", "predicted", "gold");
        for (name, p) in [("all", &self.all), ("cross", &self.cross), ("intra", &self.intra)] {
            let _ = writeln!(
                s,
                "{:<8}{:>10.4}{:>10.4}{:>10.4}{:>9}{:>11}{:>7}",
                name, p.precision, p.recall, p.f1, p.correct, p.predicted, p.gold
            );
        }
        let _ = writeln!(s, "{:<10}{:>9}{:>8}{:>12}", "distance", "support", "missed", "error rate");
        for row in &self.by_distance {
            let rate = row.error_rate.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(s, "{:<10}{:>9}{:>8}{:>12}", row.distance, row.support, row.missed, rate);
        }
        s
    }
}
