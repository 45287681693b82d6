//! BIO labelling: tagset, softmax classifier, cross-entropy and constrained
//! Viterbi decoding.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    O,
    B(usize),
    I(usize),
}

/// Labels `({B, I} × roles) ∪ {O}` with `O = 0`, `B-r = 1 + 2r`, `I-r = 2 + 2r`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tagset {
    roles: Vec<String>,
}

impl Tagset {
    pub fn new(roles: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &roles {
            if r.is_empty() || r.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid role name {r:?}")));
            }
            if !seen.insert(r) {
                return Err(Error::Config(format!("duplicate role {r}")));
            }
        }
        Ok(Tagset { roles })
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn num_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn len(&self) -> usize {
        2 * self.roles.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn role_index(&self, role: &str) -> Option<usize> {
        self.roles.iter().position(|r| r == role)
    }

    pub fn index(&self, tag: Tag) -> usize {
        match tag {
            Tag::O => 0,
            Tag::B(r) => 1 + 2 * r,
            Tag::I(r) => 2 + 2 * r,
        }
    }

    pub fn tag(&self, index: usize) -> Tag {
        assert!(index < self.len(), "label index {index} out of range");
        match index {
            0 => Tag::O,
            i if i % 2 == 1 => Tag::B((i - 1) / 2),
            i => Tag::I((i - 2) / 2),
        }
    }

    pub fn label(&self, index: usize) -> String {
        match self.tag(index) {
            Tag::O => "O".to_string(),
            Tag::B(r) => format!("B-{}", self.roles[r]),
            Tag::I(r) => format!("I-{}", self.roles[r]),
        }
    }

    pub fn parse_label(&self, label: &str) -> Result<usize> {
        if label == "O" {
            return Ok(0);
        }
        let (prefix, role) = label
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("bad label {label:?}")))?;
        let r = self
            .role_index(role)
            .ok_or_else(|| Error::Config(format!("unknown role in label {label:?}")))?;
        match prefix {
            "B" => Ok(self.index(Tag::B(r))),
            "I" => Ok(self.index(Tag::I(r))),
            _ => Err(Error::Config(format!("bad label {label:?}"))),
        }
    }
}

/// BIO validity: `I-X` only after `B-X`/`I-X`, never first.
#[derive(Clone, Debug)]
pub struct TransitionMask {
    n: usize,
    allowed: Vec<bool>,
    start: Vec<bool>,
}

impl TransitionMask {
    pub fn bio(tagset: &Tagset) -> Self {
        let n = tagset.len();
        let mut allowed = vec![true; n * n];
        let mut start = vec![true; n];
        for next in 0..n {
            if let Tag::I(r) = tagset.tag(next) {
                start[next] = false;
                for prev in 0..n {
                    allowed[prev * n + next] = matches!(tagset.tag(prev), Tag::B(p) | Tag::I(p) if p == r);
                }
            }
        }
        TransitionMask { n, allowed, start }
    }

    pub fn num_labels(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allowed(&self, prev: usize, next: usize) -> bool {
        self.allowed[prev * self.n + next]
    }

    #[inline]
    pub fn can_start(&self, label: usize) -> bool {
        self.start[label]
    }

    pub fn is_valid(&self, labels: &[usize]) -> bool {
        match labels.first() {
            None => true,
            Some(&first) => {
                self.can_start(first) && labels.windows(2).all(|w| self.allowed(w[0], w[1]))
            }
        }
    }
}

/// Highest-scoring BIO-valid sequence under per-position emission scores.
/// Ties go to the lower label index, both at the final position and along
/// back-pointers.
pub fn viterbi_decode(emissions: &Tensor, mask: &TransitionMask) -> Vec<usize> {
    let (k, n) = emissions.shape();
    assert_eq!(n, mask.num_labels(), "emission width vs tagset");
    if k == 0 {
        return Vec::new();
    }
    let mut score = vec![f64::NEG_INFINITY; n];
    for (y, s) in score.iter_mut().enumerate() {
        if mask.can_start(y) {
            *s = emissions.get(0, y);
        }
    }
    let mut back = vec![0usize; k * n];
    let mut next = vec![f64::NEG_INFINITY; n];
    for t in 1..k {
        for y in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (p, &s) in score.iter().enumerate() {
                if mask.allowed(p, y) && s > best {
                    best = s;
                    arg = p;
                }
            }
            next[y] = best + emissions.get(t, y);
            back[t * n + y] = arg;
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut last = 0;
    for y in 1..n {
        if score[y] > score[last] {
            last = y;
        }
    }
    let mut path = vec![0; k];
    path[k - 1] = last;
    for t in (1..k).rev() {
        path[t - 1] = back[t * n + path[t]];
    }
    path
}

/// A labelled span over positions `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSpan {
    pub role: usize,
    pub start: usize,
    pub end: usize,
}

/// Extracts spans from BIO labels. An `I-X` that does not continue an open
/// `X` span opens a new one.
pub fn spans_from_tags(labels: &[usize], tagset: &Tagset) -> Vec<LabelSpan> {
    let mut spans = Vec::new();
    let mut open: Option<LabelSpan> = None;
    for (i, &l) in labels.iter().enumerate() {
        match tagset.tag(l) {
            Tag::O => {
                spans.extend(open.take());
            }
            Tag::B(r) => {
                spans.extend(open.take());
                open = Some(LabelSpan { role: r, start: i, end: i });
            }
            Tag::I(r) => match &mut open {
                Some(s) if s.role == r => s.end = i,
                _ => {
                    spans.extend(open.take());
                    open = Some(LabelSpan { role: r, start: i, end: i });
                }
            },
        }
    }
    spans.extend(open);
    spans
}

pub fn tags_from_spans(spans: &[LabelSpan], len: usize, tagset: &Tagset) -> Result<Vec<usize>> {
    let mut labels = vec![0usize; len];
    let mut taken = vec![false; len];
    for s in spans {
        if s.start > s.end || s.end >= len || s.role >= tagset.num_roles() {
            return Err(Error::Config(format!("span {s:?} out of range for length {len}")));
        }
        for i in s.start..=s.end {
            if taken[i] {
                return Err(Error::Config(format!("overlapping span {s:?}")));
            }
            taken[i] = true;
            labels[i] = if i == s.start {
                tagset.index(Tag::B(s.role))
            } else {
                tagset.index(Tag::I(s.role))
            };
        }
    }
    Ok(labels)
}

/// Linear map to label scores followed by a row-wise log-softmax.
#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, labels: usize, rng: &mut R) -> Self {
        Classifier {
            weight: store.add_glorot(format!("{prefix}.weight"), dim, labels, rng),
            bias: store.add_zeros(format!("{prefix}.bias"), 1, labels),
        }
    }

    /// `K × |labels|` log-probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, feats: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let z = tape.matmul(feats, w)?;
        let z = tape.add(z, b)?;
        Ok(tape.log_softmax_rows(z))
    }
}

/// Mean negative log-likelihood of the gold labels.
pub fn sequence_loss(tape: &mut Tape, log_probs: Var, gold: &[usize]) -> Result<Var> {
    let (k, n) = tape.shape(log_probs);
    if gold.len() != k {
        return Err(Error::ShapeMismatch {
            op: "sequence_loss",
            lhs: (k, n),
            rhs: (gold.len(), 1),
        });
    }
    let picked = tape.pick_cols(log_probs, gold)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

impl fmt::Display for Tagset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = (0..self.len()).map(|i| self.label(i)).collect();
        write!(f, "{}", labels.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tagset3() -> Tagset {
        Tagset::new(vec!["A0".into(), "A1".into(), "AM-LOC".into()]).unwrap()
    }

    #[test]
    fn tagset_bijection() {
        let ts = tagset3();
        assert_eq!(ts.len(), 7);
        for i in 0..ts.len() {
            assert_eq!(ts.index(ts.tag(i)), i);
            assert_eq!(ts.parse_label(&ts.label(i)).unwrap(), i);
        }
        assert_eq!(ts.label(5), "B-AM-LOC");
        assert!(Tagset::new(vec!["A0".into(), "A0".into()]).is_err());
    }

    #[test]
    fn mask_rules() {
        let ts = tagset3();
        let m = TransitionMask::bio(&ts);
        let b0 = ts.index(Tag::B(0));
        let i0 = ts.index(Tag::I(0));
        let i1 = ts.index(Tag::I(1));
        assert!(!m.can_start(i0));
        assert!(m.can_start(b0));
        assert!(m.allowed(b0, i0));
        assert!(m.allowed(i0, i0));
        assert!(!m.allowed(b0, i1));
        assert!(!m.allowed(0, i0));
    }

    #[test]
    fn single_position_never_inside() {
        let ts = tagset3();
        let m = TransitionMask::bio(&ts);
        let mut e = Tensor::filled(1, 7, -5.0);
        e.set(0, ts.index(Tag::I(2)), 10.0);
        e.set(0, ts.index(Tag::B(1)), 1.0);
        assert_eq!(viterbi_decode(&e, &m), vec![ts.index(Tag::B(1))]);
    }

    #[test]
    fn inside_heavy_emissions_are_repaired() {
        let ts = tagset3();
        let m = TransitionMask::bio(&ts);
        let i0 = ts.index(Tag::I(0));
        let mut e = Tensor::filled(2, 7, -3.0);
        e.set(0, i0, 5.0);
        e.set(1, i0, 5.0);
        let path = viterbi_decode(&e, &m);
        assert!(m.is_valid(&path));
        assert_eq!(path, vec![ts.index(Tag::B(0)), i0]);
    }

    #[test]
    fn classifier_zero_weights_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = Classifier::new(&mut store, "cls", 4, 7, &mut rng);
        store.value_mut(c.weight).fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(3, 4, |i, j| (i + j) as f64));
        let lp = c.forward(&mut tape, &store, x).unwrap();
        for r in 0..3 {
            let row = tape.value(lp).row(r);
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|v| (v + 7f64.ln()).abs() < 1e-12));
        }
        let loss = sequence_loss(&mut tape, lp, &[0, 3, 6]).unwrap();
        assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.9459).abs() < 1e-4);
    }

    #[test]
    fn loss_zero_on_perfect_prediction_and_length_checked() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::from_rows(&[vec![0.0, f64::MIN], vec![f64::MIN, 0.0]]));
        let l = sequence_loss(&mut tape, lp, &[0, 1]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(sequence_loss(&mut tape, lp, &[0]).is_err());
    }

    #[test]
    fn span_examples() {
        let ts = tagset3();
        let labels = [ts.index(Tag::B(0)), ts.index(Tag::I(0)), 0];
        assert_eq!(spans_from_tags(&labels, &ts), vec![LabelSpan { role: 0, start: 0, end: 1 }]);
        assert!(spans_from_tags(&[0, 0, 0], &ts).is_empty());
        let overlapping = [
            LabelSpan { role: 0, start: 0, end: 2 },
            LabelSpan { role: 1, start: 2, end: 3 },
        ];
        assert!(tags_from_spans(&overlapping, 5, &ts).is_err());
    }

    fn span_set() -> impl Strategy<Value = (usize, Vec<LabelSpan>)> {
        (1usize..30).prop_flat_map(|len| {
            proptest::collection::vec((0usize..3, 0usize..len, 1usize..4), 0..8).prop_map(move |raw| {
                let mut taken = vec![false; len];
                let mut spans = Vec::new();
                for (role, start, w) in raw {
                    let end = (start + w - 1).min(len - 1);
                    if (start..=end).all(|i| !taken[i]) {
                        (start..=end).for_each(|i| taken[i] = true);
                        spans.push(LabelSpan { role, start, end });
                    }
                }
                spans.sort_by_key(|s| s.start);
                (len, spans)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn spans_roundtrip((len, spans) in span_set()) {
            let ts = tagset3();
            let labels = tags_from_spans(&spans, len, &ts).unwrap();
            prop_assert!(TransitionMask::bio(&ts).is_valid(&labels));
            prop_assert_eq!(spans_from_tags(&labels, &ts), spans);
        }

        #[test]
        fn decoded_sequences_are_valid(seed in 0u64..10_000, k in 1usize..40) {
            let ts = tagset3();
            let mask = TransitionMask::bio(&ts);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = Tensor::from_fn(k, 7, |_, _| rng.random_range(-4.0..4.0));
            prop_assert!(mask.is_valid(&viterbi_decode(&e, &mask)));
        }

        #[test]
        fn loss_is_permutation_consistent(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 6;
            let scores = Tensor::from_fn(k, 5, |_, _| rng.random_range(-3.0..3.0));
            let gold: Vec<usize> = (0..k).map(|_| rng.random_range(0..5)).collect();
            let perm = [3, 0, 5, 1, 4, 2];
            let permuted = Tensor::from_fn(k, 5, |i, j| scores.get(perm[i], j));
            let pgold: Vec<usize> = perm.iter().map(|&p| gold[p]).collect();
            let loss = |s: Tensor, g: &[usize]| {
                let mut t = Tape::new();
                let x = t.constant(s);
                let lp = t.log_softmax_rows(x);
                let l = sequence_loss(&mut t, lp, g).unwrap();
                t.value(l).item()
            };
            prop_assert!((loss(scores, &gold) - loss(permuted, &pgold)).abs() < 1e-12);
        }
    }
}
