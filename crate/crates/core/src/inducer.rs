//! Predicate-oriented latent graph induction.
//!
//! 1. Predicate-centred attention re-weights every node's context with a
//!    Gaussian prior `exp(-π d²)` on the key's distance to the predicate.
//! 2. Two feed-forward heads map the result to score vectors; their outer
//!    products give positive HardKuma shape matrices `A` and `B`.
//! 3. Each edge strength is one HardKuma draw, and rows are then sparsified
//!    with learnable α-entmax.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::kuma::{STRETCH_LOWER, STRETCH_UPPER};
use crate::nn::FeedForward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// Independent uniform noise per edge.
    PerEdge,
    /// One draw per row, shared by all of that node's outgoing edges.
    PerRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadNorm {
    /// `softplus(S) + ε`.
    Softplus,
    /// `softplus(S) + ε`, each row divided by its mean.
    SoftplusRowMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneAxis {
    Row,
    Column,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    Stochastic,
    /// Median noise `u = 0.5` on every edge.
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InducerConfig {
    pub head_hidden: usize,
    pub head_dim: usize,
    pub shape_eps: f64,
    pub stretch_lower: f64,
    pub stretch_upper: f64,
    pub noise: NoiseSharing,
    pub norm: HeadNorm,
    pub prune_axis: PruneAxis,
}

impl Default for InducerConfig {
    fn default() -> Self {
        InducerConfig {
            head_hidden: 64,
            head_dim: 32,
            shape_eps: 1e-4,
            stretch_lower: STRETCH_LOWER,
            stretch_upper: STRETCH_UPPER,
            noise: NoiseSharing::PerEdge,
            norm: HeadNorm::Softplus,
            prune_axis: PruneAxis::Row,
        }
    }
}

/// Log-space prior `-π d(l, prd)²` for every key position `l`.
pub fn gaussian_bias(k: usize, predicate: usize) -> Result<Vec<f64>> {
    if predicate >= k {
        return Err(Error::Domain(format!(
            "predicate index {predicate} outside sequence of length {k}"
        )));
    }
    Ok((0..k)
        .map(|l| {
            let d = l.abs_diff(predicate) as f64;
            -PI * d * d
        })
        .collect())
}

/// Predicate-centred attention. Returns the re-weighted rows and the
/// attention matrix.
pub fn pgi_attend(tape: &mut Tape, h: Var, predicate: usize) -> Result<(Var, Var)> {
    let (k, dim) = tape.shape(h);
    let bias = tape.constant(Tensor::row_vector(gaussian_bias(k, predicate)?));
    let scores = tape.matmul_t(h, h)?;
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let scores = tape.add(scores, bias)?;
    let weights = tape.softmax_rows(scores);
    let out = tape.matmul(weights, h)?;
    Ok((out, weights))
}

/// The two feed-forward heads producing HardKuma shape matrices.
#[derive(Clone, Debug)]
pub struct ParamHeads {
    pub a: FeedForward,
    pub b: FeedForward,
    pub config: InducerConfig,
}

impl ParamHeads {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, config: InducerConfig, rng: &mut R) -> Self {
        ParamHeads {
            a: FeedForward::new(store, "inducer.head_a", input, config.head_hidden, config.head_dim, rng),
            b: FeedForward::new(store, "inducer.head_b", input, config.head_hidden, config.head_dim, rng),
            config,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
        let sa = self.a.forward(tape, store, h)?;
        let sb = self.b.forward(tape, store, h)?;
        let a = shape_matrix(tape, sa, self.config.shape_eps, self.config.norm)?;
        let b = shape_matrix(tape, sb, self.config.shape_eps, self.config.norm)?;
        Ok((a, b))
    }
}

/// `norm(s sᵀ)`: strictly positive `K×K` shapes from `K×d` scores.
pub fn shape_matrix(tape: &mut Tape, s: Var, eps: f64, norm: HeadNorm) -> Result<Var> {
    let outer = tape.matmul_t(s, s)?;
    let pos = tape.softplus(outer);
    let pos = tape.affine(pos, 1.0, eps);
    match norm {
        HeadNorm::Softplus => Ok(pos),
        HeadNorm::SoftplusRowMean => {
            let k = tape.shape(pos).1 as f64;
            let sums = tape.sum_rows(pos);
            let inv = tape.pow(sums, -1.0);
            let inv = tape.scale(inv, k);
            tape.mul(pos, inv)
        }
    }
}

/// Uniform noise for a `k×k` edge draw.
pub fn edge_noise<R: Rng + ?Sized>(k: usize, mode: EdgeMode, sharing: NoiseSharing, rng: &mut R) -> Tensor {
    match mode {
        EdgeMode::Deterministic => Tensor::filled(k, k, 0.5),
        EdgeMode::Stochastic => match sharing {
            NoiseSharing::PerEdge => Tensor::from_fn(k, k, |_, _| open_unit(rng)),
            NoiseSharing::PerRow => {
                let row: Vec<f64> = (0..k).map(|_| open_unit(rng)).collect();
                Tensor::from_fn(k, k, |i, _| row[i])
            }
        },
    }
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(f64::EPSILON..1.0)
}

/// Samples the raw edge-strength matrix `E_raw ∈ [0, 1]^{K×K}`.
pub fn induce(tape: &mut Tape, a: Var, b: Var, noise: &Tensor, config: &InducerConfig) -> Result<Var> {
    tape.hardkuma(a, b, noise, config.stretch_lower, config.stretch_upper)
}

/// α-entmax over rows (or columns) of `E_raw`; `raw_alpha` is the `1×1`
/// unconstrained α parameter.
pub fn prune(tape: &mut Tape, e_raw: Var, raw_alpha: Var, axis: PruneAxis) -> Result<Var> {
    match axis {
        PruneAxis::Row => tape.entmax_rows(e_raw, raw_alpha),
        PruneAxis::Column => {
            let t = tape.transpose(e_raw);
            let p = tape.entmax_rows(t, raw_alpha)?;
            Ok(tape.transpose(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entmax::{self, AlphaParam};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_bias_values() {
        let b = gaussian_bias(5, 2).unwrap();
        assert_eq!(b[2], 0.0);
        assert!((b[1].exp() - 0.04322).abs() < 1e-5);
        assert!((b[0].exp() - 3.49e-6).abs() < 1e-8);
        assert_eq!(b[1], b[3]);
        assert!(gaussian_bias(3, 3).is_err());
    }

    #[test]
    fn pgi_identical_rows_weight_the_predicate() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::filled(3, 4, 0.7));
        let (_, w) = pgi_attend(&mut tape, h, 1).unwrap();
        let expect = 1.0 / (1.0 + 2.0 * (-PI).exp());
        assert!((expect - 0.9205).abs() < 1e-4);
        let wt = tape.value(w);
        for i in 0..3 {
            assert!((wt.get(i, 1) - expect).abs() < 1e-12);
            assert!((wt.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pgi_prefers_nearer_keys() {
        // orthogonal keys give equal dot products with any query on row 0
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(5, 5, |i, j| if i == j && i != 0 { 1.0 } else { 0.0 }));
        let (_, w) = pgi_attend(&mut tape, h, 2).unwrap();
        let wt = tape.value(w);
        assert!(wt.get(0, 1) > wt.get(0, 4));
    }

    #[test]
    fn pgi_shift_invariant_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Tensor::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        // a per-row constant added to the scores leaves the weights unchanged
        let mut tape = Tape::new();
        let h = tape.constant(base);
        let (k, d) = tape.shape(h);
        let bias = tape.constant(Tensor::row_vector(gaussian_bias(k, 3).unwrap()));
        let s = tape.matmul_t(h, h).unwrap();
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let s = tape.add(s, bias).unwrap();
        let shift = tape.constant(Tensor::from_fn(k, 1, |i, _| i as f64 * 3.5 - 2.0));
        let shifted = tape.add(s, shift).unwrap();
        let a = tape.softmax_rows(s);
        let b = tape.softmax_rows(shifted);
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
        let (_, w) = pgi_attend(&mut tape, h, 3).unwrap();
        assert!(tape.value(w).max_abs_diff(tape.value(a)) < 1e-15);
    }

    #[test]
    fn shape_matrix_positive_and_zero_case() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(4, 3));
        let a = shape_matrix(&mut tape, z, 1e-4, HeadNorm::Softplus).unwrap();
        let expect = 2f64.ln() + 1e-4;
        assert!((expect - 0.6932).abs() < 1e-4);
        assert!(tape.value(a).data().iter().all(|&v| (v - expect).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = tape.constant(Tensor::from_fn(5, 3, |_, _| rng.random_range(-6.0..6.0)));
        for norm in [HeadNorm::Softplus, HeadNorm::SoftplusRowMean] {
            let a = shape_matrix(&mut tape, s, 1e-4, norm).unwrap();
            assert!(tape.value(a).data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn heads_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let heads = ParamHeads::new(&mut store, 6, InducerConfig::default(), &mut rng);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0)));
        let (a, b) = heads.forward(&mut tape, &store, h).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-6);
        assert!(tape.value(a).data().iter().chain(tape.value(b).data()).all(|&v| v > 0.0));
    }

    #[test]
    fn deterministic_uniform_shapes_give_half() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(4, 4, 1.0));
        let b = tape.constant(Tensor::filled(4, 4, 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = edge_noise(4, EdgeMode::Deterministic, NoiseSharing::PerEdge, &mut rng);
        let e = induce(&mut tape, a, b, &noise, &InducerConfig::default()).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn stochastic_edges_in_unit_interval_and_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::from_fn(6, 6, |i, j| 0.2 + (i * j) as f64 * 0.3));
            let b = tape.constant(Tensor::from_fn(6, 6, |i, j| 0.1 + (i + j) as f64 * 0.5));
            let noise = edge_noise(6, EdgeMode::Stochastic, NoiseSharing::PerEdge, &mut rng);
            let e = induce(&mut tape, a, b, &noise, &InducerConfig::default()).unwrap();
            tape.value(e).clone()
        };
        let e = draw(3);
        assert!(e.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(e, draw(3));
        assert_ne!(e, draw(4));
    }

    #[test]
    fn induce_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(3, 3, 1.0));
        let b = tape.constant(Tensor::filled(2, 2, 1.0));
        let noise = Tensor::filled(3, 3, 0.5);
        assert!(induce(&mut tape, a, b, &noise, &InducerConfig::default()).is_err());
    }

    #[test]
    fn prune_rows() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[
            vec![0.3, 0.3, 0.3, 0.3],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.9, 0.2, 0.4, 0.1],
        ]));
        let raw = tape.constant(Tensor::scalar(AlphaParam::default().raw));
        let p = prune(&mut tape, e, raw, PruneAxis::Row).unwrap();
        let pt = tape.value(p).clone();
        assert!(pt.row(0).iter().all(|v| (v - 0.25).abs() < 1e-9));
        for r in 0..3 {
            assert!((pt.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let two = tape.entmax_rows_fixed(e, 2.0).unwrap();
        let sm = entmax::sparsemax(&[0.9, 0.2, 0.4, 0.1]).unwrap();
        for (x, y) in tape.value(two).row(2).iter().zip(&sm) {
            assert!((x - y).abs() < 1e-9);
        }
        // gap larger than 1 at α = 2 gives a one-hot row
        let big = tape.constant(Tensor::row_vector(vec![0.1, 1.5, 0.3]));
        let oh = tape.entmax_rows_fixed(big, 2.0).unwrap();
        assert_eq!(tape.value(oh).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn column_pruning_normalises_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_fn(5, 5, |_, _| rng.random_range(0.0..1.0)));
        let raw = tape.constant(Tensor::scalar(0.0));
        let p = prune(&mut tape, e, raw, PruneAxis::Column).unwrap();
        let pt = tape.value(p).transpose();
        for r in 0..5 {
            assert!((pt.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn support_shrinks_with_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let raw = Tensor::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0));
        let mut prev = usize::MAX;
        for alpha in [1.1, 1.3, 1.5, 1.7, 1.9, 2.0] {
            let mut tape = Tape::new();
            let e = tape.constant(raw.clone());
            let p = tape.entmax_rows_fixed(e, alpha).unwrap();
            let nz = tape.value(p).data().iter().filter(|&&v| v > 0.0).count();
            assert!(nz <= prev);
            prev = nz;
        }
    }
}
