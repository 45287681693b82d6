//! GCN over the pruned latent graph and the gated fusion with contextual
//! features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    pub layers: usize,
    pub hidden: usize,
    pub degree_eps: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig { layers: 2, hidden: 350, degree_eps: 1e-6 }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("gcn needs at least one layer".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("gcn hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// Row-normalised adjacency with self-loops, `D⁻¹ (E + I)`.
pub fn normalized_adjacency(tape: &mut Tape, edges: Var, eps: f64) -> Result<Var> {
    let (k, c) = tape.shape(edges);
    if k != c {
        return Err(Error::ShapeMismatch { op: "adjacency", lhs: (k, c), rhs: (c, k) });
    }
    let eye = tape.constant(Tensor::eye(k));
    let a = tape.add(edges, eye)?;
    let deg = tape.sum_rows(a);
    let deg = tape.clamp_min(deg, eps);
    let inv = tape.pow(deg, -1.0);
    tape.mul(a, inv)
}

/// One propagation step `ReLU(N R W + b)` given a normalised adjacency `N`.
pub fn gcn_layer(tape: &mut Tape, store: &ParamStore, r: Var, norm_adj: Var, layer: &Linear) -> Result<Var> {
    let (k, _) = tape.shape(r);
    let (n, _) = tape.shape(norm_adj);
    if n != k {
        return Err(Error::ShapeMismatch {
            op: "gcn_layer",
            lhs: tape.shape(norm_adj),
            rhs: tape.shape(r),
        });
    }
    let msg = tape.matmul(norm_adj, r)?;
    let y = layer.forward(tape, store, msg)?;
    Ok(tape.relu(y))
}

#[derive(Clone, Debug)]
pub struct GcnStack {
    pub layers: Vec<Linear>,
    pub config: GcnConfig,
}

impl GcnStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, input: usize, config: GcnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|m| {
                let fan_in = if m == 0 { input } else { config.hidden };
                Linear::new(store, &format!("gcn.layer{m}"), fan_in, config.hidden, true, rng)
            })
            .collect();
        Ok(GcnStack { layers, config })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var, edges: Var) -> Result<Var> {
        let adj = normalized_adjacency(tape, edges, self.config.degree_eps)?;
        let mut r = h;
        for layer in &self.layers {
            r = gcn_layer(tape, store, r, adj, layer)?;
        }
        Ok(r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Gated,
    Additive,
}

/// Combines structural features `R` with contextual features `H`.
#[derive(Clone, Debug)]
pub struct Fusion {
    /// Present when `H` is narrower or wider than `R`.
    pub project: Option<Linear>,
    pub gate: Linear,
    pub mode: FusionMode,
}

pub struct FusionOutput {
    pub features: Var,
    pub gate: Option<Var>,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        context_dim: usize,
        graph_dim: usize,
        mode: FusionMode,
        rng: &mut R,
    ) -> Self {
        let project = (context_dim != graph_dim)
            .then(|| Linear::new(store, "fusion.project", context_dim, graph_dim, false, rng));
        let gate = Linear::new(store, "fusion.gate", 2 * graph_dim, graph_dim, false, rng);
        Fusion { project, gate, mode }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, r: Var, h: Var) -> Result<FusionOutput> {
        let h = match &self.project {
            Some(p) => p.forward(tape, store, h)?,
            None => h,
        };
        match self.mode {
            FusionMode::Additive => Ok(FusionOutput { features: tape.add(r, h)?, gate: None }),
            FusionMode::Gated => {
                let cat = tape.concat_cols(&[r, h])?;
                let z = self.gate.forward(tape, store, cat)?;
                let g = tape.sigmoid(z);
                let features = gate_mix(tape, g, r, h)?;
                Ok(FusionOutput { features, gate: Some(g) })
            }
        }
    }
}

/// `g ⊙ r + (1 − g) ⊙ h`.
pub fn gate_mix(tape: &mut Tape, g: Var, r: Var, h: Var) -> Result<Var> {
    let gr = tape.mul(g, r)?;
    let inv = tape.one_minus(g);
    let gh = tape.mul(inv, h)?;
    tape.add(gr, gh)
}
