use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;

use super::spec::{CellSpec, EdgeId, ParamId};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{mixture_weights, Tensor};
use crate::{Error, Result};

/// Logit used for an exactly-zero mixture weight. `exp(-1000)` underflows to
/// 0, so the op contributes nothing and its share of the normalizer is 0.
pub const LOG_ZERO_OFFSET: f64 = 1000.0;

/// Trainable values: weights keyed by [`ParamId`], architecture logits keyed
/// by [`EdgeId`], plus the seed the fresh tensors were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub weights: BTreeMap<ParamId, Tensor>,
    pub alphas: BTreeMap<EdgeId, Vec<f64>>,
    pub seed: u64,
}

fn init_seed(seed: u64, id: &ParamId) -> u64 {
    match id {
        ParamId::Cell(n) => derive_seed(seed, "init/cell", *n),
        ParamId::Aux(name) => derive_seed(seed, &format!("init/{name}"), 0),
    }
}

/// Uniform(-1/sqrt(n_h), 1/sqrt(n_h)) draw for parameter `id`. Each id has
/// its own stream, so growth never shifts the draws of other tensors.
pub fn standard_init(seed: u64, id: &ParamId, shape: (usize, usize), n_h: usize) -> Tensor {
    let bound = 1.0 / (n_h.max(1) as f64).sqrt();
    let mut rng = rng_from_seed(init_seed(seed, id));
    Tensor::from_fn(shape.0, shape.1, |_, _| rng.random_range(-bound..=bound))
}

impl ModelState {
    pub fn empty(seed: u64) -> Self {
        ModelState {
            weights: BTreeMap::new(),
            alphas: BTreeMap::new(),
            seed,
        }
    }

    /// Fresh state for `spec`: standard-initialized weights, zero logits.
    pub fn for_spec(spec: &CellSpec, seed: u64) -> Self {
        let mut state = ModelState::empty(seed);
        state.fill_missing(spec);
        state
    }

    /// Initializes any tensor or logit vector `spec` references but the
    /// state lacks. Existing entries are untouched.
    pub fn fill_missing(&mut self, spec: &CellSpec) {
        for e in spec.edges() {
            self.alphas
                .entry(e.id)
                .or_insert_with(|| vec![0.0; e.ops.len()]);
            for op in &e.ops {
                for (id, shape) in op.params.iter().zip(spec.param_shapes(e, op)) {
                    if !self.weights.contains_key(id) {
                        let t = standard_init(self.seed, id, shape, spec.n_h);
                        self.weights.insert(id.clone(), t);
                    }
                }
            }
        }
    }

    pub fn insert_standard(&mut self, id: ParamId, shape: (usize, usize), n_h: usize) {
        let t = standard_init(self.seed, &id, shape, n_h);
        self.weights.insert(id, t);
    }

    pub fn weight(&self, id: &ParamId) -> Result<&Tensor> {
        self.weights
            .get(id)
            .ok_or_else(|| Error::Integrity(format!("missing parameter {id}")))
    }

    pub fn alpha(&self, edge: EdgeId) -> Result<&[f64]> {
        self.alphas
            .get(&edge)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Integrity(format!("missing alphas for {edge}")))
    }

    /// Current mixture weights of an edge.
    pub fn edge_weights(&self, spec: &CellSpec, edge: EdgeId) -> Result<Vec<f64>> {
        let e = spec
            .edge(edge)
            .ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
        Ok(mixture_weights(self.alpha(edge)?, &e.halvings())?)
    }

    /// Effective logits `alpha - halvings * ln 2` of an edge.
    pub fn effective_alpha(&self, spec: &CellSpec, edge: EdgeId) -> Result<Vec<f64>> {
        let e = spec
            .edge(edge)
            .ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
        Ok(self
            .alpha(edge)?
            .iter()
            .zip(&e.ops)
            .map(|(a, o)| a - f64::from(o.halvings) * std::f64::consts::LN_2)
            .collect())
    }

    /// Drops cell tensors and logits that `spec` no longer references.
    pub fn retain_for(&mut self, spec: &CellSpec) {
        let params = spec.param_ids();
        let edges = spec.edge_ids();
        self.weights
            .retain(|id, _| !id.is_cell() || params.contains(id));
        self.alphas.retain(|id, _| edges.contains(id));
    }

    /// Checks that cell parameter ids and logit vectors are in exact bijection
    /// with `spec`, with matching shapes. Auxiliary tensors are ignored.
    pub fn check(&self, spec: &CellSpec) -> Result<()> {
        let want: BTreeSet<ParamId> = spec.param_ids();
        let have: BTreeSet<ParamId> = self
            .weights
            .keys()
            .filter(|k| k.is_cell())
            .cloned()
            .collect();
        if want != have {
            let missing: Vec<_> = want.difference(&have).map(|p| p.to_string()).collect();
            let orphans: Vec<_> = have.difference(&want).map(|p| p.to_string()).collect();
            return Err(Error::Integrity(format!(
                "parameter mismatch: missing {missing:?}, orphaned {orphans:?}"
            )));
        }
        let edges = spec.edge_ids();
        if self.alphas.keys().copied().collect::<BTreeSet<_>>() != edges {
            return Err(Error::Integrity("logit vectors do not match edges".into()));
        }
        for e in spec.edges() {
            if self.alphas[&e.id].len() != e.ops.len() {
                return Err(Error::Integrity(format!(
                    "edge {} has {} ops but {} logits",
                    e.id,
                    e.ops.len(),
                    self.alphas[&e.id].len()
                )));
            }
            for op in &e.ops {
                for (id, shape) in op.params.iter().zip(spec.param_shapes(e, op)) {
                    if self.weights[id].shape() != shape {
                        return Err(Error::Integrity(format!(
                            "{id} has shape {:?}, expected {shape:?}",
                            self.weights[id].shape()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn weight_count(&self) -> usize {
        self.weights.values().map(Tensor::len).sum()
    }

    pub fn alpha_count(&self) -> usize {
        self.alphas.values().map(Vec::len).sum()
    }

    /// True when every tensor and logit is bit-identical.
    pub fn bit_eq(&self, other: &ModelState) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
            && self.alphas.len() == other.alphas.len()
            && self.alphas.iter().zip(&other.alphas).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.len() == b.len()
                    && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Logits reproducing the simplex point `w` in the gauge `sum exp(alpha) = 1`.
/// Zero entries map to a logit far enough below the rest to underflow.
pub fn invert_softmax(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() || w.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Precondition(format!("not a simplex point: {w:?}")));
    }
    let max = w.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::Precondition("all-zero weight vector".into()));
    }
    let floor = max.ln() - LOG_ZERO_OFFSET;
    Ok(w.iter()
        .map(|&v| if v > 0.0 { v.ln() } else { floor })
        .collect())
}
