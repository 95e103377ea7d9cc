//! Architecture transforms: node growth, operator growth (duplication and
//! splitting), pruning, replacement and re-sampling, plus trigger criteria.
//!
//! Every transform is a pure function from `(spec, state, rng)` to a new
//! pair and a [`GrowthEvent`] that records the structural deltas, the noise
//! drawn and, for function-preserving transforms, the measured output
//! discrepancy on a probe batch.

mod criteria;
pub mod eigen;
mod grow;
mod prune;
mod split;

pub use criteria::{criteria_check, CriteriaInput, Decision};
pub use grow::{grow_node, grow_node_darts, grow_node_two_to_one, grow_operator_morph};
pub use prune::{prune_operator_dynamic, prune_stage, replace_operator, resample_operator, top_k};
pub use split::{
    grow_operator_split, select_split_ops, split_report, split_report_from_records, OpSplit,
    SplitRecord, SplitReport, SplitStrategy, UnitSplit,
};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cells::{evaluate_cell, CellSpec, EdgeId, ModelState, NodeId, OutputRule, SpecDelta};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphConfig {
    /// Bound of the uniform noise on small combination weights.
    pub delta: f64,
    /// Standard deviation of the Gaussian entries of new near-identity weights.
    pub sigma: f64,
    pub op_grow_threshold: f64,
    pub op_prune_threshold: f64,
    pub split_strategy: SplitStrategy,
    pub keep_k: usize,
    /// Split offset as a fraction of each unit's parameter norm.
    pub split_step_scale: f64,
    pub probe_samples: usize,
    /// Operator growth never takes an edge beyond this many ops.
    pub max_ops_per_edge: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig {
            delta: 1e-3,
            sigma: 1e-3,
            op_grow_threshold: 0.75,
            op_prune_threshold: 0.05,
            split_strategy: SplitStrategy::MinSum,
            keep_k: 1,
            split_step_scale: 1e-2,
            probe_samples: 64,
            max_ops_per_edge: 8,
        }
    }
}

impl MorphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.25).contains(&self.delta) {
            return Err(Error::Config(format!(
                "morph.delta must be in [0, 0.25), got {}",
                self.delta
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("morph.sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0 < self.op_prune_threshold
            && self.op_prune_threshold < self.op_grow_threshold
            && self.op_grow_threshold < 1.0)
        {
            return Err(Error::Config(
                "need 0 < op_prune_threshold < op_grow_threshold < 1".into(),
            ));
        }
        if self.keep_k == 0 || self.probe_samples == 0 || self.max_ops_per_edge < 2 {
            return Err(Error::Config(
                "keep_k and probe_samples must be >= 1, max_ops_per_edge >= 2".into(),
            ));
        }
        if !(self.split_step_scale >= 0.0 && self.split_step_scale.is_finite()) {
            return Err(Error::Config("morph.split_step_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GrowNode,
    GrowOpMorph,
    GrowOpSplit,
    PruneOp,
    ReplaceOp,
    ResampleOp,
    PruneStage,
}

/// Audit record of one transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthEvent {
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeId>,
    /// Raw noise draws, in draw order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub noise: Vec<f64>,
    /// Max |new - old| cell output over the probe batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preservation_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub deltas: Vec<SpecDelta>,
}

impl GrowthEvent {
    fn new(kind: EventKind) -> Self {
        GrowthEvent {
            kind,
            stage: None,
            node: None,
            edges: Vec::new(),
            noise: Vec::new(),
            preservation_error: None,
            notes: Vec::new(),
            deltas: Vec::new(),
        }
    }
}

/// Result of a transform.
#[derive(Clone, Debug)]
pub struct Transformed {
    pub spec: CellSpec,
    pub state: ModelState,
    pub event: GrowthEvent,
}

/// Uniform `[-1, 1]` probe inputs `(x, h)`, fixed per seed.
pub fn probe_batch(spec: &CellSpec, seed: u64, samples: usize) -> (Tensor, Tensor) {
    let mut rng = stream(seed, "probe", 0);
    let x = Tensor::from_fn(samples, spec.n_x, |_, _| rng.random_range(-1.0..=1.0));
    let h = Tensor::from_fn(samples, spec.n_h, |_, _| rng.random_range(-1.0..=1.0));
    (x, h)
}

/// Max absolute difference between two cells' one-step outputs on the probe batch.
pub fn output_discrepancy(
    old: (&CellSpec, &ModelState),
    new: (&CellSpec, &ModelState),
    probes: &(Tensor, Tensor),
) -> Result<f64> {
    let a = evaluate_cell(old.0, old.1, &probes.0, &probes.1)?;
    let b = evaluate_cell(new.0, new.1, &probes.0, &probes.1)?;
    a.max_abs_diff(&b)
        .ok_or_else(|| Error::Contract("cells disagree on output shape".into()))
}

/// True when the probe outputs of two cells are bit-identical.
pub fn outputs_bit_equal(
    old: (&CellSpec, &ModelState),
    new: (&CellSpec, &ModelState),
    probes: &(Tensor, Tensor),
) -> Result<bool> {
    let a = evaluate_cell(old.0, old.1, &probes.0, &probes.1)?;
    let b = evaluate_cell(new.0, new.1, &probes.0, &probes.1)?;
    Ok(a.bit_eq(&b))
}

fn with_rule(spec: &CellSpec, rule: OutputRule) -> CellSpec {
    let mut s = spec.clone();
    s.output_rule = rule;
    s
}

/// Records the probe discrepancy on `t.event`. DARTS cells with mean output
/// are compared under the last-node rule, and the mean-rule figure is noted.
fn record_preservation(old: (&CellSpec, &ModelState), t: &mut Transformed, cfg: &MorphConfig) -> Result<()> {
    let probes = probe_batch(old.0, t.state.seed, cfg.probe_samples);
    let darts_mean = old.0.backbone == crate::cells::Backbone::Darts
        && old.0.output_rule == OutputRule::Mean
        && old.0.node_count() != t.spec.node_count();
    if darts_mean {
        let (a, b) = (with_rule(old.0, OutputRule::Last), with_rule(&t.spec, OutputRule::Last));
        t.event.preservation_error = Some(output_discrepancy((&a, old.1), (&b, &t.state), &probes)?);
        let mean = output_discrepancy(old, (&t.spec, &t.state), &probes)?;
        t.event.notes.push(format!(
            "mean output rule: node count changes the divisor, so exact preservation cannot hold; \
             error measured under last-node output, mean-rule discrepancy {mean:e}"
        ));
    } else {
        t.event.preservation_error = Some(output_discrepancy(old, (&t.spec, &t.state), &probes)?);
    }
    Ok(())
}

/// Applies `deltas` to copies of `spec`/`state`, drops orphaned tensors and
/// initializes any new ones with the standard scheme.
fn apply_deltas(spec: &CellSpec, state: &ModelState, deltas: &[SpecDelta]) -> Result<(CellSpec, ModelState)> {
    let mut spec = spec.clone();
    for d in deltas {
        spec.apply(d)?;
    }
    spec.validate()?;
    let mut state = state.clone();
    state.retain_for(&spec);
    state.fill_missing(&spec);
    Ok((spec, state))
}

/// Replays event deltas against an initial spec.
pub fn replay<'a>(initial: &CellSpec, events: impl IntoIterator<Item = &'a GrowthEvent>) -> Result<CellSpec> {
    let mut spec = initial.clone();
    for e in events {
        for d in &e.deltas {
            spec.apply(d)?;
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Sum of each edge's mixture weights minus one, worst case over the cell.
pub fn normalization_error(spec: &CellSpec, state: &ModelState) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for e in spec.edges() {
        let w = state.edge_weights(spec, e.id)?;
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(worst)
}
