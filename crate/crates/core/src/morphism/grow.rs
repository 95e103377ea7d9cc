use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{apply_deltas, record_preservation, EventKind, GrowthEvent, MorphConfig, Transformed};
use crate::cells::{
    invert_softmax, Backbone, CellSpec, EdgeId, EdgeSource, ModelState, OpKind, SpecDelta,
    LOG_ZERO_OFFSET,
};
use crate::rng::Rng;
use crate::tensor::{exact_sum, Tensor};
use crate::{Error, Result};

const INIT_NOTE: &str = "non-dominant ops of the new node use standard uniform init";

/// Near-one-hot weights: every op except `primary` gets `delta * U(0, 1)`,
/// `primary` takes the rest.
fn near_one_hot(ops: &[OpKind], primary: OpKind, delta: f64, rng: &mut Rng, noise: &mut Vec<f64>) -> Vec<f64> {
    let mut w = vec![0.0; ops.len()];
    for (i, &k) in ops.iter().enumerate() {
        if k != primary {
            let e = delta * rng.random::<f64>();
            noise.push(e);
            w[i] = e;
        }
    }
    let rest = exact_sum(w.iter().copied());
    let p = ops.iter().position(|&k| k == primary).expect("primary op is in the op set");
    w[p] = 1.0 - rest;
    w
}

/// Appends node `j+1` fed by `(x_t, o_j)` whose mixed op is close to the
/// `sum` op with near-zero input weights, i.e. close to `o_{j+1} = o_j`.
pub fn grow_node_two_to_one(spec: &CellSpec, state: &ModelState, cfg: &MorphConfig, rng: &mut Rng) -> Result<Transformed> {
    cfg.validate()?;
    if spec.backbone != Backbone::TwoToOne {
        return Err(Error::Precondition("grow_node_two_to_one on a darts cell".into()));
    }
    let mut ids = spec.id_alloc();
    let node = spec.next_node(&mut ids, |_| spec.backbone.op_set().to_vec());
    let edge = node.edges[0].clone();
    let kinds: Vec<OpKind> = edge.ops.iter().map(|o| o.kind).collect();

    let mut event = GrowthEvent::new(EventKind::GrowNode);
    event.node = Some(node.id);
    event.edges = vec![edge.id];
    let w = near_one_hot(&kinds, OpKind::Tt1Sum, cfg.delta, rng, &mut event.noise);
    event.deltas.push(SpecDelta::AddNode { node });
    event.notes.push(INIT_NOTE.into());

    let (new_spec, mut new_state) = apply_deltas(spec, state, &event.deltas)?;
    new_state.alphas.insert(edge.id, invert_softmax(&w)?);
    let sum_op = &edge.ops[kinds.iter().position(|&k| k == OpKind::Tt1Sum).expect("sum op")];
    let w_su = Tensor::from_fn(spec.n_x, spec.n_h, |_, _| {
        let n: f64 = rng.sample(StandardNormal);
        event.noise.push(n);
        cfg.sigma * n
    });
    new_state.weights.insert(sum_op.params[0].clone(), w_su);

    let mut t = Transformed { spec: new_spec, state: new_state, event };
    record_preservation((spec, state), &mut t, cfg)?;
    Ok(t)
}

/// Appends a node fed by every existing node: the edge from the last node is
/// close to identity, every other edge close to the zero op.
pub fn grow_node_darts(spec: &CellSpec, state: &ModelState, cfg: &MorphConfig, rng: &mut Rng) -> Result<Transformed> {
    cfg.validate()?;
    if spec.backbone != Backbone::Darts {
        return Err(Error::Precondition("grow_node_darts on a two_to_one cell".into()));
    }
    let last = spec.nodes.last().ok_or_else(|| Error::Spec("cell has no nodes".into()))?.id;
    let mut ids = spec.id_alloc();
    let node = spec.next_node(&mut ids, |_| spec.backbone.op_set().to_vec());

    let mut event = GrowthEvent::new(EventKind::GrowNode);
    event.node = Some(node.id);
    let mut alphas: Vec<(EdgeId, Vec<f64>)> = Vec::new();
    for e in &node.edges {
        let kinds: Vec<OpKind> = e.ops.iter().map(|o| o.kind).collect();
        let primary = if e.source == EdgeSource::Node(last) {
            OpKind::DartsIdentity
        } else {
            OpKind::DartsZero
        };
        let w = near_one_hot(&kinds, primary, cfg.delta, rng, &mut event.noise);
        alphas.push((e.id, invert_softmax(&w)?));
        event.edges.push(e.id);
    }
    event.deltas.push(SpecDelta::AddNode { node });
    event.notes.push(INIT_NOTE.into());

    let (new_spec, mut new_state) = apply_deltas(spec, state, &event.deltas)?;
    new_state.alphas.extend(alphas);
    let mut t = Transformed { spec: new_spec, state: new_state, event };
    record_preservation((spec, state), &mut t, cfg)?;
    Ok(t)
}

pub fn grow_node(spec: &CellSpec, state: &ModelState, cfg: &MorphConfig, rng: &mut Rng) -> Result<Transformed> {
    match spec.backbone {
        Backbone::TwoToOne => grow_node_two_to_one(spec, state, cfg, rng),
        Backbone::Darts => grow_node_darts(spec, state, cfg, rng),
    }
}

/// Index of the largest weight, lowest index on ties.
pub(super) fn argmax(w: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in w.iter().enumerate() {
        if v > w[best] {
            best = i;
        }
    }
    best
}

/// Logit giving a new entry weight `eps` while every existing weight is
/// scaled by `1 - eps`. `eps = 0` yields a logit that underflows exactly.
pub(super) fn appended_logit(alpha: &[f64], effective: &[f64], eps: f64) -> f64 {
    let max_raw = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if eps <= 0.0 {
        return max_raw - LOG_ZERO_OFFSET;
    }
    let m = effective.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + exact_sum(effective.iter().map(|a| (a - m).exp())).ln();
    (eps / (1.0 - eps)).ln() + lse
}

/// Adds a fresh copy of the dominant op on `edge` with weight `delta * U(0, 1)`.
pub fn grow_operator_morph(
    spec: &CellSpec,
    state: &ModelState,
    edge: EdgeId,
    cfg: &MorphConfig,
    rng: &mut Rng,
) -> Result<Transformed> {
    cfg.validate()?;
    let e = spec.edge(edge).ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
    let w = state.edge_weights(spec, edge)?;
    let k = argmax(&w);
    if w[k] < cfg.op_grow_threshold {
        return Err(Error::Precondition(format!(
            "dominant weight {:.4} on {edge} is below the growth threshold {}",
            w[k], cfg.op_grow_threshold
        )));
    }
    if e.ops.len() >= cfg.max_ops_per_edge {
        return Err(Error::Precondition(format!("{edge} already has {} ops", e.ops.len())));
    }
    let mut ids = spec.id_alloc();
    let op = ids.op(e.ops[k].kind);
    let eps = cfg.delta * rng.random::<f64>();

    let mut event = GrowthEvent::new(EventKind::GrowOpMorph);
    event.edges = vec![edge];
    event.noise = vec![eps];
    event.notes.push(format!("duplicated {} (op {k})", e.ops[k].kind));
    event.deltas.push(SpecDelta::InsertOp { edge, index: e.ops.len(), op });

    let alpha = state.alpha(edge)?.to_vec();
    let new_logit = appended_logit(&alpha, &state.effective_alpha(spec, edge)?, eps);
    let (new_spec, mut new_state) = apply_deltas(spec, state, &event.deltas)?;
    let mut a = alpha;
    a.push(new_logit);
    new_state.alphas.insert(edge, a);

    let mut t = Transformed { spec: new_spec, state: new_state, event };
    record_preservation((spec, state), &mut t, cfg)?;
    Ok(t)
}
