use rand::Rng as _;

use super::grow::argmax;
use super::{apply_deltas, record_preservation, EventKind, GrowthEvent, MorphConfig, Transformed};
use crate::cells::{CellSpec, EdgeId, ModelState, SpecDelta};
use crate::rng::Rng;
use crate::{Error, Result};

/// Indices (ascending) of the `k` largest weights; ties favour the lower index.
pub fn top_k(w: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Smallest weight; ties favour the higher index so that it never coincides
/// with [`argmax`] on a constant vector.
fn argmin(w: &[f64]) -> usize {
    let mut best = w.len() - 1;
    for i in (0..w.len()).rev() {
        if w[i] < w[best] {
            best = i;
        }
    }
    best
}

/// Removes the weakest op of `edge` if it is below the prune threshold while
/// no op has reached the growth threshold. Remaining weights renormalize
/// through the softmax. `None` when nothing qualifies.
pub fn prune_operator_dynamic(
    spec: &CellSpec,
    state: &ModelState,
    edge: EdgeId,
    cfg: &MorphConfig,
) -> Result<Option<Transformed>> {
    cfg.validate()?;
    let e = spec.edge(edge).ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
    if e.ops.len() < 2 {
        return Err(Error::Contract(format!("cannot prune the only op of {edge}")));
    }
    let w = state.edge_weights(spec, edge)?;
    if w[argmax(&w)] >= cfg.op_grow_threshold {
        return Ok(None);
    }
    let k = argmin(&w);
    if w[k] >= cfg.op_prune_threshold {
        return Ok(None);
    }
    let mut event = GrowthEvent::new(EventKind::PruneOp);
    event.edges = vec![edge];
    event.notes.push(format!("removed {} (op {k}) at weight {:.6}", e.ops[k].kind, w[k]));
    event.deltas.push(SpecDelta::RemoveOp { edge, index: k });
    let (new_spec, mut new_state) = apply_deltas(spec, state, &event.deltas)?;
    new_state.alphas.get_mut(&edge).expect("edge kept").remove(k);
    let mut t = Transformed { spec: new_spec, state: new_state, event };
    record_preservation((spec, state), &mut t, cfg)?;
    Ok(Some(t))
}

/// Keeps the `keep_k` strongest ops on every edge.
pub fn prune_stage(spec: &CellSpec, state: &ModelState, cfg: &MorphConfig) -> Result<Transformed> {
    cfg.validate()?;
    let mut event = GrowthEvent::new(EventKind::PruneStage);
    let mut kept = Vec::new();
    for e in spec.edges() {
        if e.ops.len() <= cfg.keep_k {
            continue;
        }
        let keep = top_k(&state.edge_weights(spec, e.id)?, cfg.keep_k);
        event.edges.push(e.id);
        event.deltas.push(SpecDelta::RetainOps { edge: e.id, keep: keep.clone() });
        kept.push((e.id, keep));
    }
    let (new_spec, mut new_state) = apply_deltas(spec, state, &event.deltas)?;
    for (edge, keep) in kept {
        let a = state.alpha(edge)?;
        new_state.alphas.insert(edge, keep.iter().map(|&k| a[k]).collect());
    }
    let mut t = Transformed { spec: new_spec, state: new_state, event };
    record_preservation((spec, state), &mut t, cfg)?;
    Ok(t)
}

/// Swaps the weakest op for a fresh instance of the strongest op's kind; the
/// new instance inherits the removed op's weight.
pub fn replace_operator(spec: &CellSpec, state: &ModelState, edge: EdgeId, cfg: &MorphConfig) -> Result<Transformed> {
    cfg.validate()?;
    let e = spec.edge(edge).ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
    if e.ops.len() < 2 {
        return Err(Error::Precondition(format!("replace needs two ops on {edge}")));
    }
    let w = state.edge_weights(spec, edge)?;
    let (lo, hi) = (argmin(&w), argmax(&w));
    let mut op = spec.id_alloc().op(e.ops[hi].kind);
    op.halvings = e.ops[lo].halvings;
    let mut event = GrowthEvent::new(EventKind::ReplaceOp);
    event.edges = vec![edge];
    event.notes.push(format!("op {lo} ({}) -> {}", e.ops[lo].kind, op.kind));
    event.deltas.push(SpecDelta::ReplaceOp { edge, index: lo, op });
    let (new_spec, new_state) = apply_deltas(spec, state, &event.deltas)?;
    Ok(Transformed { spec: new_spec, state: new_state, event })
}

/// Redraws every op kind on `edge` uniformly from the backbone's op set and
/// resets the weights to uniform.
pub fn resample_operator(spec: &CellSpec, state: &ModelState, edge: EdgeId, rng: &mut Rng) -> Result<Transformed> {
    let e = spec.edge(edge).ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
    if e.ops.len() < 2 {
        return Err(Error::Precondition(format!("resample needs two ops on {edge}")));
    }
    let set = spec.backbone.op_set();
    let mut ids = spec.id_alloc();
    let mut event = GrowthEvent::new(EventKind::ResampleOp);
    event.edges = vec![edge];
    let ops = (0..e.ops.len())
        .map(|_| {
            let k = rng.random_range(0..set.len());
            event.noise.push(k as f64);
            ids.op(set[k])
        })
        .collect();
    event.deltas.push(SpecDelta::SetOps { edge, ops });
    let (new_spec, mut new_state) = apply_deltas(spec, state, &event.deltas)?;
    new_state.alphas.insert(edge, vec![0.0; e.ops.len()]);
    Ok(Transformed { spec: new_spec, state: new_state, event })
}
