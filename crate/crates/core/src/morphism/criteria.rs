use serde::{Deserialize, Serialize};

use super::grow::argmax;
use super::{select_split_ops, MorphConfig, SplitReport};
use crate::cells::EdgeId;

/// Outcome of one trigger point. At most one transform fires per check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Continue,
    Stop,
    GrowNode,
    GrowOp { edge: EdgeId },
    SplitOp { edge: EdgeId, ops: Vec<usize> },
    PruneOp { edge: EdgeId },
}

/// What the controller knows at a trigger point.
#[derive(Clone, Debug, Default)]
pub struct CriteriaInput {
    /// Stage-level patience ran out (the stage has converged).
    pub stage_exhausted: bool,
    /// The stage that followed a growth step did not beat the best evaluation.
    pub post_growth_failed: bool,
    /// Validation loss stopped improving within the stage.
    pub plateaued: bool,
    /// Current mixture weights per edge, in edge order.
    pub edge_weights: Vec<(EdgeId, Vec<f64>)>,
    pub reports: Vec<SplitReport>,
}

/// Precedence: stop, grow node, prune op, grow op, split op.
pub fn criteria_check(input: &CriteriaInput, cfg: &MorphConfig) -> Decision {
    if input.post_growth_failed {
        return Decision::Stop;
    }
    if input.stage_exhausted {
        return Decision::GrowNode;
    }
    for (edge, w) in &input.edge_weights {
        if w.len() < 2 {
            continue;
        }
        let max = w[argmax(w)];
        let min = w.iter().copied().fold(f64::INFINITY, f64::min);
        if max < cfg.op_grow_threshold && min < cfg.op_prune_threshold {
            return Decision::PruneOp { edge: *edge };
        }
    }
    for (edge, w) in &input.edge_weights {
        if w.len() < cfg.max_ops_per_edge && w[argmax(w)] >= cfg.op_grow_threshold {
            return Decision::GrowOp { edge: *edge };
        }
    }
    if input.plateaued {
        let room = |r: &SplitReport| {
            let n = input.edge_weights.iter().find(|(e, _)| *e == r.edge).map_or(0, |(_, w)| w.len());
            n < cfg.max_ops_per_edge
        };
        let best = input
            .reports
            .iter()
            .filter(|r| r.negative_count() > 0 && room(r))
            .fold(None::<&SplitReport>, |best, r| match best {
                Some(b) if b.negative_count() >= r.negative_count() => Some(b),
                _ => Some(r),
            });
        if let Some(r) = best {
            let ops = select_split_ops(r, cfg.split_strategy);
            let n = input.edge_weights.iter().find(|(e, _)| *e == r.edge).map_or(0, |(_, w)| w.len());
            if !ops.is_empty() && n + ops.len() <= cfg.max_ops_per_edge {
                return Decision::SplitOp { edge: r.edge, ops };
            }
        }
    }
    Decision::Continue
}
