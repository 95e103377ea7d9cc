//! Steepest-descent splitting. For a unit `sigma = phi(theta^T z)` the
//! splitting matrix is `S = sum_samples dL/dsigma * phi''(theta^T z) * z z^T`,
//! i.e. the part of the loss Hessian in `theta` that comes from the unit's
//! own curvature. A negative minimum eigenvalue means replacing the unit by
//! two half-weight copies at `theta -+ eta v_min` lowers the loss.

use serde::{Deserialize, Serialize};

use super::eigen::symmetric_eigen;
use super::{apply_deltas, record_preservation, EventKind, GrowthEvent, MorphConfig, Transformed};
use crate::cells::{
    Activation, Backbone, Bindings, Capture, CaptureTarget, CellSpec, EdgeId, GradMode, ModelState,
    OpInstance, OpKind, ParamId, SpecDelta,
};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Split every op with at least one negative minimum eigenvalue.
    Simultaneous,
    /// Split the op with the smallest sum of minimum eigenvalues.
    #[default]
    MinSum,
}

#[derive(Clone, Debug)]
pub struct UnitSplit {
    pub matrix: Vec<Vec<f64>>,
    pub lambda_min: f64,
    pub v_min: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct OpSplit {
    pub op: usize,
    pub kind: OpKind,
    pub units: Vec<UnitSplit>,
    /// relu (zero second derivative almost everywhere): `S = 0` identically.
    pub degenerate: bool,
}

impl OpSplit {
    pub fn negative_count(&self) -> usize {
        self.units.iter().filter(|u| u.lambda_min < 0.0).count()
    }

    pub fn lambda_sum(&self) -> f64 {
        self.units.iter().map(|u| u.lambda_min).sum()
    }
}

#[derive(Clone, Debug)]
pub struct SplitReport {
    pub edge: EdgeId,
    /// One entry per splittable (activation) op on the edge.
    pub ops: Vec<OpSplit>,
}

impl SplitReport {
    pub fn negative_count(&self) -> usize {
        self.ops.iter().map(OpSplit::negative_count).sum()
    }

    pub fn lambda_sum(&self) -> f64 {
        self.ops.iter().map(OpSplit::lambda_sum).sum()
    }
}

/// Per-step observations of one op: unit inputs, pre-activations and the
/// loss gradient with respect to the op's output.
#[derive(Clone, Debug)]
pub struct SplitRecord {
    pub z: Tensor,
    pub pre: Tensor,
    pub grad: Tensor,
}

pub fn split_report_from_records(op: usize, kind: OpKind, records: &[SplitRecord]) -> Result<OpSplit> {
    let act = kind
        .activation()
        .ok_or_else(|| Error::Precondition(format!("{kind} has no per-unit parameter columns")))?;
    let first = records
        .first()
        .ok_or_else(|| Error::Precondition("split report needs at least one record".into()))?;
    let (dim, n_h) = (first.z.cols(), first.pre.cols());
    let mut units = Vec::with_capacity(n_h);
    for h in 0..n_h {
        let mut s = vec![vec![0.0; dim]; dim];
        for r in records {
            for b in 0..r.z.rows() {
                let c = r.grad.get(b, h) * act.second_derivative(r.pre.get(b, h));
                if c == 0.0 {
                    continue;
                }
                let z = r.z.row_slice(b);
                for i in 0..dim {
                    for j in 0..dim {
                        s[i][j] += c * z[i] * z[j];
                    }
                }
            }
        }
        let e = symmetric_eigen(&s)?;
        units.push(UnitSplit { lambda_min: e.values[0], v_min: e.vectors[0].clone(), matrix: s });
    }
    Ok(OpSplit { op, kind, units, degenerate: act == Activation::Relu })
}

/// Builds the report for every activation op on `edge`. `loss` must build a
/// scalar loss whose cell steps pass the supplied capture through.
pub fn split_report(
    spec: &CellSpec,
    state: &ModelState,
    edge: EdgeId,
    loss: &dyn Fn(&mut Tape, &Bindings, &mut Capture) -> Result<Var>,
) -> Result<SplitReport> {
    let e = spec.edge(edge).ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
    let mut ops = Vec::new();
    for (i, op) in e.ops.iter().enumerate() {
        if op.kind.activation().is_none() {
            continue;
        }
        let mut tape = Tape::new();
        let b = Bindings::bind(&mut tape, Some(spec), state, GradMode::WEIGHTS)?;
        let mut capture = Capture::new(CaptureTarget { edge, op: i });
        let root = loss(&mut tape, &b, &mut capture)?;
        let grads = tape.backward(root)?;
        let records: Vec<SplitRecord> = capture
            .records
            .into_iter()
            .map(|r| {
                let grad = grads.get(r.out).cloned().unwrap_or_else(|| Tensor::zeros(r.pre.rows(), r.pre.cols()));
                SplitRecord { z: r.z, pre: r.pre, grad }
            })
            .collect();
        ops.push(split_report_from_records(i, op.kind, &records)?);
    }
    Ok(SplitReport { edge, ops })
}

/// Op indices (ascending) chosen for splitting under `strategy`.
pub fn select_split_ops(report: &SplitReport, strategy: SplitStrategy) -> Vec<usize> {
    let candidates = report.ops.iter().filter(|o| o.negative_count() > 0);
    match strategy {
        SplitStrategy::Simultaneous => candidates.map(|o| o.op).collect(),
        SplitStrategy::MinSum => candidates
            .fold(None::<&OpSplit>, |best, o| match best {
                Some(b) if b.lambda_sum() <= o.lambda_sum() => Some(b),
                _ => Some(o),
            })
            .map(|o| vec![o.op])
            .unwrap_or_default(),
    }
}

/// Parameter ids of an op in the row order of its unit vectors.
fn unit_params(spec: &CellSpec, op: &OpInstance) -> Result<Vec<ParamId>> {
    match (spec.backbone, op.kind.activation()) {
        (Backbone::TwoToOne, Some(_)) => Ok(op.params.clone()),
        (Backbone::Darts, Some(_)) => Ok(vec![op.params[0].clone()]),
        _ => Err(Error::Precondition(format!("{} cannot be split", op.kind))),
    }
}

/// Replaces each selected op by two copies with one more halving each; unit
/// `h`'s parameter column moves to `theta -+ eta v_min`, with
/// `eta = split_step_scale * |theta_h|`.
pub fn grow_operator_split(
    spec: &CellSpec,
    state: &ModelState,
    report: &SplitReport,
    cfg: &MorphConfig,
) -> Result<Transformed> {
    cfg.validate()?;
    let edge = report.edge;
    let e = spec.edge(edge).ok_or_else(|| Error::Spec(format!("no edge {edge}")))?;
    let chosen = select_split_ops(report, cfg.split_strategy);
    if chosen.is_empty() {
        return Err(Error::Precondition(format!("no negative splitting index on {edge}")));
    }
    if e.ops.len() + chosen.len() > cfg.max_ops_per_edge {
        return Err(Error::Precondition(format!("splitting would exceed {} ops on {edge}", cfg.max_ops_per_edge)));
    }
    let mut ids = spec.id_alloc();
    let mut event = GrowthEvent::new(EventKind::GrowOpSplit);
    event.edges = vec![edge];
    let mut alpha = state.alpha(edge)?.to_vec();
    let mut new_weights: Vec<(ParamId, Tensor)> = Vec::new();

    for &k in chosen.iter().rev() {
        let op = &e.ops[k];
        let split = report
            .ops
            .iter()
            .find(|o| o.op == k)
            .expect("chosen ops come from the report");
        let params = unit_params(spec, op)?;
        let mut copy = ids.op(op.kind);
        copy.halvings = op.halvings + 1;
        let mut orig = op.clone();
        orig.halvings += 1;

        let tensors: Vec<&Tensor> = params.iter().map(|p| state.weight(p)).collect::<Result<_>>()?;
        let mut minus: Vec<Tensor> = tensors.iter().map(|t| (*t).clone()).collect();
        let mut plus = minus.clone();
        for (h, unit) in split.units.iter().enumerate() {
            let theta: Vec<f64> = tensors
                .iter()
                .flat_map(|t| (0..t.rows()).map(move |r| t.get(r, h)))
                .collect();
            if theta.len() != unit.v_min.len() {
                return Err(Error::Contract("split report does not match the op's parameter layout".into()));
            }
            let eta = cfg.split_step_scale * theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut row = 0;
            for (ti, t) in tensors.iter().enumerate() {
                for r in 0..t.rows() {
                    let step = eta * unit.v_min[row];
                    minus[ti].set(r, h, theta[row] - step);
                    plus[ti].set(r, h, theta[row] + step);
                    row += 1;
                }
            }
        }
        event.notes.push(format!(
            "split {} (op {k}), {} negative units, lambda sum {:e}",
            op.kind,
            split.negative_count(),
            split.lambda_sum()
        ));
        for (p, t) in params.iter().zip(minus) {
            new_weights.push((p.clone(), t));
        }
        for (p, t) in copy.params.iter().zip(plus) {
            new_weights.push((p.clone(), t));
        }
        alpha.insert(k + 1, alpha[k]);
        event.deltas.push(SpecDelta::ReplaceOp { edge, index: k, op: orig });
        event.deltas.push(SpecDelta::InsertOp { edge, index: k + 1, op: copy });
    }

    let (new_spec, mut new_state) = apply_deltas(spec, state, &event.deltas)?;
    new_state.alphas.insert(edge, alpha);
    new_state.weights.extend(new_weights);
    let mut t = Transformed { spec: new_spec, state: new_state, event };
    record_preservation((spec, state), &mut t, cfg)?;
    Ok(t)
}
