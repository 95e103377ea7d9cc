//! Tape construction for one cell step.

use std::collections::BTreeMap;

use super::ops::{Activation, Backbone, OpKind};
use super::spec::{CellSpec, EdgeId, EdgeSource, NodeId, OutputRule, ParamId};
use super::state::ModelState;
use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Which values of a [`ModelState`] are differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradMode {
    pub weights: bool,
    pub alphas: bool,
}

impl GradMode {
    pub const NONE: GradMode = GradMode { weights: false, alphas: false };
    pub const WEIGHTS: GradMode = GradMode { weights: true, alphas: false };
    pub const ALPHAS: GradMode = GradMode { weights: false, alphas: true };
    pub const ALL: GradMode = GradMode { weights: true, alphas: true };
}

/// Tape handles for every tensor and logit vector of a state, plus the
/// per-edge mixture weights (computed once and shared by all time steps).
#[derive(Debug, Default)]
pub struct Bindings {
    params: BTreeMap<ParamId, Var>,
    alphas: BTreeMap<EdgeId, Var>,
    mix: BTreeMap<EdgeId, Var>,
}

impl Bindings {
    pub fn bind(
        tape: &mut Tape,
        spec: Option<&CellSpec>,
        state: &ModelState,
        mode: GradMode,
    ) -> Result<Self> {
        let mut b = Bindings::default();
        for (id, t) in &state.weights {
            b.params.insert(id.clone(), tape.leaf(t.clone(), mode.weights));
        }
        if let Some(spec) = spec {
            for e in spec.edges() {
                let alpha = state.alpha(e.id)?;
                let a = tape.leaf(Tensor::row(alpha), mode.alphas);
                let w = tape
                    .mixture_weights(a, &e.halvings())
                    .map_err(|err| Error::numeric(format!("mixture weights of {}", e.id), err))?;
                b.alphas.insert(e.id, a);
                b.mix.insert(e.id, w);
            }
        }
        Ok(b)
    }

    pub fn param(&self, id: &ParamId) -> Result<Var> {
        self.params
            .get(id)
            .copied()
            .ok_or_else(|| Error::Integrity(format!("unbound parameter {id}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, Var)> {
        self.params.iter().map(|(k, v)| (k, *v))
    }

    pub fn alphas(&self) -> impl Iterator<Item = (EdgeId, Var)> + '_ {
        self.alphas.iter().map(|(k, v)| (*k, *v))
    }

    /// Pulls per-parameter and per-edge gradients out of a backward sweep.
    /// Unreached leaves get zeros of the matching shape.
    pub fn collect(&self, tape: &Tape, grads: &mut Gradients) -> (BTreeMap<ParamId, Tensor>, BTreeMap<EdgeId, Vec<f64>>) {
        let take = |grads: &mut Gradients, v: Var| {
            grads.take(v).unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Tensor::zeros(r, c)
            })
        };
        let params = self
            .params
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(k, &v)| (k.clone(), take(grads, v)))
            .collect();
        let alphas = self
            .alphas
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .map(|(k, &v)| (*k, take(grads, v).into_data()))
            .collect();
        (params, alphas)
    }

    fn mix_weights(&self, edge: EdgeId) -> Result<Var> {
        self.mix
            .get(&edge)
            .copied()
            .ok_or_else(|| Error::Integrity(format!("unbound edge {edge}")))
    }
}

/// Selects one activation op whose per-unit inputs and outputs are recorded
/// at every step, for splitting-matrix estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptureTarget {
    pub edge: EdgeId,
    pub op: usize,
}

#[derive(Debug)]
pub struct CaptureRecord {
    /// Per-sample input vector seen by each unit's parameter column
    /// (`[x, prev, 1]` for Two-to-One, the edge input for DARTS).
    pub z: Tensor,
    /// Pre-activations, `batch x n_h`.
    pub pre: Tensor,
    /// Activation output on the tape; its gradient is the upstream signal.
    pub out: Var,
}

#[derive(Debug)]
pub struct Capture {
    pub target: CaptureTarget,
    pub records: Vec<CaptureRecord>,
}

impl Capture {
    pub fn new(target: CaptureTarget) -> Self {
        Capture { target, records: Vec::new() }
    }
}

fn node_err(node: NodeId) -> impl Fn(TensorError) -> Error {
    move |e| match e {
        TensorError::NonFinite { .. } => Error::numeric(format!("cell node {node}"), e),
        other => Error::Tensor(other),
    }
}

fn activate(tape: &mut Tape, act: Activation, u: Var) -> std::result::Result<Var, TensorError> {
    match act {
        Activation::Sigmoid => tape.sigmoid(u),
        Activation::Tanh => tape.tanh(u),
        Activation::Relu => tape.relu(u),
    }
}

fn ones_column(rows: usize) -> Tensor {
    Tensor::filled(rows, 1, 1.0)
}

fn hcat(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    Tensor::from_fn(rows, cols, |r, c| {
        let mut c = c;
        for p in parts {
            if c < p.cols() {
                return p.get(r, c);
            }
            c -= p.cols();
        }
        unreachable!()
    })
}

/// One step `h_t = cell(x_t, h_{t-1})` of a searched cell.
pub fn cell_step(
    tape: &mut Tape,
    spec: &CellSpec,
    b: &Bindings,
    x: Var,
    h: Var,
    capture: Option<&mut Capture>,
) -> Result<Var> {
    let (xs, hs) = (tape.value(x).shape(), tape.value(h).shape());
    if xs.1 != spec.n_x || hs.1 != spec.n_h || xs.0 != hs.0 {
        return Err(TensorError::Dimension { op: "cell_step", lhs: xs, rhs: hs }.into());
    }
    match spec.backbone {
        Backbone::TwoToOne => step_two_to_one(tape, spec, b, x, h, capture),
        Backbone::Darts => step_darts(tape, spec, b, x, h, capture),
    }
}

fn step_two_to_one(
    tape: &mut Tape,
    spec: &CellSpec,
    b: &Bindings,
    x: Var,
    h: Var,
    mut capture: Option<&mut Capture>,
) -> Result<Var> {
    let mut prev = h;
    for node in &spec.nodes {
        let edge = &node.edges[0];
        let weights = b.mix_weights(edge.id)?;
        let err = node_err(node.id);
        let mut terms = Vec::with_capacity(edge.ops.len());
        for (i, op) in edge.ops.iter().enumerate() {
            let w_x = b.param(&op.params[0])?;
            let xw = tape.matmul(x, w_x).map_err(&err)?;
            let term = match op.kind {
                OpKind::Tt1Sum => tape.add(xw, prev).map_err(&err)?,
                OpKind::Tt1Prod => tape.hadamard(xw, prev).map_err(&err)?,
                kind => {
                    let act = kind.activation().ok_or_else(|| {
                        Error::Spec(format!("{kind} on a two_to_one cell"))
                    })?;
                    let w_h = b.param(&op.params[1])?;
                    let bias = b.param(&op.params[2])?;
                    let hw = tape.matmul(prev, w_h).map_err(&err)?;
                    let s = tape.add(xw, hw).map_err(&err)?;
                    let u = tape.add_row(s, bias).map_err(&err)?;
                    let out = activate(tape, act, u).map_err(&err)?;
                    if let Some(cap) = capture.as_deref_mut() {
                        if cap.target == (CaptureTarget { edge: edge.id, op: i }) {
                            let ones = ones_column(tape.value(x).rows());
                            cap.records.push(CaptureRecord {
                                z: hcat(&[tape.value(x), tape.value(prev), &ones]),
                                pre: tape.value(u).clone(),
                                out,
                            });
                        }
                    }
                    out
                }
            };
            terms.push((weights, i, term));
        }
        prev = tape.mix(&terms).map_err(&err)?;
    }
    Ok(prev)
}

fn step_darts(
    tape: &mut Tape,
    spec: &CellSpec,
    b: &Bindings,
    x: Var,
    h: Var,
    mut capture: Option<&mut Capture>,
) -> Result<Var> {
    let batch = tape.value(x).rows();
    let input = tape.concat_cols(x, h)?;
    let mut outputs: BTreeMap<NodeId, Var> = BTreeMap::new();
    let mut order = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let err = node_err(node.id);
        let mut terms = Vec::new();
        for edge in &node.edges {
            let weights = b.mix_weights(edge.id)?;
            let source = match edge.source {
                EdgeSource::Input => input,
                EdgeSource::Node(id) => *outputs
                    .get(&id)
                    .ok_or_else(|| Error::Spec(format!("edge {} reads later node {id}", edge.id)))?,
            };
            for (i, op) in edge.ops.iter().enumerate() {
                let term = match op.kind {
                    OpKind::DartsZero => continue,
                    OpKind::DartsIdentity => match edge.source {
                        // identity on the input edge forwards h_{t-1}
                        EdgeSource::Input => h,
                        EdgeSource::Node(_) => source,
                    },
                    kind => {
                        let act = kind.activation().ok_or_else(|| {
                            Error::Spec(format!("{kind} on a darts cell"))
                        })?;
                        let w = b.param(&op.params[0])?;
                        let u = tape.matmul(source, w).map_err(&err)?;
                        let out = activate(tape, act, u).map_err(&err)?;
                        if let Some(cap) = capture.as_deref_mut() {
                            if cap.target == (CaptureTarget { edge: edge.id, op: i }) {
                                cap.records.push(CaptureRecord {
                                    z: tape.value(source).clone(),
                                    pre: tape.value(u).clone(),
                                    out,
                                });
                            }
                        }
                        out
                    }
                };
                terms.push((weights, i, term));
            }
        }
        let out = if terms.is_empty() {
            tape.constant(Tensor::zeros(batch, spec.n_h))
        } else {
            tape.mix(&terms).map_err(&err)?
        };
        outputs.insert(node.id, out);
        order.push(out);
    }
    match spec.output_rule {
        OutputRule::Last => Ok(*order.last().expect("validated spec has nodes")),
        OutputRule::Mean => {
            let mut acc = order[0];
            for &o in &order[1..] {
                acc = tape.add(acc, o)?;
            }
            Ok(tape.scale(acc, 1.0 / order.len() as f64)?)
        }
    }
}

/// Evaluates one step on plain tensors without recording gradients.
pub fn evaluate_cell(spec: &CellSpec, state: &ModelState, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Bindings::bind(&mut tape, Some(spec), state, GradMode::NONE)?;
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h.clone());
    let out = cell_step(&mut tape, spec, &b, xv, hv, None)?;
    Ok(tape.value(out).clone())
}

pub fn forward_two_to_one(spec: &CellSpec, state: &ModelState, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    if spec.backbone != Backbone::TwoToOne {
        return Err(Error::Precondition("forward_two_to_one on a darts cell".into()));
    }
    evaluate_cell(spec, state, x, h)
}

pub fn forward_darts(spec: &CellSpec, state: &ModelState, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    if spec.backbone != Backbone::Darts {
        return Err(Error::Precondition("forward_darts on a two_to_one cell".into()));
    }
    evaluate_cell(spec, state, x, h)
}
