//! Declarative cell description. Every node, edge and parameter tensor carries
//! an id drawn from one monotone counter, so ids survive growth and pruning.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ops::{Backbone, OpKind};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EdgeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Key of a weight tensor. Cell parameters are numbered (`c17`); task heads
/// and baseline cells use dotted names (`head.w`, `lstm.f.w_x`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Cell(u64),
    Aux(String),
}

impl ParamId {
    pub fn aux(name: impl Into<String>) -> Self {
        let name = name.into();
        debug_assert!(
            matches!(name.parse::<ParamId>(), Ok(ParamId::Aux(_))),
            "aux name {name} collides with cell id syntax"
        );
        ParamId::Aux(name)
    }

    pub fn is_cell(&self) -> bool {
        matches!(self, ParamId::Cell(_))
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Cell(n) => write!(f, "c{n}"),
            ParamId::Aux(s) => f.write_str(s),
        }
    }
}

impl FromStr for ParamId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Format("empty parameter id".into()));
        }
        match s.strip_prefix('c') {
            Some(digits) if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) => {
                digits
                    .parse()
                    .map(ParamId::Cell)
                    .map_err(|e| Error::Format(format!("parameter id {s}: {e}")))
            }
            _ => Ok(ParamId::Aux(s.to_owned())),
        }
    }
}

impl Serialize for ParamId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How a DARTS cell turns node outputs into `h_t`. Two-to-One cells always
/// emit their last node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputRule {
    #[default]
    Mean,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSource {
    /// DARTS: `concat(x_t, h_{t-1})`. Two-to-One: `(x_t, h_{t-1})`.
    Input,
    /// DARTS: `z_i`. Two-to-One: `(x_t, o_i)`.
    Node(NodeId),
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpInstance {
    pub kind: OpKind,
    pub params: Vec<ParamId>,
    /// Number of exact mass halvings applied by splitting; the op's effective
    /// logit is `alpha - halvings * ln 2`.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub halvings: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedEdge {
    pub id: EdgeId,
    pub source: EdgeSource,
    pub ops: Vec<OpInstance>,
}

impl MixedEdge {
    pub fn halvings(&self) -> Vec<u32> {
        self.ops.iter().map(|o| o.halvings).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellNode {
    pub id: NodeId,
    pub edges: Vec<MixedEdge>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub backbone: Backbone,
    pub n_x: usize,
    pub n_h: usize,
    #[serde(default)]
    pub output_rule: OutputRule,
    pub nodes: Vec<CellNode>,
    pub next_id: u64,
}

/// Sequential id allocator seeded from a spec's counter.
#[derive(Debug)]
pub struct IdAlloc {
    next: u64,
}

impl IdAlloc {
    pub fn take(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn op(&mut self, kind: OpKind) -> OpInstance {
        let count = kind.param_shapes(0, 0, 0).len();
        OpInstance {
            kind,
            params: (0..count).map(|_| ParamId::Cell(self.take())).collect(),
            halvings: 0,
        }
    }

    pub fn edge(&mut self, source: EdgeSource, kinds: &[OpKind]) -> MixedEdge {
        let id = EdgeId(self.take());
        MixedEdge {
            id,
            source,
            ops: kinds.iter().map(|&k| self.op(k)).collect(),
        }
    }
}

/// One structural edit. Transforms describe themselves as deltas so that an
/// event log can be replayed against an initial spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "delta", rename_all = "snake_case")]
pub enum SpecDelta {
    AddNode { node: CellNode },
    InsertOp { edge: EdgeId, index: usize, op: OpInstance },
    RemoveOp { edge: EdgeId, index: usize },
    ReplaceOp { edge: EdgeId, index: usize, op: OpInstance },
    SetOps { edge: EdgeId, ops: Vec<OpInstance> },
    RetainOps { edge: EdgeId, keep: Vec<usize> },
}

impl SpecDelta {
    fn max_id(&self) -> Option<u64> {
        fn op_max(op: &OpInstance) -> Option<u64> {
            op.params
                .iter()
                .filter_map(|p| match p {
                    ParamId::Cell(n) => Some(*n),
                    ParamId::Aux(_) => None,
                })
                .max()
        }
        match self {
            SpecDelta::AddNode { node } => node
                .edges
                .iter()
                .flat_map(|e| std::iter::once(Some(e.id.0)).chain(e.ops.iter().map(op_max)))
                .chain(std::iter::once(Some(node.id.0)))
                .flatten()
                .max(),
            SpecDelta::InsertOp { op, .. } | SpecDelta::ReplaceOp { op, .. } => op_max(op),
            SpecDelta::SetOps { ops, .. } => ops.iter().filter_map(op_max).max(),
            SpecDelta::RemoveOp { .. } | SpecDelta::RetainOps { .. } => None,
        }
    }
}

impl CellSpec {
    /// Full backbone with `m` nodes and every candidate op on every edge.
    pub fn new(backbone: Backbone, n_x: usize, n_h: usize, m: usize) -> Result<Self> {
        if n_x == 0 || n_h == 0 || m == 0 {
            return Err(Error::Config(format!(
                "cell needs n_x, n_h, m >= 1 (got {n_x}, {n_h}, {m})"
            )));
        }
        let mut spec = CellSpec {
            backbone,
            n_x,
            n_h,
            output_rule: OutputRule::default(),
            nodes: Vec::new(),
            next_id: 0,
        };
        for _ in 0..m {
            let mut ids = spec.id_alloc();
            let node = spec.next_node(&mut ids, |_| backbone.op_set().to_vec());
            spec.apply(&SpecDelta::AddNode { node })?;
        }
        Ok(spec)
    }

    pub fn with_output_rule(mut self, rule: OutputRule) -> Self {
        self.output_rule = rule;
        self
    }

    pub fn id_alloc(&self) -> IdAlloc {
        IdAlloc { next: self.next_id }
    }

    /// Builds (without applying) the node that would be appended next, with
    /// the backbone's wiring. `ops_for` picks the op list per incoming source.
    pub fn next_node(
        &self,
        ids: &mut IdAlloc,
        mut ops_for: impl FnMut(EdgeSource) -> Vec<OpKind>,
    ) -> CellNode {
        let id = NodeId(ids.take());
        let sources: Vec<EdgeSource> = match (self.backbone, self.nodes.last()) {
            (_, None) => vec![EdgeSource::Input],
            (Backbone::TwoToOne, Some(last)) => vec![EdgeSource::Node(last.id)],
            (Backbone::Darts, Some(_)) => {
                self.nodes.iter().map(|n| EdgeSource::Node(n.id)).collect()
            }
        };
        let edges = sources
            .into_iter()
            .map(|s| {
                let kinds = ops_for(s);
                ids.edge(s, &kinds)
            })
            .collect();
        CellNode { id, edges }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = &MixedEdge> {
        self.nodes.iter().flat_map(|n| n.edges.iter())
    }

    pub fn edge_count(&self) -> usize {
        self.edges().count()
    }

    pub fn edge(&self, id: EdgeId) -> Option<&MixedEdge> {
        self.edges().find(|e| e.id == id)
    }

    fn edge_mut(&mut self, id: EdgeId) -> Result<&mut MixedEdge> {
        self.nodes
            .iter_mut()
            .flat_map(|n| n.edges.iter_mut())
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Spec(format!("no edge {id}")))
    }

    /// Width of the tensor an edge's DARTS linear maps consume.
    pub fn edge_input_dim(&self, edge: &MixedEdge) -> usize {
        match (self.backbone, edge.source) {
            (Backbone::Darts, EdgeSource::Input) => self.n_x + self.n_h,
            _ => self.n_h,
        }
    }

    pub fn param_shapes(&self, edge: &MixedEdge, op: &OpInstance) -> Vec<(usize, usize)> {
        op.kind
            .param_shapes(self.n_x, self.n_h, self.edge_input_dim(edge))
    }

    pub fn param_ids(&self) -> BTreeSet<ParamId> {
        self.edges()
            .flat_map(|e| e.ops.iter().flat_map(|o| o.params.iter().cloned()))
            .collect()
    }

    pub fn edge_ids(&self) -> BTreeSet<EdgeId> {
        self.edges().map(|e| e.id).collect()
    }

    pub fn apply(&mut self, delta: &SpecDelta) -> Result<()> {
        match delta {
            SpecDelta::AddNode { node } => self.nodes.push(node.clone()),
            SpecDelta::InsertOp { edge, index, op } => {
                let e = self.edge_mut(*edge)?;
                if *index > e.ops.len() {
                    return Err(Error::Spec(format!("insert index {index} out of range on {edge}")));
                }
                e.ops.insert(*index, op.clone());
            }
            SpecDelta::RemoveOp { edge, index } => {
                let e = self.edge_mut(*edge)?;
                if *index >= e.ops.len() {
                    return Err(Error::Spec(format!("remove index {index} out of range on {edge}")));
                }
                if e.ops.len() == 1 {
                    return Err(Error::Contract(format!("cannot remove the last op of {edge}")));
                }
                e.ops.remove(*index);
            }
            SpecDelta::ReplaceOp { edge, index, op } => {
                let e = self.edge_mut(*edge)?;
                let slot = e
                    .ops
                    .get_mut(*index)
                    .ok_or_else(|| Error::Spec(format!("replace index {index} out of range")))?;
                *slot = op.clone();
            }
            SpecDelta::SetOps { edge, ops } => {
                if ops.is_empty() {
                    return Err(Error::Contract(format!("edge {edge} would have no ops")));
                }
                self.edge_mut(*edge)?.ops = ops.clone();
            }
            SpecDelta::RetainOps { edge, keep } => {
                let e = self.edge_mut(*edge)?;
                if keep.is_empty() || keep.iter().any(|&k| k >= e.ops.len()) {
                    return Err(Error::Spec(format!("bad retain list {keep:?} for {edge}")));
                }
                e.ops = keep.iter().map(|&k| e.ops[k].clone()).collect();
            }
        }
        if let Some(max) = delta.max_id() {
            self.next_id = self.next_id.max(max + 1);
        }
        Ok(())
    }

    /// Checks the backbone wiring rules and op-set membership.
    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_h == 0 {
            return Err(Error::Spec("zero input or hidden width".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Spec("cell has no nodes".into()));
        }
        let mut seen = BTreeSet::new();
        for (j, node) in self.nodes.iter().enumerate() {
            let expected: Vec<EdgeSource> = match (self.backbone, j) {
                (_, 0) => vec![EdgeSource::Input],
                (Backbone::TwoToOne, _) => vec![EdgeSource::Node(self.nodes[j - 1].id)],
                (Backbone::Darts, _) => self.nodes[..j]
                    .iter()
                    .map(|n| EdgeSource::Node(n.id))
                    .collect(),
            };
            let got: Vec<EdgeSource> = node.edges.iter().map(|e| e.source).collect();
            if got != expected {
                return Err(Error::Spec(format!(
                    "node {} has sources {got:?}, expected {expected:?}",
                    node.id
                )));
            }
            if node.id.0 >= self.next_id || !seen.insert(node.id.0) {
                return Err(Error::Spec(format!("bad node id {}", node.id)));
            }
            for e in &node.edges {
                if e.id.0 >= self.next_id || !seen.insert(e.id.0) {
                    return Err(Error::Spec(format!("bad edge id {}", e.id)));
                }
                if e.ops.is_empty() {
                    return Err(Error::Spec(format!("edge {} has no ops", e.id)));
                }
                for op in &e.ops {
                    if op.kind.backbone() != self.backbone {
                        return Err(Error::Spec(format!(
                            "op {} on a {} cell",
                            op.kind, self.backbone
                        )));
                    }
                    if op.params.len() != self.param_shapes(e, op).len() {
                        return Err(Error::Spec(format!(
                            "op {} on {} has {} params",
                            op.kind,
                            e.id,
                            op.params.len()
                        )));
                    }
                    for p in &op.params {
                        match p {
                            ParamId::Cell(n) if *n < self.next_id && seen.insert(*n) => {}
                            _ => return Err(Error::Spec(format!("bad parameter id {p}"))),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_counts_follow_backbone_wiring() {
        for m in 1..=8 {
            let tt = CellSpec::new(Backbone::TwoToOne, 3, 4, m).unwrap();
            assert_eq!(tt.edge_count(), m);
            tt.validate().unwrap();
            let d = CellSpec::new(Backbone::Darts, 3, 4, m).unwrap();
            // node 1 has one edge, node k has k - 1 edges from earlier nodes
            assert_eq!(d.edge_count(), 1 + (2..=m).map(|k| k - 1).sum::<usize>());
            d.validate().unwrap();
        }
    }

    #[test]
    fn param_id_text_form() {
        assert_eq!("c12".parse::<ParamId>().unwrap(), ParamId::Cell(12));
        assert_eq!("head.w".parse::<ParamId>().unwrap(), ParamId::aux("head.w"));
        assert_eq!("cx".parse::<ParamId>().unwrap(), ParamId::Aux("cx".into()));
        assert_eq!(ParamId::Cell(3).to_string(), "c3");
    }

    #[test]
    fn deltas_keep_counter_ahead_of_ids() {
        let mut spec = CellSpec::new(Backbone::TwoToOne, 2, 2, 1).unwrap();
        let before = spec.next_id;
        let mut ids = spec.id_alloc();
        let op = ids.op(OpKind::Tt1Tanh);
        let edge = spec.nodes[0].edges[0].id;
        spec.apply(&SpecDelta::InsertOp { edge, index: 5, op: op.clone() }).unwrap();
        assert_eq!(spec.next_id, before + 3);
        spec.validate().unwrap();
        let err = spec.apply(&SpecDelta::InsertOp { edge, index: 99, op });
        assert!(err.is_err());
    }

    #[test]
    fn removing_last_op_is_a_contract_error() {
        let mut spec = CellSpec::new(Backbone::TwoToOne, 2, 2, 1).unwrap();
        let edge = spec.nodes[0].edges[0].id;
        spec.apply(&SpecDelta::RetainOps { edge, keep: vec![3] }).unwrap();
        assert!(matches!(
            spec.apply(&SpecDelta::RemoveOp { edge, index: 0 }),
            Err(Error::Contract(_))
        ));
    }
}
