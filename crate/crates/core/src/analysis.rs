//! Closed-form parameter counts, live-model inventory, training-cost
//! estimates and metric records.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cells::{BaselineKind, CellSpec, ModelState};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Rnn,
    Gru,
    Lstm,
    Darts,
    TwoToOne,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::Gru => "gru",
            ModelKind::Lstm => "lstm",
            ModelKind::Darts => "darts",
            ModelKind::TwoToOne => "two_to_one",
        }
    }

    /// Weight matrices per cell for the conventional cells.
    pub fn gates(self) -> Option<u64> {
        match self {
            ModelKind::Rnn => Some(1),
            ModelKind::Gru => Some(3),
            ModelKind::Lstm => Some(4),
            _ => None,
        }
    }
}

impl From<BaselineKind> for ModelKind {
    fn from(k: BaselineKind) -> Self {
        match k {
            BaselineKind::Rnn => ModelKind::Rnn,
            BaselineKind::Gru => ModelKind::Gru,
            BaselineKind::Lstm => ModelKind::Lstm,
        }
    }
}

impl From<crate::cells::Backbone> for ModelKind {
    fn from(b: crate::cells::Backbone) -> Self {
        match b {
            crate::cells::Backbone::Darts => ModelKind::Darts,
            crate::cells::Backbone::TwoToOne => ModelKind::TwoToOne,
        }
    }
}

/// How combination weights are counted for DARTS cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaLayout {
    /// Five logits per node (the published table).
    #[default]
    PerNode,
    /// Five logits per edge, as the live cells store them.
    PerEdge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSpec {
    pub kind: ModelKind,
    /// Nodes per cell; ignored for conventional cells.
    pub m: usize,
    /// `n_1` (input) through `n_L`.
    pub sizes: Vec<usize>,
    /// Include `+ n_{i+1}` bias terms for RNN/GRU/LSTM.
    pub bias_included: bool,
    pub alpha_layout: AlphaLayout,
}

impl CountSpec {
    pub fn single(kind: ModelKind, m: usize, n_x: usize, n_h: usize) -> Self {
        CountSpec { kind, m, sizes: vec![n_x, n_h], bias_included: false, alpha_layout: AlphaLayout::PerNode }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.contains(&0) {
            return Err(Error::Config("count needs at least two layer sizes, all >= 1".into()));
        }
        if self.kind.gates().is_none() && self.m == 0 {
            return Err(Error::Config("backbone node count must be >= 1".into()));
        }
        Ok(())
    }
}

fn layer_count(spec: &CountSpec, n_x: u64, n_h: u64) -> u64 {
    let m = spec.m as u64;
    match spec.kind {
        ModelKind::Darts => {
            let edges = m * (m - 1) / 2;
            let alphas = match spec.alpha_layout {
                AlphaLayout::PerNode => 5 * m,
                AlphaLayout::PerEdge => 5 * (1 + edges),
            };
            3 * (n_x + n_h) * n_h + 3 * edges * n_h * n_h + alphas
        }
        ModelKind::TwoToOne => m * (3 * (n_x * n_h + n_h * n_h + n_h) + 2 * n_x * n_h) + 5 * m,
        kind => {
            let g = kind.gates().expect("conventional cell");
            let bias = if spec.bias_included { n_h } else { 0 };
            g * (n_h * (n_h + n_x) + bias)
        }
    }
}

/// Closed-form parameter count, summed over layers.
pub fn count_params(spec: &CountSpec) -> Result<u64> {
    spec.validate()?;
    Ok(spec
        .sizes
        .windows(2)
        .map(|w| layer_count(spec, w[0] as u64, w[1] as u64))
        .sum())
}

/// Element count of a live searched cell: its tensors plus its logits.
/// Fails if the state and spec are not in bijection.
pub fn inventory(spec: &CellSpec, state: &ModelState) -> Result<u64> {
    state.check(spec)?;
    let ids = spec.param_ids();
    let weights: usize = ids.iter().map(|id| state.weights[id].len()).sum();
    Ok((weights + state.alpha_count()) as u64)
}

/// Element count of a live conventional cell.
pub fn inventory_baseline(kind: BaselineKind, n_x: usize, n_h: usize, state: &ModelState) -> Result<u64> {
    let mut total = 0;
    for (id, shape) in kind.param_shapes(n_x, n_h) {
        let t = state.weight(&id)?;
        if t.shape() != shape {
            return Err(Error::Integrity(format!("{id} has shape {:?}, expected {shape:?}", t.shape())));
        }
        total += t.len();
    }
    Ok(total as u64)
}

/// Training cost in parameter-epochs: `sum_i count(m_i) * e_i` for a
/// schedule of `(m_i, e_i)` stages.
pub fn complexity_estimate(schedule: &[(usize, u64)], kind: ModelKind, n_x: usize, n_h: usize) -> Result<u64> {
    if schedule.is_empty() {
        return Err(Error::Precondition("empty schedule".into()));
    }
    let mut total = 0;
    for &(m, e) in schedule {
        total += count_params(&CountSpec::single(kind, m, n_x, n_h))? * e;
    }
    Ok(total)
}

/// Cost of training a fixed `m`-node cell for `epochs`.
pub fn complexity_fixed(m: usize, epochs: u64, kind: ModelKind, n_x: usize, n_h: usize) -> Result<u64> {
    complexity_estimate(&[(m, epochs)], kind, n_x, n_h)
}

/// One table column: a label and its `(n_x, n_h)`.
#[derive(Clone, Debug)]
pub struct TableColumn {
    pub label: String,
    pub n_x: usize,
    pub n_h: usize,
}

pub fn preset_columns() -> Vec<TableColumn> {
    vec![
        TableColumn { label: "G7".into(), n_x: 7, n_h: 7 },
        TableColumn { label: "BRICS".into(), n_x: 5, n_h: 5 },
    ]
}

/// Rows of the parameter-count table: `(model, nodes, counts per column)`.
pub fn count_table(columns: &[TableColumn], nodes: std::ops::RangeInclusive<usize>, bias_included: bool) -> Result<Vec<(ModelKind, Option<usize>, Vec<u64>)>> {
    let mut rows = Vec::new();
    let count = |kind, m, c: &TableColumn| {
        let mut s = CountSpec::single(kind, m, c.n_x, c.n_h);
        s.bias_included = bias_included;
        count_params(&s)
    };
    for kind in [ModelKind::Lstm, ModelKind::Gru] {
        rows.push((kind, None, columns.iter().map(|c| count(kind, 1, c)).collect::<Result<_>>()?));
    }
    for kind in [ModelKind::Darts, ModelKind::TwoToOne] {
        for m in nodes.clone() {
            rows.push((kind, Some(m), columns.iter().map(|c| count(kind, m, c)).collect::<Result<_>>()?));
        }
    }
    Ok(rows)
}

/// Plain-text rendering, one row per model and node count.
pub fn render_count_table(columns: &[TableColumn], rows: &[(ModelKind, Option<usize>, Vec<u64>)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12}{:>6}", "model", "nodes");
    for c in columns {
        let _ = write!(out, "{:>10}", c.label);
    }
    out.push('\n');
    for (kind, m, counts) in rows {
        let nodes = m.map(|m| m.to_string()).unwrap_or_default();
        let _ = write!(out, "{:<12}{:>6}", kind.name(), nodes);
        for v in counts {
            let _ = write!(out, "{v:>10}");
        }
        out.push('\n');
    }
    out
}

/// One row of the metrics stream. Columns are fixed; optional values are
/// written as empty fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub trial: u64,
    pub backbone: String,
    pub mode: String,
    pub stage: usize,
    /// `search`, `tune`, `eval` or `final`.
    pub phase: String,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub test_loss: Option<f64>,
    pub node_count: usize,
    pub param_count: u64,
    pub event: Option<String>,
    /// Seconds since the trial started. Kept out of the metrics file so that
    /// reruns are byte-identical; see [`write_timing_csv`].
    #[serde(skip)]
    pub wall_clock_s: f64,
}

pub fn write_metrics_csv<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() }))
        .collect()
}

pub fn write_timing_csv<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial", "stage", "phase", "epoch", "wall_clock_s"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for r in records {
        w.write_record([
            r.trial.to_string(),
            r.stage.to_string(),
            r.phase.clone(),
            r.epoch.to_string(),
            format!("{:.6}", r.wall_clock_s),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard error; the error is 0 for a single value.
pub fn mean_std_error(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = crate::tensor::exact_sum(values.iter().copied()) / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let ss = crate::tensor::exact_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    Some((mean, (ss / (n - 1.0)).sqrt() / n.sqrt()))
}

/// Per-curve-point aggregate across trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub backbone: String,
    pub mode: String,
    pub phase: String,
    pub stage: usize,
    pub epoch: usize,
    pub trials: usize,
    pub train_mean: Option<f64>,
    pub train_se: Option<f64>,
    pub val_mean: Option<f64>,
    pub val_se: Option<f64>,
    pub test_mean: Option<f64>,
    pub test_se: Option<f64>,
}

/// Groups records by `(backbone, mode, phase, stage, epoch)` and averages
/// each loss over the trials that report it.
pub fn aggregate(records: &[MetricRecord]) -> Vec<AggregateRow> {
    type Key = (String, String, String, usize, usize);
    let mut groups: BTreeMap<Key, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.backbone.clone(), r.mode.clone(), r.phase.clone(), r.stage, r.epoch);
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((backbone, mode, phase, stage, epoch), rs)| {
            // exact sums make the result independent of trial order
            let col = |f: fn(&MetricRecord) -> Option<f64>| {
                mean_std_error(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let (train, val, test) = (col(|r| r.train_loss), col(|r| r.val_loss), col(|r| r.test_loss));
            AggregateRow {
                backbone,
                mode,
                phase,
                stage,
                epoch,
                trials: rs.len(),
                train_mean: train.map(|p| p.0),
                train_se: train.map(|p| p.1),
                val_mean: val.map(|p| p.0),
                val_se: val.map(|p| p.1),
                test_mean: test.map(|p| p.0),
                test_se: test.map(|p| p.1),
            }
        })
        .collect()
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
