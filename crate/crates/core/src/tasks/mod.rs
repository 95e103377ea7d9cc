//! Experiment harnesses: one-step-ahead series forecasting and character
//! language modelling on top of any [`Cell`].

mod series;
mod text;

pub use series::{
    load_csv_series, parse_csv_series, synth_var_raw, synth_var_series, SeriesConfig, SeriesDataset,
    SynthConfig, VarProcess,
};
pub use text::{load_text, TextConfig, TextDataset};

use std::time::Instant;

use crate::analysis::{inventory, inventory_baseline, MetricRecord};
use crate::bilevel::{
    evaluate, run_epoch, train_stage, BilevelConfig, EarlyStop, Objective, OptimizerState, ParamGrads,
    StageOptions,
};
use crate::cells::{Capture, Cell, CellSpec, EdgeId, GradMode, ModelState, ParamId};
use crate::morphism::{split_report, SplitReport};
use crate::search::{SearchTask, Split};
use crate::tensor::{Tape, Var};
use crate::{Error, Result, Tensor};

/// Per-step inputs of a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// One `batch x d` tensor per step.
    Dense(Vec<Tensor>),
    /// One id per batch row per step.
    Tokens(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Regression target for the last step, `batch x d`.
    Last(Tensor),
    /// Next-token ids at every step.
    Tokens(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
}

impl Batch {
    pub fn rows(&self) -> usize {
        match &self.targets {
            Targets::Last(y) => y.rows(),
            Targets::Tokens(t) => t.first().map_or(0, Vec::len),
        }
    }

    /// Number of loss terms the batch mean is taken over (per output column).
    pub fn weight(&self) -> f64 {
        match &self.targets {
            Targets::Last(y) => y.rows() as f64,
            Targets::Tokens(t) => (t.len() * self.rows()) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Linear map to `n_out` values, mean squared error.
    Regression { n_out: usize },
    /// Embedding in, linear map to `classes` logits out, cross-entropy.
    Classifier { classes: usize },
}

pub fn head_weight() -> ParamId {
    ParamId::aux("head.w")
}

pub fn head_bias() -> ParamId {
    ParamId::aux("head.b")
}

pub fn embedding() -> ParamId {
    ParamId::aux("embed")
}

/// A cell plus its task head.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub cell: Cell,
    pub head: Head,
}

impl TaskModel {
    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut state = ModelState::empty(seed);
        self.init_into(&mut state);
        state
    }

    /// Adds fresh cell and head tensors to `state`.
    pub fn init_into(&self, state: &mut ModelState) {
        self.cell.init_into(state);
        let n_h = self.cell.n_h();
        let n_out = match self.head {
            Head::Regression { n_out } => n_out,
            Head::Classifier { classes } => {
                state.insert_standard(embedding(), (classes, self.cell.n_x()), n_h);
                classes
            }
        };
        state.insert_standard(head_weight(), (n_h, n_out), n_h);
        state.insert_standard(head_bias(), (1, n_out), n_h);
    }

    /// Mean loss of `batch` on the tape.
    pub fn loss(&self, tape: &mut Tape, b: &crate::cells::Bindings, batch: &Batch, capture: Option<&mut Capture>) -> Result<Var> {
        let rows = batch.rows();
        if rows == 0 {
            return Err(Error::Precondition("empty batch".into()));
        }
        let xs: Vec<Var> = match (&batch.inputs, self.head) {
            (Inputs::Dense(steps), Head::Regression { .. }) => steps.iter().map(|t| tape.constant(t.clone())).collect(),
            (Inputs::Tokens(steps), Head::Classifier { .. }) => {
                let table = b.param(&embedding())?;
                steps.iter().map(|ids| tape.embed(table, ids)).collect::<std::result::Result<_, _>>()?
            }
            _ => return Err(Error::Precondition("batch does not match the model head".into())),
        };
        let h0 = self.cell.zero_hidden(tape, rows);
        let hs = self.cell.unroll(tape, b, &xs, h0, capture)?;
        let (w, bias) = (b.param(&head_weight())?, b.param(&head_bias())?);
        let project = |tape: &mut Tape, h: Var| -> Result<Var> {
            let z = tape.matmul(h, w)?;
            Ok(tape.add_row(z, bias)?)
        };
        match &batch.targets {
            Targets::Last(y) => {
                let pred = project(tape, *hs.last().expect("unroll returns every step"))?;
                let y = tape.constant(y.clone());
                Ok(tape.mse(pred, y)?)
            }
            Targets::Tokens(steps) => {
                let mut total = None;
                for (h, ids) in hs.iter().zip(steps) {
                    let logits = project(tape, *h)?;
                    let ce = tape.cross_entropy(logits, ids)?;
                    total = Some(match total {
                        None => ce,
                        Some(t) => tape.add(t, ce)?,
                    });
                }
                let total = total.ok_or_else(|| Error::Precondition("empty sequence".into()))?;
                Ok(tape.scale(total, 1.0 / steps.len() as f64)?)
            }
        }
    }

    pub fn objective(&self) -> ModelObjective<'_> {
        ModelObjective { model: self }
    }
}

pub struct ModelObjective<'a> {
    model: &'a TaskModel,
}

impl Objective for ModelObjective<'_> {
    type Batch = Batch;

    fn loss_and_grad(&self, state: &ModelState, batch: &Batch, mode: GradMode) -> Result<(f64, ParamGrads)> {
        let mut tape = Tape::new();
        let b = self.model.cell.bind(&mut tape, state, mode)?;
        let root = self.model.loss(&mut tape, &b, batch, None)?;
        let loss = tape.value(root).get(0, 0);
        if mode == GradMode::NONE {
            return Ok((loss, ParamGrads::default()));
        }
        let mut grads = tape.backward(root)?;
        let (weights, alphas) = b.collect(&tape, &mut grads);
        Ok((loss, ParamGrads { weights, alphas }))
    }

    fn batch_weight(&self, batch: &Batch) -> f64 {
        batch.weight()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Series(SeriesDataset),
    Text(TextDataset),
}

/// Training batches fed to one splitting report.
const SPLIT_BATCHES: usize = 4;

/// A dataset with its batches cut once, ready for training any cell.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub data: TaskData,
    pub n_h: usize,
    train: Vec<Batch>,
    val: Vec<Batch>,
    test: Vec<Batch>,
}

impl Experiment {
    pub fn new(data: TaskData, n_h: usize) -> Result<Self> {
        if n_h == 0 {
            return Err(Error::Config("model.n_h must be >= 1".into()));
        }
        let cut = |s| match &data {
            TaskData::Series(d) => d.batches(s),
            TaskData::Text(d) => d.batches(s),
        };
        let (train, val, test) = (cut(Split::Train), cut(Split::Val), cut(Split::Test));
        if train.is_empty() || val.is_empty() || test.is_empty() {
            return Err(Error::Config("every split needs at least one example".into()));
        }
        Ok(Experiment { data, n_h, train, val, test })
    }

    /// Cell input width: the series dimension, or the embedding size (`n_h`).
    pub fn n_x(&self) -> usize {
        match &self.data {
            TaskData::Series(d) => d.dim(),
            TaskData::Text(_) => self.n_h,
        }
    }

    pub fn head(&self) -> Head {
        match &self.data {
            TaskData::Series(d) => Head::Regression { n_out: d.dim() },
            TaskData::Text(d) => Head::Classifier { classes: d.classes() },
        }
    }

    pub fn model(&self, cell: Cell) -> TaskModel {
        TaskModel { cell, head: self.head() }
    }

    pub fn batches(&self, split: Split) -> &[Batch] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Mean loss of `state` over a split.
    pub fn evaluate_model(&self, model: &TaskModel, state: &ModelState, split: Split) -> Result<f64> {
        evaluate(&model.objective(), state, self.batches(split))
    }
}

impl SearchTask for Experiment {
    fn dims(&self) -> (usize, usize) {
        (self.n_x(), self.n_h)
    }

    fn init_state(&self, spec: &CellSpec, seed: u64) -> Result<ModelState> {
        Ok(self.model(Cell::Searched(spec.clone())).init_state(seed))
    }

    fn train_epoch(
        &self,
        spec: &CellSpec,
        state: &mut ModelState,
        opt: &mut OptimizerState,
        cursor: &mut usize,
        update_alphas: bool,
        cfg: &BilevelConfig,
    ) -> Result<f64> {
        let model = self.model(Cell::Searched(spec.clone()));
        run_epoch(&model.objective(), state, opt, &self.train, &self.val, cfg, cursor, update_alphas)
    }

    fn evaluate(&self, spec: &CellSpec, state: &ModelState, split: Split) -> Result<f64> {
        self.evaluate_model(&self.model(Cell::Searched(spec.clone())), state, split)
    }

    fn split_report(&self, spec: &CellSpec, state: &ModelState, edge: EdgeId) -> Result<Option<SplitReport>> {
        let model = self.model(Cell::Searched(spec.clone()));
        let batches = &self.train[..self.train.len().min(SPLIT_BATCHES)];
        let total: f64 = batches.iter().map(Batch::weight).sum();
        let report = split_report(spec, state, edge, &|tape, b, cap| {
            let mut acc: Option<Var> = None;
            for batch in batches {
                let l = model.loss(tape, b, batch, Some(&mut *cap))?;
                let l = tape.scale(l, batch.weight() / total)?;
                acc = Some(match acc {
                    None => l,
                    Some(a) => tape.add(a, l)?,
                });
            }
            acc.ok_or_else(|| Error::Precondition("no training batches".into()))
        })?;
        Ok(Some(report))
    }
}

/// Outcome of training one fixed cell.
#[derive(Debug)]
pub struct FixedRun {
    pub state: ModelState,
    pub val_loss: f64,
    pub test_loss: f64,
    pub records: Vec<MetricRecord>,
}

fn cell_params(cell: &Cell, state: &ModelState) -> Result<u64> {
    match cell {
        Cell::Searched(spec) => inventory(spec, state),
        Cell::Baseline { kind, n_x, n_h } => inventory_baseline(*kind, *n_x, *n_h, state),
    }
}

/// Trains a fixed cell (a conventional cell, or a backbone with its logits)
/// to early stopping and evaluates the best checkpoint.
pub fn run_fixed(exp: &Experiment, cell: Cell, cfg: &BilevelConfig, stop: EarlyStop, seed: u64) -> Result<FixedRun> {
    let start = Instant::now();
    let model = exp.model(cell);
    let state = model.init_state(seed);
    let nodes = model.cell.spec().map_or(0, CellSpec::node_count);
    let params = cell_params(&model.cell, &state)?;
    let record = |phase: &str, epoch, train: Option<f64>, val, test| MetricRecord {
        trial: seed,
        backbone: model.cell.name(),
        mode: "fixed".into(),
        stage: 1,
        phase: phase.into(),
        epoch,
        train_loss: train,
        val_loss: val,
        test_loss: test,
        node_count: nodes,
        param_count: params,
        event: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let mut records = Vec::new();
    let opts = StageOptions { update_alphas: model.cell.spec().is_some(), include_initial: false };
    let out = train_stage(&model.objective(), state, &exp.train, &exp.val, cfg, stop, opts, &mut |s| {
        records.push(record("train", s.epoch, Some(s.train_loss), Some(s.val_loss), None));
    })?;
    let val_loss = exp.evaluate_model(&model, &out.state, Split::Val)?;
    let test_loss = exp.evaluate_model(&model, &out.state, Split::Test)?;
    records.push(record("eval", 0, None, Some(val_loss), Some(test_loss)));
    Ok(FixedRun { state: out.state, val_loss, test_loss, records })
}
