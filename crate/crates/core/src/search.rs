//! The growing search loop: train a backbone, optionally prune and tune,
//! evaluate, and either grow a node or stop. Pruning happens after every
//! stage or once at the end.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{inventory, MetricRecord};
use crate::bilevel::{BilevelConfig, EarlyStop, EpochStats, OptimizerState};
use crate::cells::{Backbone, CellSpec, EdgeId, ModelState, OutputRule};
use crate::morphism::{
    criteria_check, grow_node, grow_operator_morph, grow_operator_split, prune_operator_dynamic,
    prune_stage, CriteriaInput, Decision, GrowthEvent, MorphConfig, SplitReport, SplitStrategy,
    Transformed,
};
use crate::rng::{stream, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    #[default]
    PruneEachStage,
    PruneAtEnd,
}

impl PruneMode {
    pub fn name(self) -> &'static str {
        match self {
            PruneMode::PruneEachStage => "prune_each_stage",
            PruneMode::PruneAtEnd => "prune_at_end",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub backbone: Backbone,
    pub output_rule: OutputRule,
    pub mode: PruneMode,
    /// Nodes in the first stage.
    pub m0: usize,
    pub max_stages: usize,
    /// Stopping rule inside each search stage.
    pub stop: EarlyStop,
    /// Stopping rule for weight-only fine tuning after a prune.
    pub tune_stop: EarlyStop,
    /// Grow, split and prune single ops during training.
    pub dynamic_ops: bool,
    /// Fine-tune after the final prune in `prune_at_end` mode.
    pub tune_after_final_prune: bool,
    /// Split used for the stage-level comparison.
    pub eval_split: Split,
    pub morph: MorphConfig,
    pub bilevel: BilevelConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            backbone: Backbone::TwoToOne,
            output_rule: OutputRule::Mean,
            mode: PruneMode::PruneEachStage,
            m0: 2,
            max_stages: 6,
            stop: EarlyStop::default(),
            tune_stop: EarlyStop::default(),
            dynamic_ops: false,
            tune_after_final_prune: false,
            eval_split: Split::Val,
            morph: MorphConfig::default(),
            bilevel: BilevelConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m0 == 0 || self.max_stages == 0 {
            return Err(Error::Config("search.m0 and search.max_stages must be >= 1".into()));
        }
        if self.eval_split == Split::Train {
            return Err(Error::Config("search.eval_split must be val or test".into()));
        }
        self.stop.validate()?;
        self.tune_stop.validate()?;
        self.morph.validate()?;
        self.bilevel.validate()
    }
}

/// What the search loop needs from a task.
pub trait SearchTask {
    /// `(n_x, n_h)` of the cell.
    fn dims(&self) -> (usize, usize);

    /// Fresh state for `spec`, including any task-owned tensors.
    fn init_state(&self, spec: &CellSpec, seed: u64) -> Result<ModelState>;

    /// One pass over the training data, returning the mean training loss.
    /// With `update_alphas`, architecture steps use validation batches
    /// starting at `cursor`.
    fn train_epoch(
        &self,
        spec: &CellSpec,
        state: &mut ModelState,
        opt: &mut OptimizerState,
        cursor: &mut usize,
        update_alphas: bool,
        cfg: &BilevelConfig,
    ) -> Result<f64>;

    fn evaluate(&self, spec: &CellSpec, state: &ModelState, split: Split) -> Result<f64>;

    /// Splitting report for `edge` on training data; `None` when the task
    /// does not support it.
    fn split_report(&self, _spec: &CellSpec, _state: &ModelState, _edge: EdgeId) -> Result<Option<SplitReport>> {
        Ok(None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub nodes: usize,
    pub epochs: usize,
    pub eva: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    /// The stage improved the best evaluation.
    pub accepted: bool,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct SearchResult {
    pub initial_spec: CellSpec,
    /// Final architecture: the best one, pruned in `prune_at_end` mode.
    pub spec: CellSpec,
    pub state: ModelState,
    pub eva_best: f64,
    /// Evaluation of the pruned best model in `prune_at_end` mode.
    pub final_eva: Option<f64>,
    pub stages: Vec<StageSummary>,
    pub records: Vec<MetricRecord>,
    /// Every transform, including those later discarded.
    pub events: Vec<GrowthEvent>,
    /// Indices into `events` that rebuild `spec` from `initial_spec`.
    pub lineage: Vec<usize>,
    pub complete: bool,
    pub failure: Option<Error>,
}

impl SearchResult {
    pub fn lineage_events(&self) -> impl Iterator<Item = &GrowthEvent> {
        self.lineage.iter().map(|&i| &self.events[i])
    }
}

/// Adds one node, inheriting every existing tensor.
pub fn update_nodes(spec: &CellSpec, state: &ModelState, cfg: &MorphConfig, rng: &mut Rng) -> Result<Transformed> {
    grow_node(spec, state, cfg, rng)
}

/// Applies an operator-level decision. `None` when the decision is not an
/// operator transform or its precondition no longer holds.
pub fn update_operations(
    spec: &CellSpec,
    state: &ModelState,
    decision: &Decision,
    reports: &[SplitReport],
    cfg: &MorphConfig,
    rng: &mut Rng,
) -> Result<Option<Transformed>> {
    match decision {
        Decision::GrowOp { edge } => grow_operator_morph(spec, state, *edge, cfg, rng).map(Some),
        Decision::SplitOp { edge, ops } => {
            let report = reports
                .iter()
                .find(|r| r.edge == *edge)
                .ok_or_else(|| Error::Precondition(format!("no split report for {edge}")))?;
            let chosen = SplitReport {
                edge: *edge,
                ops: report.ops.iter().filter(|o| ops.contains(&o.op)).cloned().collect(),
            };
            let cfg = MorphConfig { split_strategy: SplitStrategy::Simultaneous, ..cfg.clone() };
            grow_operator_split(spec, state, &chosen, &cfg).map(Some)
        }
        Decision::PruneOp { edge } => prune_operator_dynamic(spec, state, *edge, cfg),
        _ => Ok(None),
    }
}

/// Weight-only training from `state` with logits frozen; returns the
/// best-validation checkpoint (the incoming state competes as epoch 0).
pub fn tune<T: SearchTask + ?Sized>(
    task: &T,
    spec: &CellSpec,
    state: ModelState,
    stop: EarlyStop,
    cfg: &BilevelConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<ModelState> {
    stop.validate()?;
    let mut opt = OptimizerState::new(cfg);
    let mut best_val = task.evaluate(spec, &state, Split::Val)?;
    on_epoch(&EpochStats { epoch: 0, train_loss: f64::NAN, val_loss: best_val });
    let mut best = state.clone();
    let mut state = state;
    let (mut cursor, mut bad) = (0, 0);
    for epoch in 1..=stop.max_epochs {
        let train_loss = task.train_epoch(spec, &mut state, &mut opt, &mut cursor, false, cfg)?;
        let val_loss = task.evaluate(spec, &state, Split::Val)?;
        on_epoch(&EpochStats { epoch, train_loss, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best = state.clone();
            bad = 0;
        } else {
            bad += 1;
            if bad >= stop.patience {
                break;
            }
        }
    }
    Ok(best)
}

struct Run<'a, T: ?Sized> {
    task: &'a T,
    cfg: &'a SearchConfig,
    seed: u64,
    start: Instant,
    records: Vec<MetricRecord>,
    events: Vec<GrowthEvent>,
    lineage: Vec<usize>,
    stages: Vec<StageSummary>,
    dynamic_draws: u64,
}

#[derive(Clone)]
struct Model {
    spec: CellSpec,
    state: ModelState,
    lineage: usize,
}

impl<'a, T: SearchTask + ?Sized> Run<'a, T> {
    fn record(&mut self, spec: &CellSpec, state: &ModelState, stage: usize, phase: &str, epoch: usize, losses: [Option<f64>; 3]) -> Result<()> {
        self.records.push(MetricRecord {
            trial: self.seed,
            backbone: self.cfg.backbone.name().into(),
            mode: self.cfg.mode.name().into(),
            stage,
            phase: phase.into(),
            epoch,
            train_loss: losses[0].filter(|v| v.is_finite()),
            val_loss: losses[1],
            test_loss: losses[2],
            node_count: spec.node_count(),
            param_count: inventory(spec, state)?,
            event: None,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    fn push_event(&mut self, mut event: GrowthEvent, stage: usize) {
        event.stage = Some(stage);
        if let Some(r) = self.records.last_mut() {
            let kind = serde_json::to_value(event.kind).ok().and_then(|v| v.as_str().map(String::from));
            r.event = match (r.event.take(), kind) {
                (Some(a), Some(b)) => Some(format!("{a};{b}")),
                (a, b) => a.or(b),
            };
        }
        self.lineage.push(self.events.len());
        self.events.push(event);
    }

    fn split_reports(&self, spec: &CellSpec, state: &ModelState) -> Result<Vec<SplitReport>> {
        let mut out = Vec::new();
        for e in spec.edges() {
            if e.ops.iter().any(|o| o.kind.activation().is_some()) {
                if let Some(r) = self.task.split_report(spec, state, e.id)? {
                    out.push(r);
                }
            }
        }
        Ok(out)
    }

    /// Bilevel training with optional operator transforms at epoch ends.
    fn train(&mut self, model: Model, stage: usize) -> Result<(Model, usize)> {
        let cfg = self.cfg;
        let Model { mut spec, mut state, .. } = model;
        let mut opt = OptimizerState::new(&cfg.bilevel);
        let (mut cursor, mut bad, mut epochs) = (0usize, 0usize, 0usize);
        let mut best_val = f64::INFINITY;
        let mut best = Model { spec: spec.clone(), state: state.clone(), lineage: self.lineage.len() };
        for epoch in 1..=cfg.stop.max_epochs {
            epochs = epoch;
            let train_loss = self.task.train_epoch(&spec, &mut state, &mut opt, &mut cursor, true, &cfg.bilevel)?;
            let val_loss = self.task.evaluate(&spec, &state, Split::Val)?;
            self.record(&spec, &state, stage, "search", epoch, [Some(train_loss), Some(val_loss), None])?;
            let improved = val_loss < best_val;
            if improved {
                best_val = val_loss;
                best = Model { spec: spec.clone(), state: state.clone(), lineage: self.lineage.len() };
                bad = 0;
            } else {
                bad += 1;
                if bad >= cfg.stop.patience {
                    break;
                }
            }
            if !cfg.dynamic_ops {
                continue;
            }
            let reports = if improved { Vec::new() } else { self.split_reports(&spec, &state)? };
            let input = CriteriaInput {
                plateaued: !improved,
                edge_weights: spec
                    .edges()
                    .map(|e| Ok((e.id, state.edge_weights(&spec, e.id)?)))
                    .collect::<Result<_>>()?,
                reports,
                ..CriteriaInput::default()
            };
            let decision = criteria_check(&input, &cfg.morph);
            let mut rng = stream(self.seed, "dynamic", self.dynamic_draws);
            self.dynamic_draws += 1;
            if let Some(t) = update_operations(&spec, &state, &decision, &input.reports, &cfg.morph, &mut rng)? {
                self.push_event(t.event, stage);
                (spec, state) = (t.spec, t.state);
                opt.retain_for(&state);
                // the transformed model becomes the incumbent
                best_val = self.task.evaluate(&spec, &state, Split::Val)?;
                best = Model { spec: spec.clone(), state: state.clone(), lineage: self.lineage.len() };
                bad = 0;
            }
        }
        self.lineage.truncate(best.lineage);
        Ok((best, epochs))
    }

    fn tune(&mut self, model: Model, stage: usize, phase: &str) -> Result<Model> {
        let mut stats = Vec::new();
        let state = tune(self.task, &model.spec, model.state, self.cfg.tune_stop, &self.cfg.bilevel, &mut |s| stats.push(*s))?;
        for s in stats {
            self.record(&model.spec, &state, stage, phase, s.epoch, [Some(s.train_loss), Some(s.val_loss), None])?;
        }
        Ok(Model { state, ..model })
    }

    fn prune(&mut self, model: Model, stage: usize) -> Result<Model> {
        let t = prune_stage(&model.spec, &model.state, &self.cfg.morph)?;
        self.push_event(t.event, stage);
        Ok(Model { spec: t.spec, state: t.state, lineage: self.lineage.len() })
    }

    fn eval_all(&self, model: &Model) -> Result<(f64, f64, f64)> {
        let val = self.task.evaluate(&model.spec, &model.state, Split::Val)?;
        let test = self.task.evaluate(&model.spec, &model.state, Split::Test)?;
        let eva = if self.cfg.eval_split == Split::Test { test } else { val };
        Ok((eva, val, test))
    }

    fn run(&mut self, initial: Model, out: &mut Option<Model>, eva_best: &mut f64, final_eva: &mut Option<f64>) -> Result<()> {
        let cfg = self.cfg;
        let mut model = initial;
        for stage in 1..=cfg.max_stages {
            let t0 = Instant::now();
            let (trained, epochs) = self.train(model, stage)?;
            model = trained;
            if cfg.mode == PruneMode::PruneEachStage {
                model = self.prune(model, stage)?;
                model = self.tune(model, stage, "tune")?;
            }
            let (eva, val, test) = self.eval_all(&model)?;
            self.record(&model.spec, &model.state, stage, "eval", 0, [None, Some(val), Some(test)])?;
            let accepted = eva < *eva_best;
            self.stages.push(StageSummary {
                stage,
                nodes: model.spec.node_count(),
                epochs,
                eva,
                val_loss: val,
                test_loss: test,
                accepted,
                seconds: t0.elapsed().as_secs_f64(),
            });
            if !accepted {
                break;
            }
            *eva_best = eva;
            *out = Some(Model { spec: model.spec.clone(), state: model.state.clone(), lineage: self.lineage.len() });
            if stage < cfg.max_stages {
                let mut rng = stream(self.seed, "grow", stage as u64);
                let t = update_nodes(&model.spec, &model.state, &cfg.morph, &mut rng)?;
                self.push_event(t.event, stage);
                model = Model { spec: t.spec, state: t.state, lineage: self.lineage.len() };
            }
        }
        let best = out.clone().expect("the first stage always improves on +inf");
        self.lineage.truncate(best.lineage);
        let stage = self.stages.len();
        let best = if cfg.mode == PruneMode::PruneAtEnd {
            let mut pruned = self.prune(best, stage)?;
            if cfg.tune_after_final_prune {
                pruned = self.tune(pruned, stage, "final_tune")?;
            }
            let (eva, val, test) = self.eval_all(&pruned)?;
            self.record(&pruned.spec, &pruned.state, stage, "final", 0, [None, Some(val), Some(test)])?;
            *final_eva = Some(eva);
            pruned
        } else {
            best
        };
        *out = Some(best);
        Ok(())
    }
}

/// Runs the growing search for one trial seed. Errors inside the loop end the
/// run early: the result then carries the best model so far, `complete =
/// false` and the error.
pub fn run_search<T: SearchTask + ?Sized>(cfg: &SearchConfig, task: &T, seed: u64) -> Result<SearchResult> {
    cfg.validate()?;
    let (n_x, n_h) = task.dims();
    let spec = CellSpec::new(cfg.backbone, n_x, n_h, cfg.m0)?.with_output_rule(cfg.output_rule);
    let state = task.init_state(&spec, seed)?;
    let mut run = Run {
        task,
        cfg,
        seed,
        start: Instant::now(),
        records: Vec::new(),
        events: Vec::new(),
        lineage: Vec::new(),
        stages: Vec::new(),
        dynamic_draws: 0,
    };
    let initial = Model { spec: spec.clone(), state: state.clone(), lineage: 0 };
    let mut best = None;
    let mut eva_best = f64::INFINITY;
    let mut final_eva = None;
    let outcome = run.run(initial, &mut best, &mut eva_best, &mut final_eva);
    let best = best.unwrap_or(Model { spec: spec.clone(), state, lineage: 0 });
    run.lineage.truncate(best.lineage);
    Ok(SearchResult {
        initial_spec: spec,
        spec: best.spec,
        state: best.state,
        eva_best,
        final_eva,
        stages: run.stages,
        records: run.records,
        events: run.events,
        lineage: run.lineage,
        complete: outcome.is_ok(),
        failure: outcome.err(),
    })
}
