use std::cell::Cell as Counter;

use cellgrow::analysis::{inventory, write_metrics_csv};
use cellgrow::bilevel::{BilevelConfig, EarlyStop, OptimizerState};
use cellgrow::cells::{Backbone, CellSpec, ModelState};
use cellgrow::morphism::{replay, Decision, EventKind, MorphConfig};
use cellgrow::rng::stream;
use cellgrow::search::*;
use cellgrow::tasks::{synth_var_series, Experiment, SeriesConfig, SynthConfig, TaskData};
use cellgrow::{Error, Result};

/// Evaluation is a fixed function of the node count; training does nothing.
struct Scripted {
    eva: fn(usize) -> f64,
    fail_at_nodes: Option<usize>,
    epochs: Counter<usize>,
}

impl Scripted {
    fn new(eva: fn(usize) -> f64) -> Self {
        Scripted { eva, fail_at_nodes: None, epochs: Counter::new(0) }
    }
}

impl SearchTask for Scripted {
    fn dims(&self) -> (usize, usize) {
        (3, 3)
    }

    fn init_state(&self, spec: &CellSpec, seed: u64) -> Result<ModelState> {
        Ok(ModelState::for_spec(spec, seed))
    }

    fn train_epoch(&self, spec: &CellSpec, _: &mut ModelState, _: &mut OptimizerState, _: &mut usize, _: bool, _: &BilevelConfig) -> Result<f64> {
        self.epochs.set(self.epochs.get() + 1);
        if Some(spec.node_count()) == self.fail_at_nodes {
            return Err(Error::Precondition("scripted failure".into()));
        }
        Ok(1.0)
    }

    fn evaluate(&self, spec: &CellSpec, _: &ModelState, split: Split) -> Result<f64> {
        let v = (self.eva)(spec.node_count());
        Ok(if split == Split::Test { v + 10.0 } else { v })
    }
}

fn cfg(mode: PruneMode, stages: usize) -> SearchConfig {
    SearchConfig { mode, max_stages: stages, morph: MorphConfig { delta: 0.0, sigma: 0.0, ..MorphConfig::default() }, ..SearchConfig::default() }
}

fn kinds(r: &SearchResult) -> Vec<EventKind> {
    r.events.iter().map(|e| e.kind).collect()
}

#[test]
fn one_stage_trains_and_evaluates_once() {
    for mode in [PruneMode::PruneEachStage, PruneMode::PruneAtEnd] {
        let task = Scripted::new(|_| 1.0);
        let r = run_search(&cfg(mode, 1), &task, 0).unwrap();
        assert!(r.complete);
        assert_eq!(r.stages.len(), 1);
        assert_eq!(r.spec.node_count(), 2);
        assert_eq!(kinds(&r), vec![EventKind::PruneStage]);
        // constant loss: the first epoch is best and patience 2 ends the stage
        assert_eq!(r.stages[0].epochs, 3);
        let evals = r.records.iter().filter(|x| x.phase == "eval").count();
        assert_eq!(evals, 1);
        assert_eq!(r.final_eva.is_some(), mode == PruneMode::PruneAtEnd);
    }
}

#[test]
fn a_worse_stage_stops_the_search_and_keeps_the_previous_best() {
    for mode in [PruneMode::PruneEachStage, PruneMode::PruneAtEnd] {
        let task = Scripted::new(|m| [0.0, 0.0, 1.0, 0.5, 0.7, 0.1][m]);
        let r = run_search(&cfg(mode, 6), &task, 3).unwrap();
        assert!(r.complete);
        assert_eq!(r.stages.iter().map(|s| (s.nodes, s.accepted)).collect::<Vec<_>>(), vec![(2, true), (3, true), (4, false)]);
        assert_eq!(r.eva_best, 0.5);
        assert_eq!(r.spec.node_count(), 3);
        assert!(r.spec.edges().all(|e| e.ops.len() == 1));
        // the losing growth is logged but not part of the lineage
        let grows = r.events.iter().filter(|e| e.kind == EventKind::GrowNode).count();
        assert_eq!(grows, 2);
        assert_eq!(r.lineage_events().filter(|e| e.kind == EventKind::GrowNode).count(), 1);
        assert_eq!(replay(&r.initial_spec, r.lineage_events()).unwrap(), r.spec);
        r.state.check(&r.spec).unwrap();
    }
}

#[test]
fn first_stage_loss_stops_after_two_stages() {
    let task = Scripted::new(|m| if m == 2 { 0.4 } else { 0.6 });
    let r = run_search(&cfg(PruneMode::PruneEachStage, 5), &task, 0).unwrap();
    assert_eq!(r.stages.len(), 2);
    assert_eq!((r.spec.node_count(), r.eva_best), (2, 0.4));
    assert_eq!(replay(&r.initial_spec, r.lineage_events()).unwrap(), r.spec);
}

#[test]
fn accepted_stages_never_increase_the_best() {
    let task = Scripted::new(|m| 1.0 / m as f64);
    let r = run_search(&cfg(PruneMode::PruneAtEnd, 4), &task, 0).unwrap();
    assert!(r.stages.iter().all(|s| s.accepted));
    let evas: Vec<f64> = r.stages.iter().map(|s| s.eva).collect();
    assert!(evas.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(r.spec.node_count(), 5);
    assert_eq!(r.final_eva, Some(0.2));
    // pre-final evaluations use full mixed edges
    assert!(r.records.iter().filter(|x| x.phase == "eval").all(|x| x.param_count > 5 * 3 * 3));
}

#[test]
fn eval_split_chooses_the_comparison_loss() {
    let task = Scripted::new(|m| 1.0 / m as f64);
    let mut c = cfg(PruneMode::PruneEachStage, 2);
    c.eval_split = Split::Test;
    let r = run_search(&c, &task, 0).unwrap();
    assert_eq!(r.stages[0].eva, 10.5);
    assert_eq!(r.stages[0].val_loss, 0.5);
    c.eval_split = Split::Train;
    assert!(matches!(run_search(&c, &task, 0), Err(Error::Config(_))));
}

#[test]
fn errors_end_the_run_with_the_best_so_far() {
    let mut task = Scripted::new(|m| 1.0 / m as f64);
    task.fail_at_nodes = Some(4);
    let r = run_search(&cfg(PruneMode::PruneEachStage, 6), &task, 0).unwrap();
    assert!(!r.complete);
    assert!(matches!(r.failure, Some(Error::Precondition(_))));
    assert_eq!(r.spec.node_count(), 3);
    assert_eq!(replay(&r.initial_spec, r.lineage_events()).unwrap(), r.spec);
}

#[test]
fn update_operations_dispatches_decisions() {
    let spec = CellSpec::new(Backbone::TwoToOne, 3, 3, 2).unwrap();
    let state = ModelState::for_spec(&spec, 0);
    let m = MorphConfig { delta: 0.0, sigma: 0.0, op_prune_threshold: 0.21, op_grow_threshold: 0.5, ..MorphConfig::default() };
    let mut rng = stream(0, "test", 0);
    let e = spec.edges().next().unwrap().id;
    assert!(update_operations(&spec, &state, &Decision::Continue, &[], &m, &mut rng).unwrap().is_none());
    let t = update_operations(&spec, &state, &Decision::PruneOp { edge: e }, &[], &m, &mut rng).unwrap().unwrap();
    assert_eq!(t.spec.edge(e).unwrap().ops.len(), 4);
    let grow = Decision::GrowOp { edge: e };
    assert!(matches!(update_operations(&spec, &state, &grow, &[], &m, &mut rng), Err(Error::Precondition(_))));
    let mut state = state;
    state.alphas.get_mut(&e).unwrap()[0] = 5.0;
    let t = update_operations(&spec, &state, &grow, &[], &m, &mut rng).unwrap().unwrap();
    assert_eq!(t.spec.edge(e).unwrap().ops.len(), 6);
    assert_eq!(t.event.kind, EventKind::GrowOpMorph);
    let split = Decision::SplitOp { edge: e, ops: vec![0] };
    assert!(update_operations(&spec, &state, &split, &[], &m, &mut rng).is_err());
}

fn experiment(length: usize) -> Experiment {
    let synth = SynthConfig { d: 3, length, ..SynthConfig::default() };
    let (data, _) = synth_var_series(1, &synth, &SeriesConfig::default()).unwrap();
    Experiment::new(TaskData::Series(data), 3).unwrap()
}

fn quick(mode: PruneMode, stages: usize) -> SearchConfig {
    SearchConfig {
        mode,
        max_stages: stages,
        stop: EarlyStop { patience: 2, max_epochs: 4 },
        tune_stop: EarlyStop { patience: 1, max_epochs: 2 },
        ..SearchConfig::default()
    }
}

#[test]
fn both_modes_share_the_first_stage_curve() {
    let exp = experiment(300);
    let a = run_search(&quick(PruneMode::PruneEachStage, 2), &exp, 5).unwrap();
    let b = run_search(&quick(PruneMode::PruneAtEnd, 2), &exp, 5).unwrap();
    let curve = |r: &SearchResult| -> Vec<(Option<f64>, Option<f64>, u64)> {
        r.records.iter().filter(|x| x.stage == 1 && x.phase == "search").map(|x| (x.train_loss, x.val_loss, x.param_count)).collect()
    };
    assert!(!curve(&a).is_empty());
    assert_eq!(curve(&a), curve(&b));
    assert!(a.records.iter().any(|x| x.phase == "tune"));
    assert!(!b.records.iter().any(|x| x.phase == "tune"));
}

#[test]
fn search_is_reproducible() {
    let exp = experiment(300);
    let c = quick(PruneMode::PruneEachStage, 3);
    let (a, b) = (run_search(&c, &exp, 9).unwrap(), run_search(&c, &exp, 9).unwrap());
    let csv = |r: &SearchResult| {
        let mut buf = Vec::new();
        write_metrics_csv(&r.records, &mut buf).unwrap();
        buf
    };
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(serde_json::to_string(&a.events).unwrap(), serde_json::to_string(&b.events).unwrap());
    assert_eq!(a.spec, b.spec);
    let r = run_search(&c, &exp, 10).unwrap();
    assert_ne!(csv(&a), csv(&r));
}

#[test]
fn tuning_freezes_the_logits() {
    let exp = experiment(300);
    let spec = CellSpec::new(Backbone::TwoToOne, 3, 3, 2).unwrap();
    let mut state = exp.init_state(&spec, 0).unwrap();
    for (k, a) in state.alphas.values_mut().enumerate() {
        a.iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 * i as f64 - 0.1 * k as f64);
    }
    let before = state.alphas.clone();
    let mut epochs = Vec::new();
    let tuned = tune(&exp, &spec, state.clone(), EarlyStop { patience: 3, max_epochs: 3 }, &BilevelConfig::default(), &mut |s| epochs.push(*s)).unwrap();
    assert_eq!(tuned.alphas, before);
    assert_eq!(epochs[0].epoch, 0);
    let v0 = exp.evaluate(&spec, &state, Split::Val).unwrap();
    let v1 = exp.evaluate(&spec, &tuned, Split::Val).unwrap();
    assert!(v1 <= v0);
}

#[test]
fn records_match_the_live_model() {
    let exp = experiment(300);
    let r = run_search(&quick(PruneMode::PruneEachStage, 3), &exp, 2).unwrap();
    assert!(r.complete);
    let last = r.records.iter().rev().find(|x| x.phase == "eval" && x.val_loss == Some(r.stages.iter().find(|s| s.eva == r.eva_best).unwrap().val_loss)).unwrap();
    assert_eq!(last.param_count, inventory(&r.spec, &r.state).unwrap());
    assert_eq!(last.node_count, r.spec.node_count());
    for s in &r.stages {
        assert!(r.records.iter().any(|x| x.stage == s.stage && x.phase == "eval"));
    }
}

#[test]
fn dynamic_operator_changes_replay_to_the_final_cell() {
    let exp = experiment(300);
    let mut c = quick(PruneMode::PruneAtEnd, 2);
    c.dynamic_ops = true;
    // uniform logits sit below both thresholds, so a prune fires at once
    c.morph = MorphConfig { op_prune_threshold: 0.21, op_grow_threshold: 0.5, ..MorphConfig::default() };
    let r = run_search(&c, &exp, 4).unwrap();
    assert!(r.complete, "{:?}", r.failure);
    assert!(r.events.iter().any(|e| e.kind == EventKind::PruneOp));
    assert_eq!(replay(&r.initial_spec, r.lineage_events()).unwrap(), r.spec);
    r.state.check(&r.spec).unwrap();
    assert!(r.records.iter().any(|x| x.event.as_deref().is_some_and(|e| e.split(";").any(|k| k == "prune_op"))));
}
