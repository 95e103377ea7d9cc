//! One trial per seed: build the data, run, write the trial directory.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use cellgrow::analysis::{write_metrics_csv, write_timing_csv, MetricRecord};
use cellgrow::cells::{io, Cell, CellSpec, EdgeSource};
use cellgrow::search::{run_search, SearchResult};
use cellgrow::tasks::{
    load_csv_series, load_text, run_fixed, synth_var_series, Experiment, FixedRun, TaskData,
};
use serde::Serialize;

use crate::config::{RunConfig, TaskBlock};

/// Data for one seed, plus the Bayes floor when it is known.
pub fn experiment(cfg: &RunConfig, seed: u64) -> anyhow::Result<(Experiment, Option<f64>)> {
    let (data, floor) = match &cfg.task {
        TaskBlock::Synth { data_seed, synth, series } => {
            let (d, floor) = synth_var_series(data_seed.unwrap_or(seed), synth, series)?;
            (TaskData::Series(d), Some(floor))
        }
        TaskBlock::Csv { path, series } => (TaskData::Series(load_csv_series(path, series).with_context(|| format!("loading {}", path.display()))?), None),
        TaskBlock::Text { path, text } => (TaskData::Text(load_text(path, text).with_context(|| format!("loading {}", path.display()))?), None),
    };
    let n_h = cfg.model.n_h.unwrap_or(match &data {
        TaskData::Series(d) => d.dim(),
        TaskData::Text(_) => 32,
    });
    Ok((Experiment::new(data, n_h)?, floor))
}

/// Runs `f` for every seed on up to `jobs` threads; results keep seed order.
pub fn for_each_seed<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, seeds.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let out = f(seed);
                *slots[i].lock().expect("no panics while holding the slot") = Some(out);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("unpoisoned").expect("every slot filled")).collect()
}

pub fn trial_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("trial-{seed:04}"))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_records(dir: &Path, records: &[MetricRecord]) -> anyhow::Result<()> {
    let mut m = create(&dir.join("metrics.csv"))?;
    write_metrics_csv(records, &mut m)?;
    m.flush()?;
    let mut t = create(&dir.join("timing.csv"))?;
    write_timing_csv(records, &mut t)?;
    t.flush()?;
    Ok(())
}

fn ops_summary(spec: &CellSpec) -> String {
    let mut s = String::new();
    for node in &spec.nodes {
        for e in &node.edges {
            let ops: Vec<String> = e.ops.iter().map(|o| o.kind.to_string()).collect();
            let source = match e.source {
                EdgeSource::Input => "input".to_string(),
                EdgeSource::Node(n) => n.to_string(),
            };
            let _ = writeln!(s, "  {} {} <- {source}: {}", node.id, e.id, ops.join(", "));
        }
    }
    s
}

#[derive(Serialize)]
struct EventLine<'a> {
    index: usize,
    in_lineage: bool,
    event: &'a cellgrow::morphism::GrowthEvent,
}

pub fn write_search_trial(dir: &Path, cfg: &RunConfig, seed: u64, r: &SearchResult, floor: Option<f64>) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("resolved_config.toml"), &cfg.for_seed(seed).to_toml()?)?;
    write_json(&dir.join("spec_initial.json"), &r.initial_spec)?;
    write_json(&dir.join("spec_final.json"), &r.spec)?;
    write_text(&dir.join("model_final.json"), &(io::to_json(Some(&r.spec), &r.state)? + "\n"))?;
    let mut ev = create(&dir.join("events.jsonl"))?;
    for (index, event) in r.events.iter().enumerate() {
        let line = EventLine { index, in_lineage: r.lineage.contains(&index), event };
        writeln!(ev, "{}", serde_json::to_string(&line)?)?;
    }
    ev.flush()?;
    write_records(dir, &r.records)?;

    let mut s = String::new();
    let _ = writeln!(s, "seed {seed}");
    let _ = writeln!(s, "complete {}", r.complete);
    if let Some(f) = &r.failure {
        let _ = writeln!(s, "failure {f}");
    }
    let _ = writeln!(s, "eva_best {}", r.eva_best);
    if let Some(v) = r.final_eva {
        let _ = writeln!(s, "final_eva {v}");
    }
    if let Some(floor) = floor {
        let _ = writeln!(s, "bayes_floor {floor}");
    }
    let _ = writeln!(s, "final_nodes {}", r.spec.node_count());
    let _ = writeln!(s, "final_params {}", cellgrow::analysis::inventory(&r.spec, &r.state)?);
    let _ = writeln!(s, "\nstage nodes epochs eva val test accepted");
    for st in &r.stages {
        let _ = writeln!(s, "{} {} {} {:.6} {:.6} {:.6} {}", st.stage, st.nodes, st.epochs, st.eva, st.val_loss, st.test_loss, st.accepted);
    }
    let _ = writeln!(s, "\nfinal cell");
    s.push_str(&ops_summary(&r.spec));
    write_text(&dir.join("summary.txt"), &s)
}

pub fn write_fixed_trial(dir: &Path, cfg: &RunConfig, seed: u64, cell: &Cell, r: &FixedRun) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("resolved_config.toml"), &cfg.for_seed(seed).to_toml()?)?;
    write_text(&dir.join("model_final.json"), &(io::to_json(cell.spec(), &r.state)? + "\n"))?;
    write_records(dir, &r.records)?;
    let params = r.records.last().map_or(0, |x| x.param_count);
    let s = format!(
        "seed {seed}\nmodel {}\nparams {params}\nepochs {}\nval_loss {}\ntest_loss {}\n",
        cell.name(),
        r.records.iter().filter(|x| x.phase == "train").count(),
        r.val_loss,
        r.test_loss
    );
    write_text(&dir.join("summary.txt"), &s)
}

/// Outcome of one seed as reported on stderr and in the run summary.
pub struct TrialOutcome {
    pub seed: u64,
    pub line: String,
    pub records: Vec<MetricRecord>,
    pub error: Option<anyhow::Error>,
}

pub fn search_trial(cfg: &RunConfig, out: &Path, seed: u64) -> TrialOutcome {
    let run = || -> anyhow::Result<(SearchResult, Option<f64>)> {
        let (exp, floor) = experiment(cfg, seed)?;
        let r = run_search(&cfg.search_config(), &exp, seed)?;
        write_search_trial(&trial_dir(out, seed), cfg, seed, &r, floor)?;
        Ok((r, floor))
    };
    match run() {
        Ok((mut r, floor)) => {
            let ratio = floor.map(|f| format!(" ratio_to_floor {:.4}", r.final_eva.unwrap_or(r.eva_best) / f)).unwrap_or_default();
            let line = format!(
                "trial {seed}: complete {} stages {} nodes {} eva_best {:.6}{}{ratio}",
                r.complete,
                r.stages.len(),
                r.spec.node_count(),
                r.eva_best,
                r.final_eva.map(|v| format!(" final_eva {v:.6}")).unwrap_or_default(),
            );
            let error = r.failure.take().map(anyhow::Error::from);
            TrialOutcome { seed, line, records: r.records, error }
        }
        Err(e) => TrialOutcome { seed, line: format!("trial {seed}: error: {e:#}"), records: Vec::new(), error: Some(e) },
    }
}

pub fn baseline_trial(cfg: &RunConfig, out: &Path, seed: u64) -> TrialOutcome {
    let run = || -> anyhow::Result<(FixedRun, String)> {
        let (exp, _) = experiment(cfg, seed)?;
        let (n_x, n_h) = (exp.n_x(), exp.n_h);
        let cell = match cfg.model.baseline.kind() {
            Some(kind) => Cell::Baseline { kind, n_x, n_h },
            None => Cell::Searched(CellSpec::new(cfg.model.backbone, n_x, n_h, cfg.model.nodes)?.with_output_rule(cfg.model.output_rule)),
        };
        let r = run_fixed(&exp, cell.clone(), &cfg.bilevel, cfg.stop(), seed)?;
        write_fixed_trial(&trial_dir(out, seed), cfg, seed, &cell, &r)?;
        Ok((r, cell.name()))
    };
    match run() {
        Ok((r, name)) => TrialOutcome {
            seed,
            line: format!("trial {seed}: {name} val_loss {:.6} test_loss {:.6}", r.val_loss, r.test_loss),
            records: r.records,
            error: None,
        },
        Err(e) => TrialOutcome { seed, line: format!("trial {seed}: error: {e:#}"), records: Vec::new(), error: Some(e) },
    }
}
