//! Benchmarks only; see `benches/`.

use cellgrow::tasks::{synth_var_series, Experiment, SeriesConfig, SynthConfig, TaskData};

/// A small synthetic series task shared by the training benchmarks.
pub fn small_experiment(d: usize, length: usize) -> Experiment {
    let synth = SynthConfig { d, length, ..SynthConfig::default() };
    let (data, _) = synth_var_series(0, &synth, &SeriesConfig::default()).expect("valid synthetic config");
    Experiment::new(TaskData::Series(data), d).expect("non-empty splits")
}
