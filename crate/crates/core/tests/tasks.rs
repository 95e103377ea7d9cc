use cellgrow::bilevel::evaluate;
use cellgrow::cells::{Backbone, BaselineKind, Cell, CellSpec};
use cellgrow::search::Split;
use cellgrow::tasks::*;
use cellgrow::{Error, Tensor};

fn series(t: usize, d: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(t, d, f)
}

#[test]
fn constant_columns_normalize_to_zero() {
    let raw = series(100, 2, |i, j| if j == 0 { 4.5 } else { i as f64 });
    let data = SeriesDataset::from_matrix(&raw, &SeriesConfig::default()).unwrap();
    assert_eq!(data.std[0], 1.0);
    assert!((0..100).all(|i| data.values.get(i, 0) == 0.0));
    for b in data.batches(Split::Train) {
        let Targets::Last(y) = &b.targets else { panic!() };
        assert!((0..y.rows()).all(|r| y.get(r, 0) == 0.0));
    }
}

#[test]
fn window_counts_follow_the_split_arithmetic() {
    let raw = series(100, 3, |i, j| (i * 3 + j) as f64);
    let data = SeriesDataset::from_matrix(&raw, &SeriesConfig::default()).unwrap();
    assert_eq!(data.bounds, [0, 80, 90, 100]);
    assert_eq!(data.window_count(Split::Train), 70);
    assert_eq!(data.window_count(Split::Val), 0);
    assert_eq!(data.batches(Split::Train).iter().map(Batch::rows).collect::<Vec<_>>(), vec![50, 20]);
    // an experiment needs windows in every split
    assert!(matches!(Experiment::new(TaskData::Series(data), 3), Err(Error::Config(_))));

    let data = SeriesDataset::from_matrix(&series(200, 3, |i, j| (i + j) as f64), &SeriesConfig::default()).unwrap();
    assert_eq!([Split::Train, Split::Val, Split::Test].map(|s| data.window_count(s)), [150, 10, 10]);
    let short = SeriesConfig { window: 80, ..SeriesConfig::default() };
    assert!(SeriesDataset::from_matrix(&raw, &short).is_err());
}

#[test]
fn windows_reassemble_the_series() {
    let raw = series(300, 4, |i, j| ((i * 7 + j * 13) % 17) as f64 * 0.3 - (j as f64));
    let data = SeriesDataset::from_matrix(&raw, &SeriesConfig::default()).unwrap();
    let undo = |v: f64, j: usize| v * data.std[j] + data.mean[j];
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut rebuilt: Vec<Vec<f64>> = Vec::new();
        for (k, b) in data.batches(split).iter().enumerate() {
            let (Inputs::Dense(steps), Targets::Last(y)) = (&b.inputs, &b.targets) else { panic!() };
            if k == 0 {
                for s in steps {
                    rebuilt.push((0..4).map(|j| undo(s.get(0, j), j)).collect());
                }
            }
            // every window is the previous one shifted by a row
            for r in 0..y.rows() {
                assert!(steps.iter().all(|s| s.rows() == y.rows()));
                rebuilt.push((0..4).map(|j| undo(y.get(r, j), j)).collect());
            }
        }
        let start = data.targets(split).start - data.window;
        for (i, row) in rebuilt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((v - raw.get(start + i, j)).abs() < 1e-12, "{split:?} row {i}");
            }
        }
        assert_eq!(start + rebuilt.len(), data.targets(split).end);
    }
}

#[test]
fn training_statistics_ignore_val_and_test() {
    let base = |i: usize| ((i * 5) % 11) as f64;
    let raw = series(200, 1, |i, _| if i < 160 { base(i) } else { 1e3 * base(i) + 7e4 });
    let data = SeriesDataset::from_matrix(&raw, &SeriesConfig::default()).unwrap();
    let train: Vec<f64> = (0..160).map(base).collect();
    let mean = train.iter().sum::<f64>() / 160.0;
    let var = train.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 160.0;
    assert!((data.mean[0] - mean).abs() < 1e-12);
    assert!((data.std[0] - var.sqrt()).abs() < 1e-12);
}

#[test]
fn csv_errors_carry_line_numbers() {
    let ok = parse_csv_series("a,b\n1,2\n3.5,-4\n").unwrap();
    assert_eq!((ok.rows(), ok.cols(), ok.get(1, 1)), (2, 2, -4.0));
    match parse_csv_series("a,b\n1,2\n3\n5,6\n") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    match parse_csv_series("a,b\n1,2\n3,4\n5,x\n") {
        Err(Error::Parse { line, msg }) => {
            assert_eq!(line, 4);
            assert!(msg.contains("\"x\""));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_csv_series("a,b\n"), Err(Error::Parse { .. })));
}

#[test]
fn csv_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let mut text = String::from("x,y\n");
    for i in 0..120 {
        text.push_str(&format!("{},{}\n", i, (i * i) % 13));
    }
    std::fs::write(&path, text).unwrap();
    let data = load_csv_series(&path, &SeriesConfig::default()).unwrap();
    assert_eq!((data.values.rows(), data.dim()), (120, 2));
    assert!(matches!(load_csv_series(&dir.path().join("missing.csv"), &SeriesConfig::default()), Err(Error::Io(_))));
}

#[test]
fn synthetic_series_is_deterministic() {
    let cfg = SynthConfig::default();
    let (a, pa) = synth_var_raw(11, &cfg).unwrap();
    let (b, pb) = synth_var_raw(11, &cfg).unwrap();
    assert!(a.bit_eq(&b));
    assert_eq!(pa, pb);
    let (c, _) = synth_var_raw(12, &cfg).unwrap();
    assert!(!a.bit_eq(&c));
    assert_eq!((a.rows(), a.cols()), (2000, 7));
}

fn true_predictor_mse(raw: &Tensor, p: &VarProcess) -> f64 {
    let lag = p.coeffs.len();
    let mut total = 0.0;
    for t in lag..raw.rows() {
        let pred = p.predict(raw, t);
        total += pred.iter().enumerate().map(|(j, v)| (v - raw.get(t, j)).powi(2)).sum::<f64>();
    }
    total / ((raw.rows() - lag) * raw.cols()) as f64
}

#[test]
fn noiseless_series_is_predicted_exactly() {
    let cfg = SynthConfig { noise: 0.0, length: 500, ..SynthConfig::default() };
    let (raw, p) = synth_var_raw(3, &cfg).unwrap();
    let scale = (0..raw.rows()).map(|i| raw.get(i, 0).abs()).fold(0.0, f64::max);
    assert!(scale > 0.0);
    assert!(true_predictor_mse(&raw, &p).sqrt() < 1e-12 * scale);
}

#[test]
fn true_predictor_error_matches_the_noise_variance() {
    let cfg = SynthConfig { length: 10_000, ..SynthConfig::default() };
    for seed in 0..3 {
        let (raw, p) = synth_var_raw(seed, &cfg).unwrap();
        let mse = true_predictor_mse(&raw, &p);
        let want = cfg.noise * cfg.noise;
        assert!((mse / want - 1.0).abs() < 0.05, "seed {seed}: {mse} vs {want}");
    }
}

#[test]
fn coefficients_are_rescaled_to_a_stable_radius() {
    // a noiseless trajectory decays at the spectral radius
    let cfg = SynthConfig { noise: 0.0, length: 2000, ..SynthConfig::default() };
    for seed in 0..3 {
        let (raw, p) = synth_var_raw(seed, &cfg).unwrap();
        let norm = |t: usize| -> f64 {
            (t - p.coeffs.len()..t).flat_map(|i| (0..raw.cols()).map(move |j| (i, j))).map(|(i, j)| raw.get(i, j).powi(2)).sum::<f64>().sqrt()
        };
        let rate = (norm(1999) / norm(999)).powf(1.0 / 1000.0);
        assert!((rate - 0.9).abs() < 0.01, "seed {seed}: {rate}");
    }
}

#[test]
fn bayes_floor_is_in_normalized_units() {
    let (data, floor) = synth_var_series(0, &SynthConfig::default(), &SeriesConfig::default()).unwrap();
    let want = data.std.iter().map(|s| (0.1 / s).powi(2)).sum::<f64>() / 7.0;
    assert!((floor - want).abs() < 1e-15);
    // the series carries signal: predicting zero is well above the floor
    assert!(floor < 0.8);
}

fn text_cfg(seq_len: usize, counts: [usize; 3]) -> TextConfig {
    TextConfig { seq_len, batch_size: 50, train: counts[0], val: counts[1], test: counts[2], unk: true }
}

#[test]
fn tiny_corpus_vocabulary() {
    let data = TextDataset::from_text("ababab", &text_cfg(1, [1, 1, 1])).unwrap();
    assert_eq!(data.vocab, vec!['a', 'b']);
    assert_eq!(data.classes(), 3);
    assert_eq!(data.tokens, vec![0, 1, 0, 1, 0, 1]);
    assert!(matches!(TextDataset::from_text("", &text_cfg(1, [1, 1, 1])), Err(Error::Precondition(_))));
    assert!(matches!(TextDataset::from_text("abab", &text_cfg(1, [1, 1, 1])), Err(Error::Config(_))));
}

fn corpus(n: usize) -> String {
    let words = ["the ", "cat ", "sat ", "on ", "a ", "mat, ", "then ", "slept. "];
    (0..n).map(|i| words[(i * 7 + i / 3) % words.len()]).collect()
}

#[test]
fn split_counts_are_exact_and_tokens_round_trip() {
    let text = corpus(600);
    let cfg = TextConfig { batch_size: 7, ..text_cfg(8, [40, 9, 5]) };
    let data = TextDataset::from_text(&text, &cfg).unwrap();
    for (split, n) in [(Split::Train, 40), (Split::Val, 9), (Split::Test, 5)] {
        assert_eq!(data.example_count(split), n);
        let batches = data.batches(split);
        assert_eq!(batches.iter().map(Batch::rows).sum::<usize>(), n);
        for b in &batches {
            let (Inputs::Tokens(x), Targets::Tokens(y)) = (&b.inputs, &b.targets) else { panic!() };
            assert_eq!((x.len(), y.len()), (8, 8));
            // targets are the inputs shifted by one character
            for s in 0..7 {
                assert_eq!(x[s + 1], y[s]);
            }
        }
    }
    assert_eq!(data.bounds, [(0, 321), (321, 394), (394, 435)]);
    let (a, b) = data.bounds[0];
    let chars: Vec<char> = text.chars().collect();
    assert_eq!(data.decode(&data.tokens[a..b]), chars[a..b].iter().collect::<String>());
}

#[test]
fn vocabulary_comes_from_train_only() {
    let text = format!("{}{}", "ab".repeat(23), "xy".repeat(30));
    let data = TextDataset::from_text(&text, &text_cfg(9, [5, 2, 2])).unwrap();
    assert_eq!(data.vocab, vec!['a', 'b']);
    let (a, _) = data.bounds[1];
    assert!(data.tokens[a..].iter().all(|&t| t == 2));
    let strict = TextConfig { unk: false, ..text_cfg(9, [5, 2, 2]) };
    assert!(matches!(TextDataset::from_text(&text, &strict), Err(Error::Config(_))));
}

fn zero_head(model: &TaskModel, seed: u64) -> cellgrow::cells::ModelState {
    let mut state = model.init_state(seed);
    for id in [head_weight(), head_bias()] {
        let t = state.weights.get_mut(&id).unwrap();
        *t = Tensor::zeros(t.rows(), t.cols());
    }
    state
}

#[test]
fn uniform_predictor_scores_log_classes() {
    let text = corpus(600);
    for unk in [false, true] {
        let cfg = TextConfig { unk, ..text_cfg(8, [40, 9, 5]) };
        let data = TextDataset::from_text(&text, &cfg).unwrap();
        let classes = data.classes();
        let exp = Experiment::new(TaskData::Text(data), 6).unwrap();
        let model = exp.model(Cell::Baseline { kind: BaselineKind::Gru, n_x: exp.n_x(), n_h: 6 });
        let state = zero_head(&model, 0);
        for split in [Split::Train, Split::Val, Split::Test] {
            let ce = exp.evaluate_model(&model, &state, split).unwrap();
            assert!((ce - (classes as f64).ln()).abs() < 1e-12, "unk={unk} {split:?}");
        }
    }
}

#[test]
fn evaluation_does_not_depend_on_batch_size() {
    let (data, _) = synth_var_series(5, &SynthConfig { length: 600, ..SynthConfig::default() }, &SeriesConfig::default()).unwrap();
    let spec = CellSpec::new(Backbone::TwoToOne, 7, 7, 3).unwrap();
    let exp = Experiment::new(TaskData::Series(data.clone()), 7).unwrap();
    let model = exp.model(Cell::Searched(spec));
    let state = model.init_state(2);
    for split in [Split::Train, Split::Val, Split::Test] {
        let one = evaluate(&model.objective(), &state, &data.batches_of(split, 1)).unwrap();
        let fifty = evaluate(&model.objective(), &state, &data.batches_of(split, 50)).unwrap();
        assert!((one - fifty).abs() < 1e-10, "{split:?}: {one} vs {fifty}");
    }

    let text = TextDataset::from_text(&corpus(600), &text_cfg(8, [40, 9, 5])).unwrap();
    let exp = Experiment::new(TaskData::Text(text.clone()), 5).unwrap();
    let model = exp.model(Cell::Searched(CellSpec::new(Backbone::Darts, 5, 5, 2).unwrap()));
    let state = model.init_state(4);
    let one = evaluate(&model.objective(), &state, &text.batches_of(Split::Val, 1)).unwrap();
    let fifty = evaluate(&model.objective(), &state, &text.batches_of(Split::Val, 50)).unwrap();
    assert!((one - fifty).abs() < 1e-10);
    assert_eq!(exp.evaluate_model(&model, &state, Split::Val).unwrap().to_bits(), exp.evaluate_model(&model, &state, Split::Val).unwrap().to_bits());
}

#[test]
fn mismatched_batches_are_rejected() {
    let text = TextDataset::from_text(&corpus(600), &text_cfg(8, [40, 9, 5])).unwrap();
    let (series, _) = synth_var_series(0, &SynthConfig { length: 600, ..SynthConfig::default() }, &SeriesConfig::default()).unwrap();
    let exp = Experiment::new(TaskData::Series(series), 7).unwrap();
    let model = exp.model(Cell::Baseline { kind: BaselineKind::Rnn, n_x: 7, n_h: 7 });
    let state = model.init_state(0);
    assert!(matches!(evaluate(&model.objective(), &state, &text.batches(Split::Val)), Err(Error::Precondition(_))));
}
