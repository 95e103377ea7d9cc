use std::path::Path;
use std::process::{Command, Output};

fn cellgrow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellgrow")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const QUICK: &str = r#"
version = 1
seeds = [3, 4]

[task]
kind = "synth"

[task.synth]
d = 3
length = 300

[search]
max_stages = 2
max_epochs = 3
tune_max_epochs = 2
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn count_prints_both_preset_columns() {
    let o = cellgrow(&["count"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = out.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows[0], ["lstm", "392", "200"]);
    assert_eq!(rows[1], ["gru", "294", "150"]);
    assert_eq!(rows[7], ["darts", "7", "3416", "1760"]);
    assert_eq!(rows[8], ["two_to_one", "2", "836", "440"]);
}

#[test]
fn count_custom_dims_and_bias() {
    let o = cellgrow(&["count", "--n-x", "7", "--n-h", "7", "--max-nodes", "2", "--bias"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["lstm", "420"]));
    assert_eq!(cellgrow(&["count", "--min-nodes", "5", "--max-nodes", "3"]).status.code(), Some(1));
}

#[test]
fn config_errors_exit_with_one_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("missing.toml", "version = 1\n[task]\nkind = \"csv\"\n", "path"),
        ("unknown.toml", "version = 1\nseedz = [1]\n[task]\nkind = \"synth\"\n", "seedz"),
        ("nested.toml", "version = 1\n[task]\nkind = \"synth\"\n[task.synth]\nlengthh = 4\n", "lengthh"),
        ("version.toml", "version = 2\n[task]\nkind = \"synth\"\n", "version"),
        ("nofile.toml", "version = 1\n[task]\nkind = \"csv\"\npath = \"nope.csv\"\n", "nope.csv"),
    ];
    for (name, text, needle) in cases {
        let cfg = write_config(dir.path(), name, text);
        let out = dir.path().join("out");
        let o = cellgrow(&["search", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{name}: {}", stderr(&o));
        assert!(stderr(&o).contains(needle), "{name}: {}", stderr(&o));
    }
    let o = cellgrow(&["search", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn search_writes_one_directory_per_seed_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", QUICK);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cellgrow(&["search", "--config", &cfg, "--out", out.to_str().unwrap(), "--jobs", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["resolved_config.toml", "spec_initial.json", "spec_final.json", "model_final.json", "events.jsonl", "metrics.csv", "timing.csv", "summary.txt"] {
        assert!(a.join("trial-0003").join(f).is_file(), "{f}");
    }
    for seed in ["trial-0003", "trial-0004"] {
        for f in ["metrics.csv", "events.jsonl", "model_final.json"] {
            assert_eq!(read(a.join(seed).join(f)), read(b.join(seed).join(f)), "{seed}/{f}");
        }
    }
    assert_ne!(read(a.join("trial-0003/metrics.csv")), read(a.join("trial-0004/metrics.csv")));
    assert_eq!(read(a.join("aggregate.csv")), read(b.join("aggregate.csv")));

    // each trial's resolved config reruns that trial alone
    let resolved = a.join("trial-0004/resolved_config.toml");
    let c = dir.path().join("c");
    let o = cellgrow(&["search", "--config", resolved.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(a.join("trial-0004/metrics.csv")), read(c.join("trial-0004/metrics.csv")));
    assert!(!c.join("trial-0003").exists());

    // export recomputes the aggregate from the trial files
    let agg = dir.path().join("agg.csv");
    let o = cellgrow(&["export", a.to_str().unwrap(), "--out", agg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read(&agg), read(a.join("aggregate.csv")));
}

#[test]
fn baseline_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "quick.toml", &QUICK.replace("[search]", "[model]\nbaseline = \"gru\"\n\n[search]"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cellgrow(&["baseline", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "7"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(read(a.join("trial-0007/metrics.csv")), read(b.join("trial-0007/metrics.csv")));
    let summary = String::from_utf8(read(a.join("trial-0007/summary.txt"))).unwrap();
    assert!(summary.contains("model gru"), "{summary}");
}

#[test]
fn text_configs_resolve_paths_next_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("corpus.txt"), "the cat sat on the mat. ".repeat(40)).unwrap();
    let cfg = write_config(
        dir.path(),
        "text.toml",
        "version = 1\n[task]\nkind = \"text\"\npath = \"corpus.txt\"\n[task.text]\nseq_len = 8\nbatch_size = 16\ntrain = 64\nval = 16\ntest = 16\n[model]\nn_h = 4\n[search]\nmax_stages = 1\nmax_epochs = 1\ntune_max_epochs = 1\n",
    );
    let out = dir.path().join("out");
    let o = cellgrow(&["search", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("trial-0000/metrics.csv").is_file());
}

#[test]
fn gradcheck_passes_and_a_fault_fails_with_three() {
    let o = cellgrow(&["gradcheck", "--seeds", "2", "--steps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().skip(1).all(|l| l.ends_with("ok")), "{out}");
    let o = cellgrow(&["gradcheck", "--seeds", "2", "--steps", "3", "--fault", "lstm_unrolled"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("lstm_unrolled"));
    assert_eq!(cellgrow(&["gradcheck", "--fault", "nonsense"]).status.code(), Some(1));
}
