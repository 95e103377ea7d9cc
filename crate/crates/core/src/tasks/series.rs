//! Multivariate series: CSV ingestion, a synthetic VAR generator and
//! sliding-window batching for one-step-ahead prediction.

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Batch, Inputs, Targets};
use crate::rng::stream;
use crate::search::Split;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeriesConfig {
    pub window: usize,
    pub batch_size: usize,
    /// Train / validation / test fractions of the rows.
    pub split: [f64; 3],
}

impl Default for SeriesConfig {
    fn default() -> Self {
        SeriesConfig { window: 10, batch_size: 50, split: [0.8, 0.1, 0.1] }
    }
}

impl SeriesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.batch_size == 0 {
            return Err(Error::Config("series.window and series.batch_size must be >= 1".into()));
        }
        if self.split.iter().any(|f| !(*f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("series.split must be three positive fractions summing to 1".into()));
        }
        Ok(())
    }
}

/// A `T x d` series, normalized with train-split statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    /// Normalized values, one row per time step.
    pub values: Tensor,
    pub mean: Vec<f64>,
    /// Train standard deviation per column; constant columns use 1.
    pub std: Vec<f64>,
    /// Row boundaries `[0, a, b, T]` of the three splits.
    pub bounds: [usize; 4],
    pub window: usize,
    pub batch_size: usize,
}

impl SeriesDataset {
    /// Splits and normalizes; the train split must hold at least one window.
    pub fn from_matrix(raw: &Tensor, cfg: &SeriesConfig) -> Result<Self> {
        cfg.validate()?;
        let t = raw.rows();
        let a = (cfg.split[0] * t as f64).round() as usize;
        let b = ((cfg.split[0] + cfg.split[1]) * t as f64).round() as usize;
        let bounds = [0, a, b, t];
        // val/test may come out empty; Experiment rejects that when batching
        if a <= cfg.window {
            return Err(Error::Config(format!("a train split of {a} rows is too short for window {}", cfg.window)));
        }
        if !raw.is_finite() {
            return Err(Error::Precondition("series contains non-finite values".into()));
        }
        let d = raw.cols();
        let n = a as f64;
        let mean: Vec<f64> = (0..d).map(|j| (0..a).map(|i| raw.get(i, j)).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let v = (0..a).map(|i| (raw.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let values = Tensor::from_fn(t, d, |i, j| (raw.get(i, j) - mean[j]) / std[j]);
        Ok(SeriesDataset { values, mean, std, bounds, window: cfg.window, batch_size: cfg.batch_size })
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    fn range(&self, split: Split) -> (usize, usize) {
        let k = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        (self.bounds[k], self.bounds[k + 1])
    }

    /// Target row indices of a split's windows; inputs are the `window` rows
    /// before each target, all inside the split.
    pub fn targets(&self, split: Split) -> std::ops::Range<usize> {
        let (a, b) = self.range(split);
        (a + self.window).min(b)..b
    }

    pub fn window_count(&self, split: Split) -> usize {
        self.targets(split).len()
    }

    /// Consecutive windows grouped into mini-batches, in time order.
    pub fn batches(&self, split: Split) -> Vec<Batch> {
        self.batches_of(split, self.batch_size)
    }

    pub fn batches_of(&self, split: Split, batch_size: usize) -> Vec<Batch> {
        let targets: Vec<usize> = self.targets(split).collect();
        let d = self.dim();
        targets
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let steps = (0..self.window)
                    .map(|s| Tensor::from_fn(chunk.len(), d, |r, j| self.values.get(chunk[r] - self.window + s, j)))
                    .collect();
                let y = Tensor::from_fn(chunk.len(), d, |r, j| self.values.get(chunk[r], j));
                Batch { inputs: Inputs::Dense(steps), targets: Targets::Last(y) }
            })
            .collect()
    }
}

/// Reads a comma-separated numeric table with a header row.
pub fn load_csv_series(path: &Path, cfg: &SeriesConfig) -> Result<SeriesDataset> {
    let text = std::fs::read_to_string(path)?;
    SeriesDataset::from_matrix(&parse_csv_series(&text)?, cfg)
}

pub fn parse_csv_series(text: &str) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(text.as_bytes());
    let width = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(Error::Parse { line, msg: format!("expected {width} fields, found {}", rec.len()) });
        }
        for field in rec.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("not a number: {field:?}") })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    Ok(Tensor::new(rows, width, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub d: usize,
    pub length: usize,
    pub lag: usize,
    /// Standard deviation of the innovations.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { d: 7, length: 2000, lag: 2, noise: 0.1 }
    }
}

/// Generating process of a synthetic series.
#[derive(Clone, Debug, PartialEq)]
pub struct VarProcess {
    /// `coeffs[l]` multiplies `y_{t-l-1}` (as a row vector, `y A`).
    pub coeffs: Vec<Tensor>,
    pub noise: f64,
}

impl VarProcess {
    /// Conditional mean of `y_t` given the rows before `t`.
    pub fn predict(&self, series: &Tensor, t: usize) -> Vec<f64> {
        let d = series.cols();
        let mut out = vec![0.0; d];
        for (l, a) in self.coeffs.iter().enumerate() {
            let row = t - l - 1;
            for (j, o) in out.iter_mut().enumerate() {
                *o += (0..d).map(|i| series.get(row, i) * a.get(i, j)).sum::<f64>();
            }
        }
        out
    }
}

const BURN_IN: usize = 200;
/// Spectral radius the coefficients are rescaled to.
pub const TARGET_RADIUS: f64 = 0.9;

/// Spectral radius of the companion matrix of `coeffs`, from Gelfand's
/// formula `rho = lim |C^k|^(1/k)` with `k = 2^SQUARINGS`.
pub fn companion_radius(coeffs: &[Tensor]) -> f64 {
    const SQUARINGS: u32 = 12;
    let d = coeffs[0].rows();
    let n = d * coeffs.len();
    // row-vector convention: state [y_{t-1}, ..., y_{t-p}] maps to [y_t, ..., y_{t-p+1}]
    let mut m = Tensor::from_fn(n, n, |i, j| {
        let (bi, ri) = (i / d, i % d);
        let (bj, rj) = (j / d, j % d);
        if bj == 0 {
            coeffs[bi].get(ri, rj)
        } else if bi + 1 == bj && ri == rj {
            1.0
        } else {
            0.0
        }
    });
    let mut log_scale = 0.0;
    for _ in 0..SQUARINGS {
        m = m.matmul(&m).expect("square");
        let f = m.norm();
        if f == 0.0 {
            return 0.0;
        }
        m = m.scale(1.0 / f);
        log_scale = 2.0 * log_scale + f.ln();
    }
    (log_scale / f64::from(2u32.pow(SQUARINGS))).exp()
}

/// Deterministic VAR(`lag`) series with Gaussian coefficients, rescaled so
/// the companion matrix has spectral radius [`TARGET_RADIUS`].
pub fn synth_var_raw(seed: u64, cfg: &SynthConfig) -> Result<(Tensor, VarProcess)> {
    if cfg.d == 0 || cfg.lag == 0 || cfg.length == 0 || !(cfg.noise >= 0.0) {
        return Err(Error::Config("synth needs d, lag, length >= 1 and noise >= 0".into()));
    }
    let mut rng = stream(seed, "synth/coeffs", 0);
    let scale = 1.0 / (cfg.d as f64).sqrt();
    let mut coeffs: Vec<Tensor> = (0..cfg.lag)
        .map(|_| Tensor::from_fn(cfg.d, cfg.d, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    // scaling A_l by g^l scales every companion eigenvalue by g
    let g = TARGET_RADIUS / companion_radius(&coeffs);
    for (l, a) in coeffs.iter_mut().enumerate() {
        *a = a.scale(g.powi(l as i32 + 1));
    }
    let process = VarProcess { coeffs, noise: cfg.noise };
    let mut rng = stream(seed, "synth/noise", 0);
    let n = cfg.length + BURN_IN;
    // random start rows keep the noiseless series non-trivial
    let mut start = stream(seed, "synth/start", 0);
    let mut y = Tensor::from_fn(n, cfg.d, |i, _| if i < cfg.lag { start.sample(StandardNormal) } else { 0.0 });
    for t in cfg.lag..n {
        let mean = process.predict(&y, t);
        for (j, m) in mean.into_iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            y.set(t, j, m + cfg.noise * e);
        }
    }
    let kept = Tensor::from_fn(cfg.length, cfg.d, |i, j| y.get(i + BURN_IN, j));
    Ok((kept, process))
}

/// Synthetic dataset plus its Bayes floor: the expected MSE of the true
/// conditional mean, in normalized units.
pub fn synth_var_series(seed: u64, synth: &SynthConfig, cfg: &SeriesConfig) -> Result<(SeriesDataset, f64)> {
    let (raw, process) = synth_var_raw(seed, synth)?;
    let data = SeriesDataset::from_matrix(&raw, cfg)?;
    let floor = data.std.iter().map(|s| (process.noise / s).powi(2)).sum::<f64>() / data.dim() as f64;
    Ok((data, floor))
}
