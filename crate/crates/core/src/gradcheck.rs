//! Central finite-difference checks of the reverse-mode gradients.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::cells::{BaselineKind, Backbone, Cell, CellSpec, GradMode, ModelState};
use crate::rng::{stream, Rng};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Norm-relative discrepancy `|a - n| / max(|a|, |n|)`; both tiny counts as a match.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradient(
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for k in 0..inputs[i].len() {
            let (r, c) = (k / inputs[i].cols(), k % inputs[i].cols());
            let x0 = inputs[i].get(r, c);
            work[i].set(r, c, x0 + FD_STEP);
            let up = f(&work)?;
            work[i].set(r, c, x0 - FD_STEP);
            let down = f(&work)?;
            work[i].set(r, c, x0);
            g.set(r, c, (up - down) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    Ok(out)
}

type GraphFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Largest relative error over `inputs` between tape gradients of `build` and
/// central differences. `corrupt` scales the analytic gradient (fault injection).
pub fn check_graph(inputs: &[Tensor], build: &GraphFn<'_>, corrupt: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = build(&mut tape, &vars)?;
    let mut grads = tape.backward(root)?;
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).get(0, 0))
    };
    let numeric = numeric_gradient(inputs, &eval)?;
    let mut worst: f64 = 0.0;
    for (v, n) in vars.iter().zip(&numeric) {
        let a = grads
            .take(*v)
            .unwrap_or_else(|| Tensor::zeros(n.rows(), n.cols()))
            .scale(corrupt);
        worst = worst.max(relative_error(a.data(), n.data()));
    }
    Ok(worst)
}

/// Checks every weight and logit gradient of a loss built from `(cell, state)`.
pub fn check_state(
    cell: &Cell,
    state: &ModelState,
    loss: &dyn Fn(&mut Tape, &crate::cells::Bindings) -> Result<Var>,
    corrupt: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = cell.bind(&mut tape, state, GradMode::ALL)?;
    let root = loss(&mut tape, &b)?;
    let mut grads = tape.backward(root)?;
    let (pg, ag) = b.collect(&tape, &mut grads);

    let eval = |s: &ModelState| -> Result<f64> {
        let mut tape = Tape::new();
        let b = cell.bind(&mut tape, s, GradMode::NONE)?;
        let root = loss(&mut tape, &b)?;
        Ok(tape.value(root).get(0, 0))
    };
    let mut worst: f64 = 0.0;
    let mut work = state.clone();
    for (id, t) in &state.weights {
        let mut numeric = vec![0.0; t.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let (r, c) = (k / t.cols(), k % t.cols());
            let x0 = t.get(r, c);
            work.weights.get_mut(id).expect("cloned").set(r, c, x0 + FD_STEP);
            let up = eval(&work)?;
            work.weights.get_mut(id).expect("cloned").set(r, c, x0 - FD_STEP);
            let down = eval(&work)?;
            work.weights.get_mut(id).expect("cloned").set(r, c, x0);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let a = pg[id].scale(corrupt);
        worst = worst.max(relative_error(a.data(), &numeric));
    }
    for (edge, a) in &state.alphas {
        let mut numeric = vec![0.0; a.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            work.alphas.get_mut(edge).expect("cloned")[k] = a[k] + FD_STEP;
            let up = eval(&work)?;
            work.alphas.get_mut(edge).expect("cloned")[k] = a[k] - FD_STEP;
            let down = eval(&work)?;
            work.alphas.get_mut(edge).expect("cloned")[k] = a[k];
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let an: Vec<f64> = ag[edge].iter().map(|v| v * corrupt).collect();
        worst = worst.max(relative_error(&an, &numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

fn normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn primitive_graph(name: &str) -> (Vec<(usize, usize)>, Box<GraphFn<'static>>) {
    // A fixed random projection keeps non-scalar outputs from collapsing to a
    // plain sum, which would hide transposition bugs.
    fn project(tape: &mut Tape, v: Var) -> Result<Var> {
        let (r, c) = tape.value(v).shape();
        let w = tape.constant(Tensor::from_fn(r, c, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.55));
        let p = tape.hadamard(v, w)?;
        Ok(tape.sum(p)?)
    }
    type B = Box<GraphFn<'static>>;
    let (shapes, f): (Vec<(usize, usize)>, B) = match name {
        "matmul" => (vec![(3, 4), (4, 2)], Box::new(|t, v| {
            let m = t.matmul(v[0], v[1])?;
            project(t, m)
        })),
        "add" => (vec![(2, 3), (2, 3)], Box::new(|t, v| {
            let m = t.add(v[0], v[1])?;
            project(t, m)
        })),
        "sub" => (vec![(2, 3), (2, 3)], Box::new(|t, v| {
            let m = t.sub(v[0], v[1])?;
            project(t, m)
        })),
        "hadamard" => (vec![(2, 3), (2, 3)], Box::new(|t, v| {
            let m = t.hadamard(v[0], v[1])?;
            project(t, m)
        })),
        "scale" => (vec![(2, 3)], Box::new(|t, v| {
            let m = t.scale(v[0], -1.7)?;
            project(t, m)
        })),
        "add_row" => (vec![(3, 4), (1, 4)], Box::new(|t, v| {
            let m = t.add_row(v[0], v[1])?;
            project(t, m)
        })),
        "sigmoid" => (vec![(2, 3)], Box::new(|t, v| {
            let m = t.sigmoid(v[0])?;
            project(t, m)
        })),
        "tanh" => (vec![(2, 3)], Box::new(|t, v| {
            let m = t.tanh(v[0])?;
            project(t, m)
        })),
        "relu" => (vec![(2, 3)], Box::new(|t, v| {
            let m = t.relu(v[0])?;
            project(t, m)
        })),
        "concat_cols" => (vec![(2, 3), (2, 2)], Box::new(|t, v| {
            let m = t.concat_cols(v[0], v[1])?;
            project(t, m)
        })),
        "softmax" => (vec![(1, 5)], Box::new(|t, v| {
            let m = t.softmax(v[0])?;
            project(t, m)
        })),
        "mix" => (vec![(1, 3), (2, 2), (2, 2), (2, 2)], Box::new(|t, v| {
            let w = t.mixture_weights(v[0], &[0, 1, 0])?;
            let m = t.mix(&[(w, 0, v[1]), (w, 1, v[2]), (w, 2, v[3])])?;
            project(t, m)
        })),
        "mean" => (vec![(3, 2)], Box::new(|t, v| {
            let s = t.sigmoid(v[0])?;
            Ok(t.mean(s)?)
        })),
        "mse" => (vec![(3, 2), (3, 2)], Box::new(|t, v| Ok(t.mse(v[0], v[1])?))),
        "cross_entropy" => (vec![(3, 4)], Box::new(|t, v| Ok(t.cross_entropy(v[0], &[2, 0, 3])?))),
        "embed" => (vec![(4, 3)], Box::new(|t, v| {
            let m = t.embed(v[0], &[1, 3, 1])?;
            project(t, m)
        })),
        other => panic!("unknown primitive {other}"),
    };
    (shapes, f)
}

pub const PRIMITIVES: [&str; 16] = [
    "matmul", "add", "sub", "hadamard", "scale", "add_row", "sigmoid", "tanh", "relu",
    "concat_cols", "softmax", "mix", "mean", "mse", "cross_entropy", "embed",
];

/// Random composition of smooth primitives on four `2 x 2` leaves, `depth` ops deep.
pub fn random_graph_check(seed: u64, depth: usize, corrupt: f64) -> Result<f64> {
    let mut rng = stream(seed, "gradcheck/graph", 0);
    let inputs: Vec<Tensor> = (0..4).map(|_| normal(&mut rng, 2, 2).scale(0.5)).collect();
    let plan: Vec<(u8, usize, usize)> = (0..depth)
        .map(|_| (rng.random_range(0..6u8), rng.random_range(0..64), rng.random_range(0..64)))
        .collect();
    let build = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut pool: Vec<Var> = v.to_vec();
        for &(op, i, j) in &plan {
            let (a, b) = (pool[i % pool.len()], pool[j % pool.len()]);
            let next = match op {
                0 => t.add(a, b)?,
                1 => t.hadamard(a, b)?,
                2 => t.tanh(a)?,
                3 => t.sigmoid(a)?,
                4 => {
                    let m = t.matmul(a, b)?;
                    t.scale(m, 0.5)?
                }
                _ => t.sub(a, b)?,
            };
            pool.push(next);
        }
        let last = *pool.last().expect("non-empty pool");
        let s = t.sigmoid(last)?;
        Ok(t.sum(s)?)
    };
    check_graph(&inputs, &build, corrupt)
}

/// Sum over steps of the MSE between `h_t` and a fixed random target.
fn unrolled_check(cell: &Cell, seed: u64, steps: usize, corrupt: f64) -> Result<f64> {
    let mut state = cell.init_state(seed);
    let mut rng = stream(seed, "gradcheck/cell", 0);
    for a in state.alphas.values_mut() {
        for v in a.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * 0.5;
        }
    }
    let batch = 2;
    let xs: Vec<Tensor> = (0..steps).map(|_| normal(&mut rng, batch, cell.n_x())).collect();
    let target = normal(&mut rng, batch, cell.n_h()).scale(0.5);
    let loss = |tape: &mut Tape, b: &crate::cells::Bindings| -> Result<Var> {
        let xv: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let h0 = cell.zero_hidden(tape, batch);
        let hs = cell.unroll(tape, b, &xv, h0, None)?;
        let tv = tape.constant(target.clone());
        let mut total = tape.mse(hs[0], tv)?;
        for &h in &hs[1..] {
            let l = tape.mse(h, tv)?;
            total = tape.add(total, l)?;
        }
        Ok(total)
    };
    check_state(cell, &state, &loss, corrupt)
}

/// Cells covered by the standard suite, with small dimensions.
pub fn suite_cells() -> Vec<(String, Cell)> {
    let mut out = Vec::new();
    for backbone in [Backbone::TwoToOne, Backbone::Darts] {
        let spec = CellSpec::new(backbone, 3, 3, 3).expect("valid dims");
        out.push((format!("{backbone}_unrolled"), Cell::Searched(spec)));
    }
    for kind in [BaselineKind::Rnn, BaselineKind::Gru, BaselineKind::Lstm] {
        out.push((format!("{kind}_unrolled"), Cell::Baseline { kind, n_x: 3, n_h: 3 }));
    }
    out
}

/// Runs every primitive, random-graph and unrolled-cell check over `seeds`
/// seeds. `fault` names one check whose analytic gradient is corrupted.
pub fn standard_suite(seeds: usize, steps: usize, fault: Option<&str>) -> Result<Vec<CheckResult>> {
    if seeds == 0 {
        return Err(Error::Config("gradcheck needs at least one seed".into()));
    }
    let corrupt_for = |name: &str| if fault == Some(name) { 1.01 } else { 1.0 };
    let mut results = Vec::new();
    for name in PRIMITIVES {
        let (shapes, build) = primitive_graph(name);
        let mut worst: f64 = 0.0;
        for s in 0..seeds as u64 {
            let mut rng = stream(s, "gradcheck/primitive", 0);
            let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| normal(&mut rng, r, c)).collect();
            worst = worst.max(check_graph(&inputs, &*build, corrupt_for(name))?);
        }
        results.push(CheckResult { name: name.into(), seeds, max_rel_err: worst, tolerance: TOLERANCE });
    }
    let mut worst: f64 = 0.0;
    for s in 0..seeds as u64 {
        worst = worst.max(random_graph_check(s, 20, corrupt_for("random_graph"))?);
    }
    results.push(CheckResult { name: "random_graph".into(), seeds, max_rel_err: worst, tolerance: TOLERANCE });
    for (name, cell) in suite_cells() {
        let mut worst: f64 = 0.0;
        for s in 0..seeds as u64 {
            worst = worst.max(unrolled_check(&cell, s, steps, corrupt_for(&name))?);
        }
        results.push(CheckResult { name, seeds, max_rel_err: worst, tolerance: TOLERANCE });
    }
    Ok(results)
}

/// Max relative error per named check, for reports.
pub fn summarize(results: &[CheckResult]) -> BTreeMap<String, f64> {
    results.iter().map(|r| (r.name.clone(), r.max_rel_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
        assert!(relative_error(&[0.0], &[1e-14]) < 1e-12);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (shapes, build) = primitive_graph("sigmoid");
        let mut rng = stream(0, "t", 0);
        let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| normal(&mut rng, r, c)).collect();
        assert!(check_graph(&inputs, &*build, 1.0).unwrap() < TOLERANCE);
        assert!(check_graph(&inputs, &*build, 1.01).unwrap() > TOLERANCE);
    }
}
