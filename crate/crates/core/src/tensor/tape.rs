//! Wengert-list tape. Nodes are appended in evaluation order, so every
//! operand index is lower than its consumer's and a plain reverse sweep is a
//! reverse topological order.

use smallvec::SmallVec;

use super::{exact_sum, mixture_weights, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Var, Var),
    Softmax(Var),
    /// `sum_i weights_i[index_i] * term_i`
    Mix(Vec<(Var, usize, Var)>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy(Var, Vec<usize>),
    Embed(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dim(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b)
            | Op::AddRow(a, b)
            | Op::Concat(a, b)
            | Op::Mse(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::CrossEntropy(a, _)
            | Op::Embed(a, _) => self.requires_grad(*a),
            Op::Mix(terms) => terms
                .iter()
                .any(|&(w, _, t)| self.requires_grad(w) || self.requires_grad(t)),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.value(a).hadamard(self.value(b))?;
        self.push("hadamard", v, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, TensorError> {
        let v = self.value(a).scale(k);
        self.push("scale", v, Op::Scale(a, k))
    }

    /// `a + 1·bias` where `bias` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(dim("add_row", av, bv));
        }
        let b = bv.data();
        let mut out = av.clone();
        for r in 0..out.rows() {
            let cols = out.cols();
            for (o, &x) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o += x;
            }
        }
        self.push("add_row", out, Op::AddRow(a, bias))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a))
    }

    /// Derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push("relu", v, Op::Relu(a))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(dim("concat_cols", av, bv));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(av.rows() * (ca + cb));
        for r in 0..av.rows() {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let v = Tensor::from_raw(av.rows(), ca + cb, data);
        self.push("concat_cols", v, Op::Concat(a, b))
    }

    /// Softmax of a `1 x k` row, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.mixture_weights(a, &[])
    }

    /// Softmax over `alpha - halvings * ln 2`, see [`super::mixture_weights`].
    pub fn mixture_weights(&mut self, a: Var, halvings: &[u32]) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(TensorError::Dimension {
                op: "softmax",
                lhs: av.shape(),
                rhs: (1, av.cols()),
            });
        }
        let w = mixture_weights(av.data(), halvings)?;
        let v = Tensor::from_raw(1, w.len(), w);
        self.push("softmax", v, Op::Softmax(a))
    }

    /// Weighted mixture `sum_i w_i[k_i] * t_i`, summed exactly per element so
    /// the result is independent of term order and grouping.
    pub fn mix(&mut self, terms: &[(Var, usize, Var)]) -> Result<Var, TensorError> {
        let first = terms
            .first()
            .ok_or_else(|| TensorError::Domain("mixture of zero terms".into()))?;
        let shape = self.value(first.2).shape();
        let mut coeffs = Vec::with_capacity(terms.len());
        for &(w, k, t) in terms {
            let wv = self.value(w);
            if wv.rows() != 1 || k >= wv.cols() {
                return Err(TensorError::Contract(format!(
                    "mixture weight index {k} out of range for {:?}",
                    wv.shape()
                )));
            }
            if self.value(t).shape() != shape {
                return Err(dim("mix", self.value(first.2), self.value(t)));
            }
            coeffs.push(wv.data()[k]);
        }
        let n = shape.0 * shape.1;
        let mut out = Vec::with_capacity(n);
        let mut scratch: SmallVec<[f64; 16]> = SmallVec::new();
        for e in 0..n {
            scratch.clear();
            for (c, &(_, _, t)) in coeffs.iter().zip(terms) {
                scratch.push(c * self.value(t).data()[e]);
            }
            out.push(exact_sum(scratch.iter().copied()));
        }
        let v = Tensor::from_raw(shape.0, shape.1, out);
        self.push("mix", v, Op::Mix(terms.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(TensorError::Domain("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(av.sum() / av.len() as f64);
        self.push("mean", v, Op::Mean(a))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var, TensorError> {
        let (p, t) = (self.value(prediction), self.value(target));
        if p.shape() != t.shape() {
            return Err(dim("mse", p, t));
        }
        if p.is_empty() {
            return Err(TensorError::Domain("mse of empty tensors".into()));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = Tensor::scalar(s / p.len() as f64);
        self.push("mse", v, Op::Mse(prediction, target))
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let z = self.value(logits);
        if z.rows() != targets.len() || z.rows() == 0 {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                lhs: z.shape(),
                rhs: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= z.cols()) {
            return Err(TensorError::Domain(format!(
                "class index {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = z.row_slice(r);
                log_sum_exp(row) - row[t]
            })
            .sum();
        let v = Tensor::scalar(total / targets.len() as f64);
        self.push("cross_entropy", v, Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// Row lookup `table[ids[b]]` for each `b`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(TensorError::Domain(format!(
                "embedding id {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let v = Tensor::from_raw(ids.len(), t.cols(), data);
        self.push("embed", v, Op::Embed(table, ids.to_vec()))
    }

    /// Reverse sweep from a `1 x 1` root. Every node that requires a gradient
    /// and is reachable from `root` receives its total derivative.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.propagate(node, g, lower)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul(&self.value(*b).transpose())?);
                }
                if needs(*b) {
                    acc(*b, self.value(*a).transpose().matmul(g)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if needs(*a) {
                    acc(*a, g.hadamard(self.value(*b))?);
                }
                if needs(*b) {
                    acc(*b, g.hadamard(self.value(*a))?);
                }
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if needs(*b) {
                    let cols = g.cols();
                    let sums = (0..cols)
                        .map(|c| (0..g.rows()).map(|r| g.get(r, c)).sum())
                        .collect();
                    acc(*b, Tensor::from_raw(1, cols, sums));
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g.zip_with(y, "sigmoid'", |g, y| g * y * (1.0 - y))?);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g.zip_with(y, "tanh'", |g, y| g * (1.0 - y * y))?);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_with(x, "relu'", |g, x| if x > 0.0 { g } else { 0.0 })?);
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = g.rows();
                if needs(*a) {
                    acc(*a, Tensor::from_fn(rows, ca, |r, c| g.get(r, c)));
                }
                if needs(*b) {
                    acc(*b, Tensor::from_fn(rows, cb, |r, c| g.get(r, ca + c)));
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let dot: f64 = y.iter().zip(g.data()).map(|(y, g)| y * g).sum();
                let d = y.iter().zip(g.data()).map(|(y, g)| y * (g - dot)).collect();
                acc(*a, Tensor::from_raw(1, y.len(), d));
            }
            Op::Mix(terms) => {
                for &(w, k, t) in terms {
                    let coeff = self.value(w).data()[k];
                    if needs(t) {
                        acc(t, g.scale(coeff));
                    }
                    if needs(w) {
                        let tv = self.value(t);
                        let dw: f64 = g.data().iter().zip(tv.data()).map(|(a, b)| a * b).sum();
                        let mut delta = Tensor::zeros(1, self.value(w).cols());
                        delta.data_mut()[k] = dw;
                        acc(w, delta);
                    }
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let (r, c) = av.shape();
                acc(*a, Tensor::filled(r, c, g.data()[0] / av.len() as f64));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let k = 2.0 * g.data()[0] / pv.len() as f64;
                let d = pv.zip_with(tv, "mse'", |a, b| k * (a - b))?;
                if needs(*t) {
                    acc(*t, d.scale(-1.0));
                }
                acc(*p, d);
            }
            Op::CrossEntropy(z, targets) => {
                let zv = self.value(*z);
                let k = g.data()[0] / targets.len() as f64;
                let mut d = Tensor::zeros(zv.rows(), zv.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let row = zv.row_slice(r);
                    let lse = log_sum_exp(row);
                    for (c, &v) in row.iter().enumerate() {
                        let p = (v - lse).exp();
                        d.set(r, c, k * (p - if c == t { 1.0 } else { 0.0 }));
                    }
                }
                acc(*z, d);
            }
            Op::Embed(table, ids) => {
                let tv = self.value(*table);
                let mut d = Tensor::zeros(tv.rows(), tv.cols());
                let cols = tv.cols();
                for (b, &i) in ids.iter().enumerate() {
                    for c in 0..cols {
                        let cur = d.get(i, c);
                        d.set(i, c, cur + g.get(b, c));
                    }
                }
                acc(*table, d);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn elementwise_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[1.0, 2.0]]));
        let b = tape.constant(t(&[&[3.0, 4.0]]));
        let h = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(h).data(), &[3.0, 8.0]);
        let z = tape.constant(Tensor::zeros(1, 1));
        let s = tape.sigmoid(z).unwrap();
        let th = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        assert_eq!(tape.value(th).data(), &[0.0]);
        let bad = tape.constant(Tensor::zeros(2, 1));
        assert!(matches!(
            tape.add(a, bad),
            Err(TensorError::Dimension { op: "add", .. })
        ));
    }

    #[test]
    fn relu_gradient_convention() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[-1.0, 1.0, 0.0]]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn identity_and_outer_product_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.5), true);
        let one = tape.constant(Tensor::scalar(1.0));
        let y = tape.matmul(x, one).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);

        // d sum(W x) / dW = 1 x^T  (column-vector convention: W is 2x3, x is 3x1)
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_fn(2, 3, |r, c| (r * 3 + c) as f64), true);
        let x = tape.constant(t(&[&[0.5], &[-1.0], &[2.0]]));
        let wx = tape.matmul(w, x).unwrap();
        let s = tape.sum(wx).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn mse_hand_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[0.0, 2.0]]));
        let z = tape.constant(t(&[&[0.0, 0.0]]));
        let l = tape.mse(a, z).unwrap();
        assert_eq!(tape.value(l).data(), &[2.0]);
        let l0 = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(l0).data(), &[0.0]);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(3, 7));
        let l = tape.cross_entropy(z, &[0, 3, 6]).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(1, 2), true);
        assert!(matches!(tape.backward(a), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e200));
        assert!(matches!(
            tape.matmul(a, a),
            Err(TensorError::NonFinite { op: "matmul" })
        ));
    }

    #[test]
    fn shared_operand_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.hadamard(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }
}
