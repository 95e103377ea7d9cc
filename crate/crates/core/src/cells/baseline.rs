//! Textbook RNN, GRU and LSTM cells.

use serde::{Deserialize, Serialize};

use super::forward::Bindings;
use super::spec::ParamId;
use crate::tensor::{Tape, Var};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Rnn,
    Gru,
    Lstm,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Rnn => "rnn",
            BaselineKind::Gru => "gru",
            BaselineKind::Lstm => "lstm",
        }
    }

    fn gate_names(self) -> &'static [&'static str] {
        match self {
            BaselineKind::Rnn => &["h"],
            BaselineKind::Gru => &["z", "r", "n"],
            BaselineKind::Lstm => &["i", "f", "o", "g"],
        }
    }

    pub fn gates(self) -> usize {
        self.gate_names().len()
    }

    pub fn has_cell_state(self) -> bool {
        self == BaselineKind::Lstm
    }

    fn param(self, gate: &str, part: &str) -> ParamId {
        ParamId::aux(format!("{}.{gate}.{part}", self.name()))
    }

    /// Parameter ids and shapes: per gate `w_x (n_x x n_h)`, `w_h (n_h x n_h)`, `b (1 x n_h)`.
    pub fn param_shapes(self, n_x: usize, n_h: usize) -> Vec<(ParamId, (usize, usize))> {
        self.gate_names()
            .iter()
            .flat_map(|g| {
                [
                    (self.param(g, "w_x"), (n_x, n_h)),
                    (self.param(g, "w_h"), (n_h, n_h)),
                    (self.param(g, "b"), (1, n_h)),
                ]
            })
            .collect()
    }

    fn affine(self, tape: &mut Tape, b: &Bindings, gate: &str, x: Var, h: Var) -> Result<Var> {
        let xw = tape.matmul(x, b.param(&self.param(gate, "w_x"))?)?;
        let hw = tape.matmul(h, b.param(&self.param(gate, "w_h"))?)?;
        let s = tape.add(xw, hw)?;
        Ok(tape.add_row(s, b.param(&self.param(gate, "b"))?)?)
    }

    /// One step. Returns `(h_t, c_t)`; `c` is only used by the LSTM.
    pub fn step(
        self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        h: Var,
        c: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        match self {
            BaselineKind::Rnn => {
                let u = self.affine(tape, b, "h", x, h)?;
                Ok((tape.tanh(u)?, None))
            }
            BaselineKind::Gru => {
                let uz = self.affine(tape, b, "z", x, h)?;
                let z = tape.sigmoid(uz)?;
                let ur = self.affine(tape, b, "r", x, h)?;
                let r = tape.sigmoid(ur)?;
                let rh = tape.hadamard(r, h)?;
                let un = self.affine(tape, b, "n", x, rh)?;
                let n = tape.tanh(un)?;
                // (1 - z) * n + z * h
                let d = tape.sub(h, n)?;
                let zd = tape.hadamard(z, d)?;
                Ok((tape.add(n, zd)?, None))
            }
            BaselineKind::Lstm => {
                let c = c.ok_or_else(|| crate::Error::Contract("lstm step needs a cell state".into()))?;
                let ui = self.affine(tape, b, "i", x, h)?;
                let i = tape.sigmoid(ui)?;
                let uf = self.affine(tape, b, "f", x, h)?;
                let f = tape.sigmoid(uf)?;
                let uo = self.affine(tape, b, "o", x, h)?;
                let o = tape.sigmoid(uo)?;
                let ug = self.affine(tape, b, "g", x, h)?;
                let g = tape.tanh(ug)?;
                let fc = tape.hadamard(f, c)?;
                let ig = tape.hadamard(i, g)?;
                let c_next = tape.add(fc, ig)?;
                let tc = tape.tanh(c_next)?;
                Ok((tape.hadamard(o, tc)?, Some(c_next)))
            }
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
