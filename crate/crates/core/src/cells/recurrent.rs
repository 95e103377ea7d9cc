use super::baseline::BaselineKind;
use super::forward::{cell_step, Bindings, Capture, GradMode};
use super::spec::CellSpec;
use super::state::ModelState;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Any recurrent cell the harnesses can train.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Searched(CellSpec),
    Baseline { kind: BaselineKind, n_x: usize, n_h: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct Hidden {
    pub h: Var,
    pub c: Option<Var>,
}

impl Cell {
    pub fn n_x(&self) -> usize {
        match self {
            Cell::Searched(s) => s.n_x,
            Cell::Baseline { n_x, .. } => *n_x,
        }
    }

    pub fn n_h(&self) -> usize {
        match self {
            Cell::Searched(s) => s.n_h,
            Cell::Baseline { n_h, .. } => *n_h,
        }
    }

    pub fn spec(&self) -> Option<&CellSpec> {
        match self {
            Cell::Searched(s) => Some(s),
            Cell::Baseline { .. } => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Cell::Searched(s) => s.backbone.to_string(),
            Cell::Baseline { kind, .. } => kind.to_string(),
        }
    }

    /// Adds this cell's fresh tensors (and logits) to `state`.
    pub fn init_into(&self, state: &mut ModelState) {
        match self {
            Cell::Searched(spec) => state.fill_missing(spec),
            Cell::Baseline { kind, n_x, n_h } => {
                for (id, shape) in kind.param_shapes(*n_x, *n_h) {
                    state.insert_standard(id, shape, *n_h);
                }
            }
        }
    }

    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut state = ModelState::empty(seed);
        self.init_into(&mut state);
        state
    }

    pub fn bind(&self, tape: &mut Tape, state: &ModelState, mode: GradMode) -> Result<Bindings> {
        Bindings::bind(tape, self.spec(), state, mode)
    }

    /// `h_0 = 0` (and `c_0 = 0`).
    pub fn zero_hidden(&self, tape: &mut Tape, batch: usize) -> Hidden {
        let h = tape.constant(Tensor::zeros(batch, self.n_h()));
        let c = matches!(self, Cell::Baseline { kind: BaselineKind::Lstm, .. })
            .then(|| tape.constant(Tensor::zeros(batch, self.n_h())));
        Hidden { h, c }
    }

    pub fn step(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: Var,
        hidden: Hidden,
        capture: Option<&mut Capture>,
    ) -> Result<Hidden> {
        match self {
            Cell::Searched(spec) => Ok(Hidden {
                h: cell_step(tape, spec, b, x, hidden.h, capture)?,
                c: None,
            }),
            Cell::Baseline { kind, .. } => {
                let (h, c) = kind.step(tape, b, x, hidden.h, hidden.c)?;
                Ok(Hidden { h, c })
            }
        }
    }

    /// Threads the hidden state through `xs`, returning every `h_t`.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        xs: &[Var],
        h0: Hidden,
        mut capture: Option<&mut Capture>,
    ) -> Result<Vec<Var>> {
        if xs.is_empty() {
            return Err(Error::Precondition("unroll over an empty sequence".into()));
        }
        let mut hidden = h0;
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            hidden = self.step(tape, b, x, hidden, capture.as_deref_mut())?;
            out.push(hidden.h);
        }
        Ok(out)
    }
}
