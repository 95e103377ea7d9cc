//! Cell architectures: the DARTS and Two-to-One backbones with mixed edges,
//! and the RNN/GRU/LSTM baselines.

pub mod baseline;
pub mod forward;
pub mod io;
pub mod ops;
pub mod recurrent;
pub mod spec;
pub mod state;

pub use baseline::BaselineKind;
pub use forward::{
    cell_step, evaluate_cell, forward_darts, forward_two_to_one, Bindings, Capture, CaptureRecord,
    CaptureTarget, GradMode,
};
pub use ops::{Activation, Backbone, OpKind, DARTS_OPS, TWO_TO_ONE_OPS};
pub use recurrent::{Cell, Hidden};
pub use spec::{
    CellNode, CellSpec, EdgeId, EdgeSource, IdAlloc, MixedEdge, NodeId, OpInstance, OutputRule,
    ParamId, SpecDelta,
};
pub use state::{invert_softmax, standard_init, ModelState, LOG_ZERO_OFFSET};
