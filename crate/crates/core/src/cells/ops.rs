use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Fully connected DAG of single-input mixed operations.
    Darts,
    /// Chain of nodes, each consuming `(x_t, previous node output)`.
    TwoToOne,
}

impl Backbone {
    /// Candidate operations, in canonical order, for a fresh edge.
    pub fn op_set(self) -> &'static [OpKind] {
        match self {
            Backbone::Darts => &DARTS_OPS,
            Backbone::TwoToOne => &TWO_TO_ONE_OPS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Darts => "darts",
            Backbone::TwoToOne => "two_to_one",
        }
    }
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DARTS_OPS: [OpKind; 5] = [
    OpKind::DartsTanh,
    OpKind::DartsRelu,
    OpKind::DartsSigmoid,
    OpKind::DartsIdentity,
    OpKind::DartsZero,
];

pub const TWO_TO_ONE_OPS: [OpKind; 5] = [
    OpKind::Tt1Sigmoid,
    OpKind::Tt1Tanh,
    OpKind::Tt1Relu,
    OpKind::Tt1Sum,
    OpKind::Tt1Prod,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    DartsTanh,
    DartsRelu,
    DartsSigmoid,
    DartsIdentity,
    DartsZero,
    #[serde(rename = "tt1_sigmoid")]
    Tt1Sigmoid,
    #[serde(rename = "tt1_tanh")]
    Tt1Tanh,
    #[serde(rename = "tt1_relu")]
    Tt1Relu,
    #[serde(rename = "tt1_sum")]
    Tt1Sum,
    #[serde(rename = "tt1_prod")]
    Tt1Prod,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Second derivative; relu's is zero almost everywhere.
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = self.apply(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu => 0.0,
        }
    }
}

impl OpKind {
    pub fn backbone(self) -> Backbone {
        match self {
            OpKind::DartsTanh
            | OpKind::DartsRelu
            | OpKind::DartsSigmoid
            | OpKind::DartsIdentity
            | OpKind::DartsZero => Backbone::Darts,
            _ => Backbone::TwoToOne,
        }
    }

    pub fn activation(self) -> Option<Activation> {
        match self {
            OpKind::DartsSigmoid | OpKind::Tt1Sigmoid => Some(Activation::Sigmoid),
            OpKind::DartsTanh | OpKind::Tt1Tanh => Some(Activation::Tanh),
            OpKind::DartsRelu | OpKind::Tt1Relu => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            OpKind::DartsTanh => "darts_tanh",
            OpKind::DartsRelu => "darts_relu",
            OpKind::DartsSigmoid => "darts_sigmoid",
            OpKind::DartsIdentity => "darts_identity",
            OpKind::DartsZero => "darts_zero",
            OpKind::Tt1Sigmoid => "tt1_sigmoid",
            OpKind::Tt1Tanh => "tt1_tanh",
            OpKind::Tt1Relu => "tt1_relu",
            OpKind::Tt1Sum => "tt1_sum",
            OpKind::Tt1Prod => "tt1_prod",
        }
    }

    /// Shapes of the op's parameter tensors given the edge input width.
    ///
    /// Two-to-One activations: `W_xh (n_x x n_h)`, `W_hh (n_h x n_h)`, `b (1 x n_h)`;
    /// sum and product: a single `W_xh`. DARTS activations: one bias-free
    /// `W (in x n_h)`; identity and zero carry no parameters.
    pub fn param_shapes(self, n_x: usize, n_h: usize, darts_in: usize) -> Vec<(usize, usize)> {
        match self {
            OpKind::Tt1Sigmoid | OpKind::Tt1Tanh | OpKind::Tt1Relu => {
                vec![(n_x, n_h), (n_h, n_h), (1, n_h)]
            }
            OpKind::Tt1Sum | OpKind::Tt1Prod => vec![(n_x, n_h)],
            OpKind::DartsTanh | OpKind::DartsRelu | OpKind::DartsSigmoid => vec![(darts_in, n_h)],
            OpKind::DartsIdentity | OpKind::DartsZero => vec![],
        }
    }
}

impl std::fmt::Display for OpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}
