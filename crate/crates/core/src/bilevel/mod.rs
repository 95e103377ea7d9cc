//! Alternating architecture/weight optimization with first- or second-order
//! (finite-difference) hypergradients.

mod adam;
mod stage;

pub use adam::Adam;
pub use stage::{evaluate, run_epoch, train_stage, EarlyStop, EpochStats, StageOptions, StageOutcome};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cells::{EdgeId, GradMode, ModelState, ParamId};
use crate::tensor::{Tensor, TensorError};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    #[default]
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BilevelConfig {
    /// Virtual step size; `None` means "use `lr_w`".
    pub xi: Option<f64>,
    pub eps_scale: f64,
    pub order: Order,
    pub lr_w: f64,
    pub lr_alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global L2 norm cap applied to weight gradients and to the
    /// architecture gradient before each Adam step; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            xi: None,
            eps_scale: 0.01,
            order: Order::Second,
            lr_w: 1e-3,
            lr_alpha: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(0.25),
        }
    }
}

impl BilevelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("bilevel.{name} must be positive, got {v}")))
            }
        };
        positive("lr_w", self.lr_w)?;
        positive("lr_alpha", self.lr_alpha)?;
        positive("eps_scale", self.eps_scale)?;
        if let Some(c) = self.clip_norm {
            positive("clip_norm", c)?;
        }
        positive("adam_eps", self.adam_eps)?;
        if let Some(xi) = self.xi {
            if !(xi >= 0.0 && xi.is_finite()) {
                return Err(Error::Config(format!("bilevel.xi must be >= 0, got {xi}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("bilevel.{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// Effective virtual step: 0 under first order.
    pub fn effective_xi(&self) -> f64 {
        match self.order {
            Order::First => 0.0,
            Order::Second => self.xi.unwrap_or(self.lr_w),
        }
    }
}

/// Gradients keyed like a [`ModelState`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub weights: BTreeMap<ParamId, Tensor>,
    pub alphas: BTreeMap<EdgeId, Vec<f64>>,
}

impl ParamGrads {
    pub fn weight_norm(&self) -> f64 {
        self.weights
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        for (id, g) in &self.weights {
            if !g.is_finite() {
                return Err(Error::numeric(format!("gradient of {id}"), TensorError::NonFinite { op: "backward" }));
            }
        }
        for (id, g) in &self.alphas {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("gradient of alphas {id}"), TensorError::NonFinite { op: "backward" }));
            }
        }
        Ok(())
    }
}

/// A differentiable loss over a [`ModelState`], evaluated per batch.
pub trait Objective {
    type Batch;

    /// Loss and the gradients selected by `mode`.
    fn loss_and_grad(&self, state: &ModelState, batch: &Self::Batch, mode: GradMode) -> Result<(f64, ParamGrads)>;

    fn loss(&self, state: &ModelState, batch: &Self::Batch) -> Result<f64> {
        Ok(self.loss_and_grad(state, batch, GradMode::NONE)?.0)
    }

    /// Relative weight of the batch when averaging losses (its sample count).
    fn batch_weight(&self, batch: &Self::Batch) -> f64;
}

/// Adam moments for weights and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub weights: Adam<ParamId>,
    pub alphas: Adam<EdgeId>,
}

impl OptimizerState {
    pub fn new(cfg: &BilevelConfig) -> Self {
        OptimizerState {
            weights: Adam::new(cfg.lr_w, cfg.beta1, cfg.beta2, cfg.adam_eps),
            alphas: Adam::new(cfg.lr_alpha, cfg.beta1, cfg.beta2, cfg.adam_eps),
        }
    }

    /// Drops moments of tensors and edges the state no longer has.
    pub fn retain_for(&mut self, state: &ModelState) {
        self.weights.retain(|k| state.weights.contains_key(k));
        self.alphas.retain(|k| state.alphas.contains_key(k));
    }
}

fn clip_scale(sq_norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
        _ => 1.0,
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `clip`.
pub fn clip_grads(grads: &mut ParamGrads, clip: Option<f64>) {
    let k = clip_scale(grads.weight_norm().powi(2), clip);
    if k < 1.0 {
        for g in grads.weights.values_mut() {
            *g = g.scale(k);
        }
    }
    clip_alpha_grads(&mut grads.alphas, clip);
}

fn clip_alpha_grads(grads: &mut BTreeMap<EdgeId, Vec<f64>>, clip: Option<f64>) {
    let sq: f64 = grads.values().flatten().map(|v| v * v).sum();
    let k = clip_scale(sq, clip);
    if k < 1.0 {
        grads.values_mut().flatten().for_each(|v| *v *= k);
    }
}

fn apply_weight_grads(state: &mut ModelState, opt: &mut OptimizerState, grads: &ParamGrads) -> Result<()> {
    for (id, g) in &grads.weights {
        let p = state
            .weights
            .get_mut(id)
            .ok_or_else(|| Error::Integrity(format!("gradient for unknown parameter {id}")))?;
        if p.shape() != g.shape() {
            return Err(TensorError::Dimension { op: "weight_step", lhs: p.shape(), rhs: g.shape() }.into());
        }
        opt.weights.step(id, p.data_mut(), g.data());
        if !p.is_finite() {
            return Err(Error::numeric(format!("update of {id}"), TensorError::NonFinite { op: "adam" }));
        }
    }
    Ok(())
}

fn apply_alpha_grads(state: &mut ModelState, opt: &mut OptimizerState, grads: &BTreeMap<EdgeId, Vec<f64>>) -> Result<()> {
    for (id, g) in grads {
        let a = state
            .alphas
            .get_mut(id)
            .ok_or_else(|| Error::Integrity(format!("gradient for unknown edge {id}")))?;
        opt.alphas.step(id, a, g);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("update of alphas {id}"), TensorError::NonFinite { op: "adam" }));
        }
    }
    Ok(())
}

/// `theta <- Adam(theta, grad_theta L_train)`; logits untouched. Returns the
/// pre-update batch loss.
pub fn weight_step<O: Objective>(
    obj: &O,
    state: &mut ModelState,
    opt: &mut OptimizerState,
    batch: &O::Batch,
    clip: Option<f64>,
) -> Result<f64> {
    let (loss, mut grads) = obj.loss_and_grad(state, batch, GradMode::WEIGHTS)?;
    grads.check_finite()?;
    clip_grads(&mut grads, clip);
    apply_weight_grads(state, opt, &grads)?;
    Ok(loss)
}

/// `alpha <- Adam(alpha, grad_alpha L_val(w, alpha))`; weights untouched.
pub fn arch_step_first_order<O: Objective>(
    obj: &O,
    state: &mut ModelState,
    opt: &mut OptimizerState,
    val: &O::Batch,
    clip: Option<f64>,
) -> Result<f64> {
    let (loss, mut grads) = obj.loss_and_grad(state, val, GradMode::ALPHAS)?;
    grads.check_finite()?;
    clip_grads(&mut grads, clip);
    apply_alpha_grads(state, opt, &grads.alphas)?;
    Ok(loss)
}

/// Architecture gradient through one virtual weight step `w' = w - xi grad_w L_train`.
/// The mixed second-derivative term is a central difference of
/// `grad_alpha L_train` at `w +- eps g`, `eps = eps_scale / |g|`,
/// `g = grad_w' L_val(w', alpha)`. With `xi = 0` this is exactly the
/// first-order gradient; with `g = 0` it falls back to the first term.
pub fn hypergradient<O: Objective>(
    obj: &O,
    state: &ModelState,
    train: &O::Batch,
    val: &O::Batch,
    cfg: &BilevelConfig,
) -> Result<BTreeMap<EdgeId, Vec<f64>>> {
    let xi = cfg.effective_xi();
    if xi == 0.0 {
        let (_, g) = obj.loss_and_grad(state, val, GradMode::ALPHAS)?;
        g.check_finite()?;
        return Ok(g.alphas);
    }
    let (_, g_train) = obj.loss_and_grad(state, train, GradMode::WEIGHTS)?;
    g_train.check_finite()?;
    let mut virt = state.clone();
    for (id, g) in &g_train.weights {
        let w = virt.weights.get_mut(id).expect("gradient keys come from the state");
        *w = w.sub(&g.scale(xi))?;
    }
    let (_, g_val) = obj.loss_and_grad(&virt, val, GradMode::ALL)?;
    g_val.check_finite()?;
    let norm = g_val.weight_norm();
    let mut hyper = g_val.alphas.clone();
    if norm == 0.0 {
        return Ok(hyper);
    }
    let eps = cfg.eps_scale / norm;
    let shifted = |sign: f64| -> Result<BTreeMap<EdgeId, Vec<f64>>> {
        let mut s = state.clone();
        for (id, g) in &g_val.weights {
            let w = s.weights.get_mut(id).expect("gradient keys come from the state");
            *w = w.add(&g.scale(sign * eps))?;
        }
        let (_, g) = obj.loss_and_grad(&s, train, GradMode::ALPHAS)?;
        g.check_finite()?;
        Ok(g.alphas)
    };
    let plus = shifted(1.0)?;
    let minus = shifted(-1.0)?;
    for (id, h) in hyper.iter_mut() {
        let (p, m) = (&plus[id], &minus[id]);
        for i in 0..h.len() {
            h[i] -= xi * (p[i] - m[i]) / (2.0 * eps);
        }
    }
    Ok(hyper)
}

pub fn arch_step_second_order<O: Objective>(
    obj: &O,
    state: &mut ModelState,
    opt: &mut OptimizerState,
    train: &O::Batch,
    val: &O::Batch,
    cfg: &BilevelConfig,
) -> Result<()> {
    let mut hyper = hypergradient(obj, state, train, val, cfg)?;
    if hyper.values().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("hypergradient", TensorError::NonFinite { op: "finite_difference" }));
    }
    clip_alpha_grads(&mut hyper, cfg.clip_norm);
    apply_alpha_grads(state, opt, &hyper)
}

/// One architecture update under `cfg.order`.
pub fn arch_step<O: Objective>(
    obj: &O,
    state: &mut ModelState,
    opt: &mut OptimizerState,
    train: &O::Batch,
    val: &O::Batch,
    cfg: &BilevelConfig,
) -> Result<()> {
    match cfg.order {
        Order::First => arch_step_first_order(obj, state, opt, val, cfg.clip_norm).map(|_| ()),
        Order::Second => arch_step_second_order(obj, state, opt, train, val, cfg),
    }
}
