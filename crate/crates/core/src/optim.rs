//! Base optimizers (SGD with momentum, Adam) and the SAM/ASAM two-step
//! wrappers.
//!
//! One update: compute the batch gradient at `w`, ascend to the approximate
//! worst-case perturbation `eps` inside the (possibly normalized) ball,
//! re-evaluate the gradient at `w + eps`, then feed `grad + lambda·w` to the
//! base optimizer. The perturbation itself is never persisted.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::models::ParameterVector;
use crate::normops::{NormalizationOperator, PNorm, PerturbationConfig};
use crate::scalar::{cast, Scalar};
use crate::vecops::{l2_norm, sign};

/// Gradient norms below this are treated as zero; the ascent direction would
/// be arbitrary, so the perturbation is defined to vanish.
const ZERO_GRAD_TOL: f64 = 1e-12;

/// A differentiable loss bound to whatever data it needs.
pub trait Objective<S: Scalar> {
    fn loss(&self, w: &ParameterVector<S>) -> Result<S>;
    fn loss_and_grad(&self, w: &ParameterVector<S>) -> Result<(S, Vec<S>)>;
}

/// An objective averaging over samples that can be re-bound to sub-ranges,
/// for the m-sharpness protocol.
pub trait ChunkedObjective<S: Scalar>: Objective<S> {
    type Chunk: Objective<S>;

    fn num_samples(&self) -> usize;
    fn chunk(&self, range: Range<usize>) -> Result<Self::Chunk>;
}

/// Consecutive chunk boundaries of size `m` (final chunk possibly smaller).
pub(crate) fn chunk_ranges(n: usize, m: usize) -> Result<Vec<Range<usize>>> {
    if m == 0 {
        return Err(Error::invalid("chunk size m must be positive"));
    }
    if n == 0 {
        return Err(Error::invalid("cannot chunk an empty batch"));
    }
    let mut out = Vec::with_capacity(n.div_ceil(m));
    let mut start = 0;
    while start < n {
        let end = (start + m).min(n);
        out.push(start..end);
        start = end;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ascent rules
// ---------------------------------------------------------------------------

/// SAM ascent direction `eps = rho · g / ‖g‖₂`, zero when the gradient
/// (numerically) vanishes.
pub fn sam_ascent<S: Scalar>(grad: &[S], rho: S) -> Vec<S> {
    let norm = l2_norm(grad);
    if norm < cast::<S>(ZERO_GRAD_TOL) {
        return vec![S::zero(); grad.len()];
    }
    let scale = rho / norm;
    grad.iter().map(|&g| scale * g).collect()
}

/// ASAM ascent for a prebuilt operator:
/// `p = 2`: `eps = rho · T² g / ‖T g‖₂`; `p = inf`: `eps = rho · T sign(g)`.
pub fn ascent_with_operator<S: Scalar>(
    op: &NormalizationOperator<S>,
    grad: &[S],
    rho: S,
    p: PNorm,
) -> Vec<S> {
    let scales = op.scales();
    match p {
        PNorm::Two => {
            let tg: Vec<S> = scales.iter().zip(grad).map(|(&s, &g)| s * g).collect();
            let norm = l2_norm(&tg);
            if norm < cast::<S>(ZERO_GRAD_TOL) {
                return vec![S::zero(); grad.len()];
            }
            let k = rho / norm;
            scales.iter().zip(&tg).map(|(&s, &t)| k * s * t).collect()
        }
        PNorm::Inf => scales
            .iter()
            .zip(grad)
            .map(|(&s, &g)| rho * s * sign(g))
            .collect(),
    }
}

/// ASAM ascent direction, building the operator from the configuration.
pub fn asam_ascent<S: Scalar>(
    w: &ParameterVector<S>,
    grad: &[S],
    cfg: &PerturbationConfig<S>,
) -> Result<Vec<S>> {
    if grad.len() != w.k() {
        return Err(Error::invalid("gradient length does not match parameters"));
    }
    Ok(ascent_with_operator(&cfg.operator(w), grad, cfg.rho, cfg.p))
}

// ---------------------------------------------------------------------------
// Base optimizers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub enum BaseOptimizer<S> {
    Sgd { momentum: S },
    Adam { beta1: S, beta2: S, epsilon: S },
}

impl<S: Scalar> BaseOptimizer<S> {
    pub fn sgd(momentum: S) -> Self {
        BaseOptimizer::Sgd { momentum }
    }

    /// Adam with the library defaults beta1 = 0.9, beta2 = 0.98.
    pub fn adam() -> Self {
        BaseOptimizer::Adam {
            beta1: cast(0.9),
            beta2: cast(0.98),
            epsilon: cast(1e-8),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum LrSchedule<S> {
    Constant(S),
    /// Cosine decay from `initial` to 0 over `total_steps` updates.
    Cosine { initial: S, total_steps: u64 },
}

impl<S: Scalar> LrSchedule<S> {
    pub fn at(&self, t: u64) -> S {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Cosine { initial, total_steps } => {
                let frac = if total_steps == 0 {
                    1.0
                } else {
                    t.min(total_steps) as f64 / total_steps as f64
                };
                initial * cast::<S>(0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            }
        }
    }
}

/// Mutable optimizer state: step counter, buffers, schedule and weight
/// decay. `t` increments by exactly one per update.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    base: BaseOptimizer<S>,
    schedule: LrSchedule<S>,
    weight_decay: S,
    t: u64,
    momentum_buf: Vec<S>,
    m_buf: Vec<S>,
    v_buf: Vec<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(k: usize, base: BaseOptimizer<S>, schedule: LrSchedule<S>, weight_decay: S) -> Self {
        let (momentum_buf, m_buf, v_buf) = match base {
            BaseOptimizer::Sgd { .. } => (vec![S::zero(); k], Vec::new(), Vec::new()),
            BaseOptimizer::Adam { .. } => (Vec::new(), vec![S::zero(); k], vec![S::zero(); k]),
        };
        OptimizerState { base, schedule, weight_decay, t: 0, momentum_buf, m_buf, v_buf }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn weight_decay(&self) -> S {
        self.weight_decay
    }

    pub fn current_lr(&self) -> S {
        self.schedule.at(self.t)
    }

    /// Applies one base step using `grad + weight_decay·w` as the effective
    /// gradient (the same assembly the two-step updates use). For callers
    /// that compute the gradient themselves, e.g. the m-sharpness loop.
    pub fn apply_with_weight_decay(&mut self, w: &mut ParameterVector<S>, grad: &[S]) {
        let g_eff = effective_gradient(grad, w.values(), self.weight_decay);
        self.apply(w.values_mut(), &g_eff);
    }

    /// Applies one base-optimizer update with an already-assembled effective
    /// gradient, advancing the step counter.
    fn apply(&mut self, w: &mut [S], g_eff: &[S]) {
        let lr = self.schedule.at(self.t);
        match self.base {
            BaseOptimizer::Sgd { momentum } => {
                for i in 0..w.len() {
                    self.momentum_buf[i] = momentum * self.momentum_buf[i] + g_eff[i];
                    w[i] -= lr * self.momentum_buf[i];
                }
            }
            BaseOptimizer::Adam { beta1, beta2, epsilon } => {
                let t1 = cast::<S>((self.t + 1) as f64);
                let bc1 = S::one() - beta1.powf(t1);
                let bc2 = S::one() - beta2.powf(t1);
                for i in 0..w.len() {
                    self.m_buf[i] = beta1 * self.m_buf[i] + (S::one() - beta1) * g_eff[i];
                    self.v_buf[i] = beta2 * self.v_buf[i] + (S::one() - beta2) * g_eff[i] * g_eff[i];
                    let m_hat = self.m_buf[i] / bc1;
                    let v_hat = self.v_buf[i] / bc2;
                    w[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        self.t += 1;
    }
}

/// Info the training loop logs per step.
#[derive(Clone, Copy, Debug)]
pub struct StepInfo<S> {
    /// Loss at the unperturbed iterate.
    pub loss: S,
    /// Learning rate that was applied.
    pub lr: S,
}

fn effective_gradient<S: Scalar>(grad: &[S], w: &[S], weight_decay: S) -> Vec<S> {
    grad.iter().zip(w).map(|(&g, &wi)| g + weight_decay * wi).collect()
}

fn check_loss<S: Scalar>(loss: S, step: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step })
    }
}

/// Plain base-optimizer step (no ascent): one gradient evaluation.
pub fn base_update<S: Scalar>(
    w: &mut ParameterVector<S>,
    state: &mut OptimizerState<S>,
    obj: &impl Objective<S>,
) -> Result<StepInfo<S>> {
    let (loss, grad) = obj.loss_and_grad(w)?;
    check_loss(loss, state.t)?;
    let lr = state.schedule.at(state.t);
    let g_eff = effective_gradient(&grad, w.values(), state.weight_decay);
    state.apply(w.values_mut(), &g_eff);
    Ok(StepInfo { loss, lr })
}

/// SAM/ASAM two-step update: ascend with the configured rule, descend with
/// the gradient taken at the perturbed point plus `lambda·w`.
pub fn two_step_update<S: Scalar>(
    w: &mut ParameterVector<S>,
    state: &mut OptimizerState<S>,
    obj: &impl Objective<S>,
    cfg: &PerturbationConfig<S>,
    use_asam: bool,
) -> Result<StepInfo<S>> {
    let (loss, grad) = obj.loss_and_grad(w)?;
    check_loss(loss, state.t)?;
    let eps = if use_asam {
        asam_ascent(w, &grad, cfg)?
    } else {
        sam_ascent(&grad, cfg.rho)
    };
    let perturbed = w.perturbed(&eps)?;
    let (loss_p, grad_p) = obj.loss_and_grad(&perturbed)?;
    check_loss(loss_p, state.t)?;
    let lr = state.schedule.at(state.t);
    let g_eff = effective_gradient(&grad_p, w.values(), state.weight_decay);
    state.apply(w.values_mut(), &g_eff);
    Ok(StepInfo { loss, lr })
}

/// m-sharpness gradient: each chunk of `m` samples computes its own
/// perturbation and perturbed gradient; the chunk gradients are averaged.
pub fn m_sharpness_grad<S: Scalar>(
    w: &ParameterVector<S>,
    obj: &impl ChunkedObjective<S>,
    m: usize,
    cfg: &PerturbationConfig<S>,
    use_asam: bool,
) -> Result<Vec<S>> {
    let ranges = chunk_ranges(obj.num_samples(), m)?;
    let mut acc = vec![S::zero(); w.k()];
    let n_chunks = cast::<S>(ranges.len() as f64);
    for range in ranges {
        let chunk = obj.chunk(range)?;
        let (_, grad) = chunk.loss_and_grad(w)?;
        let eps = if use_asam {
            asam_ascent(w, &grad, cfg)?
        } else {
            sam_ascent(&grad, cfg.rho)
        };
        let perturbed = w.perturbed(&eps)?;
        let (loss_p, grad_p) = chunk.loss_and_grad(&perturbed)?;
        check_loss(loss_p, 0)?;
        for (a, g) in acc.iter_mut().zip(&grad_p) {
            *a += *g;
        }
    }
    for a in acc.iter_mut() {
        *a /= n_chunks;
    }
    Ok(acc)
}
