//! Sharpness and adaptive-sharpness estimation.
//!
//! Sharpness is the worst loss increase inside the perturbation ball
//! `‖T⁻¹ eps‖_p ≤ rho` around a parameter vector. The one-step estimate uses
//! the closed-form ascent direction; the multi-step estimate runs projected
//! gradient ascent in the transformed ball and keeps the best loss seen
//! (the unperturbed point is in the feasible set, so multi-step estimates
//! are never negative).

use crate::error::Result;
use crate::models::ParameterVector;
use crate::normops::{PNorm, PerturbationConfig};
use crate::optim::{ascent_with_operator, chunk_ranges, ChunkedObjective, Objective};
use crate::scalar::{cast, Scalar};
use crate::vecops::{l2_norm, linf_norm, sign};

/// How the perturbed maximum was estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    OneStep,
    KStep(usize),
}

/// One sharpness measurement.
#[derive(Clone, Debug)]
pub struct SharpnessReport<S> {
    pub base_loss: S,
    pub perturbed_loss: S,
    /// `perturbed_loss - base_loss`.
    pub sharpness: S,
    pub cfg: PerturbationConfig<S>,
    pub method: Method,
    /// Chunk size of the m-sharpness protocol, `None` for the full batch.
    pub m: Option<usize>,
}

/// Estimates sharpness of `w` on the objective's data.
///
/// `steps == 1` evaluates the loss at the closed-form ascent point.
/// `steps > 1` runs that many normalized ascent steps of length
/// `rho / steps` in the transformed space, rescaling back onto the ball
/// whenever an iterate leaves it.
pub fn estimate_sharpness<S: Scalar>(
    w: &ParameterVector<S>,
    obj: &impl Objective<S>,
    cfg: &PerturbationConfig<S>,
    steps: usize,
) -> Result<SharpnessReport<S>> {
    if steps == 0 {
        return Err(crate::error::Error::invalid("steps must be >= 1"));
    }
    let (base, grad) = obj.loss_and_grad(w)?;
    let op = cfg.operator(w);
    let scales = op.scales().to_vec();

    if steps == 1 {
        let eps = ascent_with_operator(&op, &grad, cfg.rho, cfg.p);
        let perturbed = obj.loss(&w.perturbed(&eps)?)?;
        check_finite(perturbed)?;
        return Ok(SharpnessReport {
            base_loss: base,
            perturbed_loss: perturbed,
            sharpness: perturbed - base,
            cfg: *cfg,
            method: Method::OneStep,
            m: None,
        });
    }

    // Multi-step: work on the transformed coordinates eps_t = T⁻¹·eps, so the
    // feasible set is the plain p-ball of radius rho and no inverse is needed.
    let k = w.k();
    let mut eps_t = transformed_start(&scales, &grad, cfg.rho, cfg.p, k);
    let mut best = base;
    let step_len = cfg.rho / cast::<S>(steps as f64);
    for _ in 0..steps {
        let eps: Vec<S> = scales.iter().zip(&eps_t).map(|(&s, &e)| s * e).collect();
        let (loss, grad_p) = obj.loss_and_grad(&w.perturbed(&eps)?)?;
        check_finite(loss)?;
        if loss > best {
            best = loss;
        }
        // Gradient in the transformed space is T·grad.
        let tg: Vec<S> = scales.iter().zip(&grad_p).map(|(&s, &g)| s * g).collect();
        let norm = l2_norm(&tg);
        if norm < cast::<S>(1e-12) {
            break;
        }
        let scale = step_len / norm;
        for (e, &g) in eps_t.iter_mut().zip(&tg) {
            *e += scale * g;
        }
        project_to_ball(&mut eps_t, cfg.rho, cfg.p);
    }
    let eps: Vec<S> = scales.iter().zip(&eps_t).map(|(&s, &e)| s * e).collect();
    let final_loss = obj.loss(&w.perturbed(&eps)?)?;
    check_finite(final_loss)?;
    if final_loss > best {
        best = final_loss;
    }
    Ok(SharpnessReport {
        base_loss: base,
        perturbed_loss: best,
        sharpness: best - base,
        cfg: *cfg,
        method: Method::KStep(steps),
        m: None,
    })
}

/// Averages per-chunk sharpness over chunks of `m` samples.
pub fn m_sharpness_estimate<S: Scalar>(
    w: &ParameterVector<S>,
    obj: &impl ChunkedObjective<S>,
    cfg: &PerturbationConfig<S>,
    m: usize,
    steps: usize,
) -> Result<SharpnessReport<S>> {
    let ranges = chunk_ranges(obj.num_samples(), m)?;
    let n_chunks = cast::<S>(ranges.len() as f64);
    let mut base = S::zero();
    let mut perturbed = S::zero();
    let mut sharpness = S::zero();
    let mut method = Method::OneStep;
    for range in ranges {
        let chunk = obj.chunk(range)?;
        let report = estimate_sharpness(w, &chunk, cfg, steps)?;
        base += report.base_loss;
        perturbed += report.perturbed_loss;
        sharpness += report.sharpness;
        method = report.method;
    }
    Ok(SharpnessReport {
        base_loss: base / n_chunks,
        perturbed_loss: perturbed / n_chunks,
        sharpness: sharpness / n_chunks,
        cfg: *cfg,
        method,
        m: Some(m),
    })
}

/// Start of the multi-step ascent: the closed-form boundary point, or a
/// deterministic boundary point when the gradient (numerically) vanishes and
/// gives no direction.
fn transformed_start<S: Scalar>(scales: &[S], grad: &[S], rho: S, p: PNorm, k: usize) -> Vec<S> {
    let tg: Vec<S> = scales.iter().zip(grad).map(|(&s, &g)| s * g).collect();
    match p {
        PNorm::Two => {
            let norm = l2_norm(&tg);
            if norm >= cast::<S>(1e-12) {
                let sc = rho / norm;
                tg.iter().map(|&t| sc * t).collect()
            } else {
                vec![rho / cast::<S>((k as f64).sqrt()); k]
            }
        }
        PNorm::Inf => {
            let signed: Vec<S> = tg.iter().map(|&t| rho * sign(t)).collect();
            if signed.iter().any(|&x| x != S::zero()) {
                signed
            } else {
                vec![rho; k]
            }
        }
    }
}

/// Rescales onto the ball boundary when the iterate lies outside.
fn project_to_ball<S: Scalar>(eps_t: &mut [S], rho: S, p: PNorm) {
    let norm = match p {
        PNorm::Two => l2_norm(eps_t),
        PNorm::Inf => linf_norm(eps_t),
    };
    if norm > rho {
        let sc = rho / norm;
        for e in eps_t.iter_mut() {
            *e *= sc;
        }
    }
}

fn check_finite<S: Scalar>(loss: S) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(crate::error::Error::NonFinite { op: "sharpness" })
    }
}
