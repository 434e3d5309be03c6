//! Targeted, consistency-regularized iterative sign-gradient attack.
//!
//! The attack perturbs the first image inside `M_perturb` so that the flow
//! inside `M_target` moves away from the clean estimate while, for `alpha > 0`,
//! the flow outside the target is pulled back toward it:
//!
//! ```text
//! l_attack      =  1/N       * sum_{p in target}     |V'(p) - V(p)|_1
//! l_consistency = -1/(HW - N) * sum_{p not in target} |V'(p) - V(p)|_1
//! l_total       = l_attack + alpha * l_consistency
//! I1 <- I1 + eps * M_perturb * sign(grad l_total)
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sign, Field2D, Node, Tape};
use crate::error::{Error, Result};
use crate::flowmodel::{estimate_flow, estimate_flow_on_tape, register_image, FlowModelParams, FlowNodes};
use crate::metrics::perturbation_norms;
use crate::types::{Category, FlowField, Image, LabelMap, Mask};

/// Relative tolerance of the budget stopping rule.
pub const BUDGET_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackSetting {
    /// Perturb the target pixels only.
    Local,
    /// Perturb every pixel.
    Global,
    /// Perturb the pixels of `perturb_category`.
    CrossCategory,
}

impl std::fmt::Display for AttackSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttackSetting::Local => "local",
            AttackSetting::Global => "global",
            AttackSetting::CrossCategory => "cross_category",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Consistency coefficient.
    pub alpha: f64,
    /// Target mean absolute perturbation per perturbed pixel-channel.
    pub budget: f64,
    /// Estimated number of steps; the step size is `budget / step_estimate`.
    pub step_estimate: usize,
    pub setting: AttackSetting,
    pub target_category: Category,
    /// Only used by [`AttackSetting::CrossCategory`].
    pub perturb_category: Category,
    /// Std-dev of the white noise added to the reference flow on the first step.
    pub noise_sigma: f64,
    pub rng_seed: u64,
    pub max_iters: usize,
    pub clamp_to_unit_interval: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            budget: 4e-3,
            step_estimate: 2,
            setting: AttackSetting::Global,
            target_category: Category::Vehicle,
            perturb_category: Category::Nature,
            noise_sigma: 1e-3,
            rng_seed: 0,
            max_iters: 20,
            clamp_to_unit_interval: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(Error::invalid(format!("budget must be positive, got {}", self.budget)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.step_estimate == 0 {
            return Err(Error::invalid("step_estimate must be at least 1"));
        }
        if self.max_iters < self.step_estimate {
            return Err(Error::invalid(format!(
                "max_iters ({}) must be at least step_estimate ({})",
                self.max_iters, self.step_estimate
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Target and perturbation masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masks {
    pub target: Mask,
    pub perturb: Mask,
}

pub fn build_masks(labels: &LabelMap, config: &AttackConfig) -> Result<Masks> {
    let target = labels.mask_of(config.target_category);
    if target.count() == 0 {
        return Err(Error::EmptyMask {
            role: "target",
            category: config.target_category.to_string(),
        });
    }
    let perturb = match config.setting {
        AttackSetting::Local => target.clone(),
        AttackSetting::Global => Mask::full(labels.height(), labels.width()),
        AttackSetting::CrossCategory => {
            let m = labels.mask_of(config.perturb_category);
            if m.count() == 0 {
                return Err(Error::EmptyMask {
                    role: "perturb",
                    category: config.perturb_category.to_string(),
                });
            }
            m
        }
    };
    Ok(Masks { target, perturb })
}

fn check_loss_shapes(a: &FlowField, b: &FlowField, m: &Mask) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != m.shape() {
        return Err(Error::ShapeMismatch {
            op: "attack loss",
            expected: format!("{:?}", m.shape()),
            found: format!("{:?} and {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn l1_sum(a: &FlowField, b: &FlowField, mask: &Mask, inside: bool) -> f64 {
    mask.bits()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == inside)
        .map(|(i, _)| (a.u.data()[i] - b.u.data()[i]).abs() + (a.v.data()[i] - b.v.data()[i]).abs())
        .sum()
}

/// Mean per-pixel L1 flow change over the target pixels.
pub fn loss_attack(attacked: &FlowField, original: &FlowField, target: &Mask) -> Result<f64> {
    check_loss_shapes(attacked, original, target)?;
    if target.count() == 0 {
        return Err(Error::EmptyMask {
            role: "target",
            category: "<mask>".into(),
        });
    }
    Ok(l1_sum(attacked, original, target, true) / target.count() as f64)
}

/// Negated mean per-pixel L1 flow change over the non-target pixels.
pub fn loss_consistency(attacked: &FlowField, original: &FlowField, target: &Mask) -> Result<f64> {
    check_loss_shapes(attacked, original, target)?;
    let off = target.height() * target.width() - target.count();
    if off == 0 {
        return Err(Error::invalid(
            "loss_consistency: target mask covers every pixel, complement is empty",
        ));
    }
    Ok(-l1_sum(attacked, original, target, false) / off as f64)
}

/// `l_attack + alpha * l_consistency`; the consistency term is skipped when `alpha == 0`.
pub fn loss_total(attacked: &FlowField, original: &FlowField, target: &Mask, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let attack = loss_attack(attacked, original, target)?;
    if alpha == 0.0 {
        return Ok(attack);
    }
    Ok(attack + alpha * loss_consistency(attacked, original, target)?)
}

/// Per-step size such that `n` full-sign steps reach the budget.
pub fn epsilon_schedule(budget: f64, n: usize) -> Result<f64> {
    if !(budget > 0.0) || n == 0 {
        return Err(Error::invalid(format!(
            "epsilon_schedule needs budget > 0 and n >= 1, got {budget} and {n}"
        )));
    }
    Ok(budget / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub attack: Node,
    pub consistency: Option<Node>,
    pub total: Node,
}

/// Records the losses on `tape` for a flow already on it.
pub fn record_losses(
    tape: &mut Tape,
    flow: FlowNodes,
    reference: &FlowField,
    target: &Mask,
    alpha: f64,
) -> Result<LossNodes> {
    let n = target.count();
    let off = target.height() * target.width() - n;
    if n == 0 {
        return Err(Error::EmptyMask {
            role: "target",
            category: "<mask>".into(),
        });
    }
    let ru = tape.constant(reference.u.clone());
    let rv = tape.constant(reference.v.clone());
    let du = tape.sub(flow.u, ru)?;
    let dv = tape.sub(flow.v, rv)?;
    let au = tape.abs(du)?;
    let av = tape.abs(dv)?;
    let l1 = tape.add(au, av)?;

    let inside = Arc::new(target.bits().to_vec());
    let s = tape.masked_sum(l1, inside)?;
    let attack = tape.scale(s, 1.0 / n as f64)?;
    if alpha == 0.0 {
        return Ok(LossNodes {
            attack,
            consistency: None,
            total: attack,
        });
    }
    if off == 0 {
        return Err(Error::invalid(
            "loss_consistency: target mask covers every pixel, complement is empty",
        ));
    }
    let outside = Arc::new(target.bits().iter().map(|b| !b).collect());
    let s = tape.masked_sum(l1, outside)?;
    let consistency = tape.scale(s, -1.0 / off as f64)?;
    let weighted = tape.scale(consistency, alpha)?;
    let total = tape.add(attack, weighted)?;
    Ok(LossNodes {
        attack,
        consistency: Some(consistency),
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_attack: f64,
    pub l_consistency: f64,
    pub l_total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub l_attack: f64,
    pub l_consistency: f64,
    pub l_total: f64,
    /// Mean `|I1' - I1|` over perturbed pixel-channels after this step.
    pub mean_abs_perturbation: f64,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    pub perturbed_image: Image,
    pub attacked_flow: FlowField,
    pub original_flow: FlowField,
    pub masks: Masks,
    pub iterations: Vec<TraceEntry>,
    pub final_mean_abs_perturbation: f64,
    pub converged: bool,
}

impl AttackResult {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,l_attack,l_consistency,l_total,mean_abs_perturbation\n");
        for e in &self.iterations {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e}\n",
                e.iteration, e.l_attack, e.l_consistency, e.l_total, e.mean_abs_perturbation
            ));
        }
        out
    }
}

/// Gradient of the total loss with respect to the three channels of `image`.
pub fn loss_gradient(
    image: &Image,
    i2: &Image,
    reference: &FlowField,
    target: &Mask,
    alpha: f64,
    params: &FlowModelParams,
) -> Result<([Field2D; 3], StepLosses)> {
    let mut tape = Tape::new();
    let leaves = register_image(&mut tape, image);
    let flow = estimate_flow_on_tape(&mut tape, &leaves, image.shape(), i2, params)?;
    let losses = record_losses(&mut tape, flow, reference, target, alpha)?;
    let grads = tape.backward(losses.total, &leaves)?;
    let step = StepLosses {
        l_attack: tape.scalar_value(losses.attack),
        l_consistency: losses.consistency.map_or(0.0, |n| tape.scalar_value(n)),
        l_total: tape.scalar_value(losses.total),
    };
    let mut it = grads.into_iter();
    Ok(([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()], step))
}

/// One masked sign-gradient step on `current`.
#[allow(clippy::too_many_arguments)]
pub fn ifgsm_step(
    current: &Image,
    i2: &Image,
    reference: &FlowField,
    masks: &Masks,
    alpha: f64,
    epsilon: f64,
    params: &FlowModelParams,
    clamp: bool,
) -> Result<(Image, StepLosses)> {
    let (grads, losses) = loss_gradient(current, i2, reference, &masks.target, alpha, params)?;
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("attack gradient contains NaN or infinity".into()));
    }
    let perturb = masks.perturb.bits();
    let mut channels = current.clone().into_channels();
    for (chan, grad) in channels.iter_mut().zip(&grads) {
        for ((value, &g), &inside) in chan.data_mut().iter_mut().zip(grad.data()).zip(perturb) {
            if inside {
                let next = *value + epsilon * sign(g);
                *value = if clamp { next.clamp(0.0, 1.0) } else { next };
            }
        }
    }
    Ok((Image::from_channels_unchecked(channels), losses))
}

/// Reference flow with seeded white noise, used on the first step so the
/// L1 terms have non-zero gradients.
pub fn noisy_reference(flow: &FlowField, sigma: f64, seed: u64) -> Result<FlowField> {
    if sigma == 0.0 {
        return Ok(flow.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(format!("noise_sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = flow.clone();
    for x in noisy.u.data_mut().iter_mut().chain(noisy.v.data_mut().iter_mut()) {
        *x += normal.sample(&mut rng);
    }
    Ok(noisy)
}

/// Runs the attack until the mean perturbation is within 5% of the budget or
/// `max_iters` steps have been taken.
pub fn run_attack(
    i1: &Image,
    i2: &Image,
    labels: &LabelMap,
    config: &AttackConfig,
    params: &FlowModelParams,
) -> Result<AttackResult> {
    config.validate()?;
    if labels.shape() != i1.shape() {
        return Err(Error::ShapeMismatch {
            op: "run_attack",
            expected: format!("{:?}", i1.shape()),
            found: format!("labels {:?}", labels.shape()),
        });
    }
    let masks = build_masks(labels, config)?;
    let epsilon = epsilon_schedule(config.budget, config.step_estimate)?;
    let original_flow = estimate_flow(i1, i2, params)?;
    let noisy = noisy_reference(&original_flow, config.noise_sigma, config.rng_seed)?;

    let mut current = i1.clone();
    let mut iterations = Vec::new();
    let mut converged = false;
    let mut mean_abs = 0.0;
    for iteration in 1..=config.max_iters {
        let reference = if iteration == 1 { &noisy } else { &original_flow };
        let (next, losses) = ifgsm_step(
            &current,
            i2,
            reference,
            &masks,
            config.alpha,
            epsilon,
            params,
            config.clamp_to_unit_interval,
        )?;
        current = next;
        mean_abs = perturbation_norms(&current, i1, &masks.perturb)?.mean_abs_in_mask;
        iterations.push(TraceEntry {
            iteration,
            l_attack: losses.l_attack,
            l_consistency: losses.l_consistency,
            l_total: losses.l_total,
            mean_abs_perturbation: mean_abs,
        });
        if (mean_abs - config.budget).abs() <= BUDGET_TOLERANCE * config.budget {
            converged = true;
            break;
        }
    }
    let attacked_flow = estimate_flow(&current, i2, params)?;
    Ok(AttackResult {
        perturbed_image: current,
        attacked_flow,
        original_flow,
        masks,
        iterations,
        final_mean_abs_perturbation: mean_abs,
        converged,
    })
}
