//! Training objectives with exact adapter gradients, plus a central
//! finite-difference checker for them.
//!
//! * token cross-entropy: `−(1/B) Σ_i (1/N_i) Σ_t log P(y_t | y_<t, x)`
//! * sequence log-probability: `Σ_t log P(y_t | y_<t, x)`
//! * DPO: `−mean log σ(β[(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))])`
//! * combined: `γ·CE + α·DPO`

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::AdapterGrads;
use crate::model::{seq_logprob_grad, target_logprob, AdapterStack, Example, Slot};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: AdapterGrads,
}

fn check_batch(batch: &[Example]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if batch.iter().any(|e| e.n_targets() == 0 || e.target_start == 0) {
        return Err(Error::DegenerateBatch);
    }
    Ok(())
}

/// Per-example log-probabilities and gradients, reduced in batch order.
fn logprob_grads(stack: &AdapterStack, batch: &[Example], slot: Slot) -> Result<Vec<(f64, AdapterGrads)>> {
    batch
        .par_iter()
        .map(|ex| seq_logprob_grad(stack, ex, slot))
        .collect()
}

/// Mean per-token cross-entropy over target positions, averaged over the
/// batch, with gradients for the adapter in `slot`.
pub fn ce_loss(batch: &[Example], stack: &AdapterStack, slot: Slot) -> Result<LossValue> {
    check_batch(batch)?;
    let b = batch.len() as f64;
    let parts = logprob_grads(stack, batch, slot)?;
    let mut grads = AdapterGrads::zeros_like(stack, slot)?;
    let mut value = 0.0;
    for (ex, (lp, g)) in batch.iter().zip(&parts) {
        let w = 1.0 / (b * ex.n_targets() as f64);
        value -= w * lp;
        grads.add_scaled(-w, g);
    }
    Ok(LossValue { value, grads })
}

/// Forward-only cross-entropy.
pub fn ce_value(batch: &[Example], stack: &AdapterStack) -> Result<f64> {
    check_batch(batch)?;
    let b = batch.len() as f64;
    let lps: Vec<f64> = batch
        .par_iter()
        .map(|ex| target_logprob(stack, ex))
        .collect::<Result<_>>()?;
    Ok(batch
        .iter()
        .zip(lps)
        .map(|(ex, lp)| -lp / (b * ex.n_targets() as f64))
        .sum())
}

/// log π(y|x): the summed log-probability of the target tokens.
pub fn seq_logprob(stack: &AdapterStack, ex: &Example) -> Result<f64> {
    check_batch(std::slice::from_ref(ex))?;
    target_logprob(stack, ex)
}

/// Tokenized preference pair sharing one input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpoExample {
    pub item_id: String,
    pub chosen: Example,
    pub rejected: Example,
}

impl DpoExample {
    fn validate(&self) -> Result<()> {
        if self.chosen.text == self.rejected.text && self.chosen.image == self.rejected.image {
            return Err(Error::InvalidPair(self.item_id.clone()));
        }
        check_batch(std::slice::from_ref(&self.chosen))?;
        check_batch(std::slice::from_ref(&self.rejected))
    }
}

/// Reference log-probabilities (chosen, rejected), computed without any
/// gradient bookkeeping. π_ref is frozen, so these can be cached.
pub fn reference_logprobs(reference: &AdapterStack, batch: &[DpoExample]) -> Result<Vec<(f64, f64)>> {
    batch
        .par_iter()
        .map(|p| {
            p.validate()?;
            Ok((
                target_logprob(reference, &p.chosen)?,
                target_logprob(reference, &p.rejected)?,
            ))
        })
        .collect()
}

/// Numerically stable −log σ(z).
fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// DPO loss against a reference stack. Gradients flow only into the
/// policy's Stage-2 adapter.
pub fn dpo_loss(
    batch: &[DpoExample],
    policy: &AdapterStack,
    reference: &AdapterStack,
    beta: f64,
) -> Result<LossValue> {
    let refs = reference_logprobs(reference, batch)?;
    dpo_loss_cached(batch, policy, &refs, beta)
}

/// DPO loss with precomputed reference log-probabilities.
pub fn dpo_loss_cached(
    batch: &[DpoExample],
    policy: &AdapterStack,
    reference: &[(f64, f64)],
    beta: f64,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if reference.len() != batch.len() {
        return Err(Error::Argument("reference log-probs do not match the batch".into()));
    }
    if beta < 0.0 {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let slot = Slot::Stage2;
    let parts: Vec<((f64, AdapterGrads), (f64, AdapterGrads))> = batch
        .par_iter()
        .map(|p| {
            p.validate()?;
            Ok((
                seq_logprob_grad(policy, &p.chosen, slot)?,
                seq_logprob_grad(policy, &p.rejected, slot)?,
            ))
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut grads = AdapterGrads::zeros_like(policy, slot)?;
    let mut value = 0.0;
    for (((lw, gw), (ll, gl)), &(rw, rl)) in parts.iter().zip(reference) {
        let z = beta * ((lw - rw) - (ll - rl));
        value += neg_log_sigmoid(z) / n;
        // d(−log σ(z))/dz = −σ(−z)
        let dz = -sigmoid(-z) / n;
        grads.add_scaled(dz * beta, gw);
        grads.add_scaled(-dz * beta, gl);
    }
    Ok(LossValue { value, grads })
}

/// Per-pair DPO margins `β[(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))]`.
pub fn dpo_margins(
    batch: &[DpoExample],
    policy: &AdapterStack,
    reference: &AdapterStack,
    beta: f64,
) -> Result<Vec<f64>> {
    let refs = reference_logprobs(reference, batch)?;
    let pol = reference_logprobs(policy, batch)?;
    Ok(pol
        .iter()
        .zip(&refs)
        .map(|(&(lw, ll), &(rw, rl))| beta * ((lw - rw) - (ll - rl)))
        .collect())
}

/// `γ·ce + α·dpo`, values and gradients alike.
pub fn total_loss(ce: &LossValue, dpo: &LossValue, gamma: f64, alpha: f64) -> Result<LossValue> {
    if gamma < 0.0 || alpha < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be non-negative (gamma {gamma}, alpha {alpha})"
        )));
    }
    if ce.grads.slot != dpo.grads.slot {
        return Err(Error::Argument("loss components train different adapters".into()));
    }
    let mut grads = ce.grads.clone();
    grads.scale(gamma);
    grads.add_scaled(alpha, &dpo.grads);
    Ok(LossValue {
        value: gamma * ce.value + alpha * dpo.value,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: String,
    pub slot: Slot,
    pub n_coords: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor used in the relative error.
    pub floor: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
    pub failures: Vec<CoordinateCheck>,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

/// Compares the analytic adapter gradient of `loss_fn` against central
/// differences `(f(x+h) − f(x−h)) / 2h` on `n_coords` random coordinates.
pub fn finite_difference_check<F>(
    name: &str,
    loss_fn: F,
    stack: &AdapterStack,
    slot: Slot,
    n_coords: usize,
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&AdapterStack) -> Result<LossValue>,
{
    let base = loss_fn(stack)?;
    if base.grads.slot != slot {
        return Err(Error::Argument("loss gradients are for a different adapter".into()));
    }
    let analytic = base.grads.flatten();
    let adapter = stack
        .adapter(slot)
        .ok_or_else(|| Error::Argument(format!("no {slot} adapter")))?;
    let names = adapter.tensor_names();
    let sizes: Vec<usize> = adapter
        .modules
        .iter()
        .flat_map(|m| [m.a.len(), m.b.len()])
        .collect();
    let tensor_of = |mut i: usize| -> String {
        for (n, &s) in names.iter().zip(&sizes) {
            if i < s {
                return n.clone();
            }
            i -= s;
        }
        String::new()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, analytic.len(), n_coords.min(analytic.len())).into_vec();
    let mut checks = Vec::with_capacity(picks.len());
    for idx in picks {
        let eval = |delta: f64| -> Result<f64> {
            let mut s = stack.clone();
            *s.adapter_mut(slot).expect("checked above").param_mut(idx) += delta;
            Ok(loss_fn(&s)?.value)
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        let a = analytic[idx];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        checks.push(CoordinateCheck {
            index: idx,
            tensor: tensor_of(idx),
            analytic: a,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let max_abs_error = checks
        .iter()
        .map(|c| (c.analytic - c.numeric).abs())
        .fold(0.0, f64::max);
    let failures: Vec<_> = checks.into_iter().filter(|c| c.rel_error >= tolerance).collect();
    Ok(GradCheckReport {
        loss: name.to_string(),
        slot,
        n_coords: n_coords.min(analytic.len()),
        step: h,
        tolerance,
        floor: REL_ERROR_FLOOR,
        max_rel_error,
        max_abs_error,
        passed: failures.is_empty(),
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraConfig, Projection, TinyLmConfig};
    use rand::Rng;

    fn stack() -> AdapterStack {
        let cfg = TinyLmConfig {
            text_vocab_size: 12,
            visual_vocab_size: 5,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_context: 24,
            seed: 2,
            recency_bias: true,
        };
        let mut s = AdapterStack::new(cfg).unwrap();
        let lc = LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets: vec![Projection::Query, Projection::Value, Projection::Up],
            init_scale: 1.0,
        };
        s.attach_fresh(Slot::Stage1, &lc, 1).unwrap();
        s.attach_fresh(Slot::Stage2, &lc, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for slot in [Slot::Stage1, Slot::Stage2] {
            let a = s.adapter_mut(slot).unwrap();
            let v: Vec<f64> = (0..a.n_params()).map(|_| rng.gen_range(-0.5..0.5)).collect();
            a.assign(&v);
        }
        s
    }

    fn ex(text: &[u32], start: usize) -> Example {
        Example {
            image: vec![1, 2],
            text: text.to_vec(),
            target_start: start,
        }
    }

    fn pair() -> DpoExample {
        DpoExample {
            item_id: "p".into(),
            chosen: ex(&[2, 5, 6, 3, 7, 8, 4], 4),
            rejected: ex(&[2, 5, 6, 3, 9, 4], 4),
        }
    }

    #[test]
    fn singleton_ce_is_mean_negative_logprob() {
        let s = stack();
        let e = ex(&[2, 5, 6, 3, 7, 8, 4], 4);
        let ce = ce_loss(std::slice::from_ref(&e), &s, Slot::Stage1).unwrap();
        let lp = seq_logprob(&s, &e).unwrap();
        assert!((ce.value + lp / 3.0).abs() < 1e-12);
        assert!(ce.value > 0.0);
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let s = stack();
        assert!(matches!(ce_loss(&[ex(&[2, 3], 2)], &s, Slot::Stage1), Err(Error::DegenerateBatch)));
        assert!(ce_loss(&[], &s, Slot::Stage1).is_err());
    }

    #[test]
    fn dpo_is_ln2_when_policy_equals_reference() {
        let s = stack();
        let l = dpo_loss(&[pair()], &s, &s, 0.1).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dpo_with_zero_beta_is_ln2() {
        let s = stack();
        let l = dpo_loss(&[pair()], &s, &s.reference(), 0.0).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(l.grads.norm() == 0.0);
    }

    #[test]
    fn identical_pair_is_invalid() {
        let s = stack();
        let mut p = pair();
        p.rejected = p.chosen.clone();
        assert!(matches!(dpo_loss(&[p], &s, &s, 0.1), Err(Error::InvalidPair(_))));
    }

    #[test]
    fn scalar_dpo_value() {
        // Chosen gains 10 nats over the reference, rejected is unchanged.
        let z: f64 = 0.1 * (10.0 - 0.0);
        assert!((neg_log_sigmoid(z) - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!((neg_log_sigmoid(-800.0) - 800.0).abs() < 1e-9);
        assert!(neg_log_sigmoid(800.0) >= 0.0);
    }

    #[test]
    fn total_loss_combines_linearly() {
        let s = stack();
        let e = pair().chosen;
        let ce = ce_loss(std::slice::from_ref(&e), &s, Slot::Stage2).unwrap();
        let dpo = dpo_loss(&[pair()], &s, &s.reference(), 0.1).unwrap();
        let t = total_loss(&ce, &dpo, 0.3, 0.5).unwrap();
        assert!((t.value - (0.3 * ce.value + 0.5 * dpo.value)).abs() < 1e-15);
        let only_ce = total_loss(&ce, &dpo, 1.0, 0.0).unwrap();
        assert_eq!(only_ce.value, ce.value);
        assert_eq!(only_ce.grads, ce.grads);
        assert!(total_loss(&ce, &dpo, -1.0, 0.5).is_err());
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let s = stack();
        let batch = vec![ex(&[2, 5, 6, 3, 7, 8, 4], 4), ex(&[2, 9, 3, 10, 4], 3)];
        let r = finite_difference_check(
            "ce",
            |st| ce_loss(&batch, st, Slot::Stage1),
            &s,
            Slot::Stage1,
            40,
            1e-5,
            1e-5,
            0,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let reference = s.reference();
        let pairs = vec![pair()];
        let r = finite_difference_check(
            "dpo",
            |st| dpo_loss(&pairs, st, &reference, 0.1),
            &s,
            Slot::Stage2,
            40,
            1e-5,
            1e-5,
            1,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
