//! Finite-difference check of every training loss on a small random model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{ce_loss, dpo_loss, finite_difference_check, total_loss, DpoExample, GradCheckReport};
use crate::model::{AdapterStack, Example, LoraConfig, Projection, Slot, TinyLmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub lora_rank: usize,
    /// Coordinates sampled per loss.
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 24,
            lora_rank: 4,
            coordinates: 120,
            step: 1e-5,
            tolerance: 1e-5,
            batch_size: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub ce: GradCheckReport,
    pub dpo: GradCheckReport,
    pub total: GradCheckReport,
    pub passed: bool,
}

fn random_example(rng: &mut ChaCha8Rng, vocab: usize, visual: usize) -> Example {
    let len = rng.gen_range(5..10);
    let text: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
    let image = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..visual as u32)).collect();
    Example {
        image,
        text,
        target_start: rng.gen_range(1..len - 1),
    }
}

fn random_pair(rng: &mut ChaCha8Rng, vocab: usize, visual: usize, i: usize) -> DpoExample {
    let chosen = random_example(rng, vocab, visual);
    let mut rejected = chosen.clone();
    let last = rejected.text.len() - 1;
    rejected.text[last] = (rejected.text[last] + 1) % vocab as u32;
    rejected.text.push(rng.gen_range(0..vocab as u32));
    DpoExample {
        item_id: format!("pair-{i}"),
        chosen,
        rejected,
    }
}

/// A random model with both adapters attached and every adapter weight
/// (B included) drawn away from zero, so no gradient vanishes trivially.
pub fn random_stack(config: &GradcheckConfig) -> Result<AdapterStack> {
    let model = TinyLmConfig {
        text_vocab_size: config.vocab_size,
        visual_vocab_size: 8,
        d_model: config.d_model,
        n_layers: config.n_layers,
        n_heads: config.n_heads,
        d_ff: 4 * config.d_model,
        max_context: 32,
        seed: config.seed,
        recency_bias: true,
    };
    let mut stack = AdapterStack::new(model)?;
    let lora = LoraConfig {
        rank: config.lora_rank,
        alpha: 2.0 * config.lora_rank as f64,
        targets: Projection::ALL.to_vec(),
        init_scale: 1.0,
    };
    stack.attach_fresh(Slot::Stage1, &lora, config.seed + 1)?;
    stack.attach_fresh(Slot::Stage2, &lora, config.seed + 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6772_6164);
    for slot in [Slot::Stage1, Slot::Stage2] {
        let a = stack.adapter_mut(slot).expect("attached above");
        let v: Vec<f64> = (0..a.n_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
        a.assign(&v);
    }
    Ok(stack)
}

/// Checks CE on the Stage-1 adapter, and DPO and `γ·CE + α·DPO` on the
/// Stage-2 adapter.
pub fn run_gradcheck(config: &GradcheckConfig, gamma: f64, alpha: f64, beta: f64) -> Result<GradcheckSummary> {
    let stack = random_stack(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6261_7463);
    let visual = stack.config.visual_vocab_size;
    let batch: Vec<Example> = (0..config.batch_size)
        .map(|_| random_example(&mut rng, config.vocab_size, visual))
        .collect();
    let pairs: Vec<DpoExample> = (0..config.batch_size)
        .map(|i| random_pair(&mut rng, config.vocab_size, visual, i))
        .collect();
    let reference = stack.reference();
    let (n, h, tol) = (config.coordinates, config.step, config.tolerance);

    let ce = finite_difference_check("ce", |s| ce_loss(&batch, s, Slot::Stage1), &stack, Slot::Stage1, n, h, tol, config.seed)?;
    let dpo = finite_difference_check(
        "dpo",
        |s| dpo_loss(&pairs, s, &reference, beta),
        &stack,
        Slot::Stage2,
        n,
        h,
        tol,
        config.seed + 1,
    )?;
    let chosen: Vec<Example> = pairs.iter().map(|p| p.chosen.clone()).collect();
    let total = finite_difference_check(
        "total",
        |s| {
            let c = ce_loss(&chosen, s, Slot::Stage2)?;
            let d = dpo_loss(&pairs, s, &reference, beta)?;
            total_loss(&c, &d, gamma, alpha)
        },
        &stack,
        Slot::Stage2,
        n,
        h,
        tol,
        config.seed + 2,
    )?;
    let passed = ce.passed && dpo.passed && total.passed;
    Ok(GradcheckSummary { ce, dpo, total, passed })
}
