//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). It exits non-zero on a FAIL
//! only when `ACCEPTANCE_STRICT=1`, so the workspace test run reports the
//! outcome without aborting. `ACCEPTANCE_ONLY=1,4,7` runs a subset.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use newsdistill::config::PipelineConfig;
use newsdistill::corpus::{generate_corpus, CorpusConfig, Label};
use newsdistill::eval::{compute_metrics, run_prepared, AblationMode};
use newsdistill::experiment::{prepare, HeldOut};
use newsdistill::gradcheck::{random_stack, run_gradcheck, GradcheckConfig};
use newsdistill::losses::{ce_loss, ce_value, dpo_loss, seq_logprob, DpoExample};
use newsdistill::model::{
    forward, load_checkpoint, merged_forward, AdapterStack, Example, LoraConfig, Projection, Slot, TinyLmConfig,
};
use newsdistill::partition::{build_dpo_pairs, gold_labels, partition_by_consensus, request_annotations};
use newsdistill::pipeline::RunDir;
use newsdistill::prompt::parse_response;
use newsdistill::teacher::{acquire_knowledge, SimulatedTeacher, Teacher, TeacherProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn gradients() -> Check {
    let cfg = GradcheckConfig {
        coordinates: 120,
        ..GradcheckConfig::default()
    };
    ensure(cfg.d_model == 16 && cfg.n_layers == 2 && cfg.step == 1e-5, "unexpected check setup")?;
    let s = run_gradcheck(&cfg, 0.3, 0.5, 0.1).map_err(e2s)?;
    let detail = format!(
        "{} coords each, max rel error ce {:.2e} dpo {:.2e} total {:.2e}",
        s.ce.n_coords, s.ce.max_rel_error, s.dpo.max_rel_error, s.total.max_rel_error
    );
    ensure(s.ce.n_coords >= 100 && s.dpo.n_coords >= 100 && s.total.n_coords >= 100, "too few coordinates")?;
    ensure(s.passed, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- shared random data

fn random_example(rng: &mut ChaCha8Rng, cfg: &TinyLmConfig) -> Example {
    let len = rng.gen_range(4..12);
    Example {
        image: (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..cfg.visual_vocab_size as u32)).collect(),
        text: (0..len).map(|_| rng.gen_range(0..cfg.text_vocab_size as u32)).collect(),
        target_start: rng.gen_range(1..len),
    }
}

fn random_pair(rng: &mut ChaCha8Rng, cfg: &TinyLmConfig, i: usize) -> DpoExample {
    let chosen = random_example(rng, cfg);
    let mut rejected = chosen.clone();
    let last = rejected.text.len() - 1;
    rejected.text[last] = (rejected.text[last] + 1) % cfg.text_vocab_size as u32;
    DpoExample {
        item_id: format!("p{i}"),
        chosen,
        rejected,
    }
}

fn random_model(seed: u64) -> AdapterStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let cfg = TinyLmConfig {
        text_vocab_size: rng.gen_range(6..30),
        visual_vocab_size: rng.gen_range(2..8),
        d_model: heads * rng.gen_range(2..5),
        n_layers: rng.gen_range(1..3),
        n_heads: heads,
        d_ff: rng.gen_range(4..20),
        max_context: 20,
        seed,
        recency_bias: rng.gen_bool(0.5),
    };
    let mut stack = AdapterStack::new(cfg).unwrap();
    for (slot, k) in [(Slot::Stage1, 1), (Slot::Stage2, 2)] {
        let targets: Vec<Projection> = Projection::ALL.into_iter().filter(|_| rng.gen_bool(0.6)).collect();
        let targets = if targets.is_empty() { vec![Projection::Value] } else { targets };
        let rank = rng.gen_range(1..4);
        let lc = LoraConfig {
            rank,
            alpha: rng.gen_range(0.5..4.0),
            targets,
            init_scale: 1.0,
        };
        stack.attach_fresh(slot, &lc, seed * 10 + k).unwrap();
        let a = stack.adapter_mut(slot).unwrap();
        let v: Vec<f64> = (0..a.n_params()).map(|_| rng.gen_range(-0.4..0.4)).collect();
        a.assign(&v);
    }
    if rng.gen_bool(0.3) {
        stack.set_active(Slot::Stage2, false);
    }
    stack
}

// ---------------------------------------------------------------- 2

fn dpo_identity() -> Check {
    let ln2 = std::f64::consts::LN_2;
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut stack = random_stack(&GradcheckConfig {
            seed,
            ..GradcheckConfig::default()
        })
        .map_err(e2s)?;
        let cfg = stack.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let batch: Vec<DpoExample> = (0..rng.gen_range(1..6)).map(|i| random_pair(&mut rng, &cfg, i)).collect();

        // β = 0 with an arbitrary (non-zero) second adapter.
        let l0 = dpo_loss(&batch, &stack, &stack.reference(), 0.0).map_err(e2s)?;
        worst = worst.max((l0.value - ln2).abs());

        let lora = stack.adapter(Slot::Stage2).unwrap().config.clone();
        stack.attach_fresh(Slot::Stage2, &lora, seed + 7).map_err(e2s)?;
        for beta in [0.1, 1.0, 5.0] {
            let l = dpo_loss(&batch, &stack, &stack.reference(), beta).map_err(e2s)?;
            worst = worst.max((l.value - ln2).abs());
        }
    }
    ensure(worst < 1e-9, format!("max |loss − ln 2| = {worst:e}"))?;
    Ok(format!("max |loss − ln 2| = {worst:.1e} over 80 batches"))
}

// ---------------------------------------------------------------- 3

fn lora_structure(pipeline_run: &Path) -> Check {
    let mut worst_merge = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = random_stack(&GradcheckConfig {
            seed,
            ..GradcheckConfig::default()
        })
        .map_err(e2s)?;
        let cfg = stack.config.clone();
        let ex = random_example(&mut rng, &cfg);

        let bare = AdapterStack::new(cfg.clone()).map_err(e2s)?;
        let mut zero = bare.clone();
        let lc = LoraConfig {
            rank: 4,
            alpha: 8.0,
            targets: Projection::ALL.to_vec(),
            init_scale: 1.0,
        };
        zero.attach_fresh(Slot::Stage1, &lc, seed).map_err(e2s)?;
        zero.attach_fresh(Slot::Stage2, &lc, seed + 1).map_err(e2s)?;
        let a = forward(&bare, &ex.image, &ex.text).map_err(e2s)?.logits;
        let b = forward(&zero, &ex.image, &ex.text).map_err(e2s)?.logits;
        ensure(
            a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "zero-initialized adapters changed the logits",
        )?;

        let on_the_fly = forward(&stack, &ex.image, &ex.text).map_err(e2s)?.logits;
        let merged = merged_forward(&stack, &ex.image, &ex.text).map_err(e2s)?.logits;
        let diff = on_the_fly.iter().zip(merged.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst_merge = worst_merge.max(diff);
    }
    ensure(worst_merge < 1e-6, format!("merged vs on-the-fly max diff {worst_merge:e}"))?;

    let s1 = load_checkpoint(pipeline_run.join("checkpoints/stage1")).map_err(e2s)?;
    let s2 = load_checkpoint(pipeline_run.join("checkpoints/stage2")).map_err(e2s)?;
    ensure(s1.base_hash() == s2.base_hash(), "base weights changed during Stage 2")?;
    ensure(
        s1.adapter_hash(Slot::Stage1).is_some() && s1.adapter_hash(Slot::Stage1) == s2.adapter_hash(Slot::Stage1),
        "Stage-1 adapter changed during Stage 2",
    )?;
    ensure(s2.adapter_hash(Slot::Stage2).is_some(), "no Stage-2 adapter was trained")?;
    Ok(format!(
        "zero-init logits bit-identical; merged max diff {worst_merge:.1e}; θ and φ hashes unchanged"
    ))
}

// ---------------------------------------------------------------- 4

/// Scalar re-implementation of the student's forward pass and token
/// cross-entropy. Reads the weights element by element and shares no code
/// with the library's forward pass.
mod oracle {
    use super::*;

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + 1e-5).sqrt();
        (0..x.len()).map(|i| (x[i] - mean) * r * g[i] + b[i]).collect()
    }

    fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// y = W·x + Σ_active s·B·(A·x)
    fn project(stack: &AdapterStack, layer: usize, p: Projection, x: &[f64]) -> Vec<f64> {
        let w = stack.base.layers[layer].weight(p);
        let (rows, cols) = w.dim();
        let mut y = vec![0.0; rows];
        for o in 0..rows {
            for i in 0..cols {
                y[o] += w[[o, i]] * x[i];
            }
        }
        for slot in [Slot::Stage1, Slot::Stage2] {
            if !stack.is_active(slot) {
                continue;
            }
            let Some(ad) = stack.adapter(slot) else { continue };
            let s = ad.config.alpha / ad.config.rank as f64;
            for m in ad.modules.iter().filter(|m| m.layer == layer && m.projection == p) {
                let r = m.a.nrows();
                let mut ax = vec![0.0; r];
                for k in 0..r {
                    for i in 0..cols {
                        ax[k] += m.a[[k, i]] * x[i];
                    }
                }
                for o in 0..rows {
                    for k in 0..r {
                        y[o] += s * m.b[[o, k]] * ax[k];
                    }
                }
            }
        }
        y
    }

    /// Log-softmax over the vocabulary at every position of the sequence.
    pub fn log_probs(stack: &AdapterStack, image: &[u32], text: &[u32]) -> Vec<Vec<f64>> {
        let cfg = &stack.config;
        let b = &stack.base;
        let d = cfg.d_model;
        let t_len = image.len() + text.len();
        let mut x: Vec<Vec<f64>> = (0..t_len)
            .map(|t| {
                (0..d)
                    .map(|j| {
                        let e = if t < image.len() {
                            b.vis_emb[[image[t] as usize, j]]
                        } else {
                            b.tok_emb[[text[t - image.len()] as usize, j]]
                        };
                        e + b.pos_emb[[t, j]]
                    })
                    .collect()
            })
            .collect();
        let nh = cfg.n_heads;
        let dh = d / nh;
        for (li, lw) in b.layers.iter().enumerate() {
            let g1: Vec<f64> = lw.ln1_g.to_vec();
            let b1: Vec<f64> = lw.ln1_b.to_vec();
            let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &g1, &b1)).collect();
            let q: Vec<Vec<f64>> = h.iter().map(|r| project(stack, li, Projection::Query, r)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| project(stack, li, Projection::Key, r)).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| project(stack, li, Projection::Value, r)).collect();
            let mut cat = vec![vec![0.0; d]; t_len];
            for head in 0..nh {
                let slope = if cfg.recency_bias {
                    2f64.powf(-8.0 * (head + 1) as f64 / nh as f64)
                } else {
                    0.0
                };
                for i in 0..t_len {
                    let mut scores = Vec::with_capacity(i + 1);
                    for j in 0..=i {
                        let mut dot = 0.0;
                        for c in head * dh..(head + 1) * dh {
                            dot += q[i][c] * k[j][c];
                        }
                        scores.push(dot / (dh as f64).sqrt() - slope * (i - j) as f64);
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..=i {
                        let p = (scores[j] - m).exp() / z;
                        for c in head * dh..(head + 1) * dh {
                            cat[i][c] += p * v[j][c];
                        }
                    }
                }
            }
            for i in 0..t_len {
                let o = project(stack, li, Projection::Output, &cat[i]);
                for j in 0..d {
                    x[i][j] += o[j];
                }
                let h2 = layer_norm(&x[i], &lw.ln2_g.to_vec(), &lw.ln2_b.to_vec());
                let mut u = project(stack, li, Projection::Up, &h2);
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj = gelu(*uj + lw.b_up[j]);
                }
                let dn = project(stack, li, Projection::Down, &u);
                for j in 0..d {
                    x[i][j] += dn[j] + lw.b_down[j];
                }
            }
        }
        let vocab = cfg.text_vocab_size;
        (0..t_len)
            .map(|i| {
                let hf = layer_norm(&x[i], &b.lnf_g.to_vec(), &b.lnf_b.to_vec());
                let z: Vec<f64> = (0..vocab)
                    .map(|w| (0..d).map(|j| b.lm_head[[w, j]] * hf[j]).sum())
                    .collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                z.iter().map(|v| v - lse).collect()
            })
            .collect()
    }

    /// Σ log P(y_t | y_<t, x) over the target tokens.
    pub fn seq_logprob(stack: &AdapterStack, ex: &Example) -> f64 {
        let lp = log_probs(stack, &ex.image, &ex.text);
        let p = ex.image.len();
        (ex.target_start..ex.text.len())
            .map(|t| lp[p + t - 1][ex.text[t] as usize])
            .sum()
    }

    /// −(1/B) Σ_i (1/N_i) Σ_t log P(y_t | y_<t, x).
    pub fn ce(stack: &AdapterStack, batch: &[Example]) -> f64 {
        let b = batch.len() as f64;
        batch
            .iter()
            .map(|ex| -seq_logprob(stack, ex) / ((ex.text.len() - ex.target_start) as f64 * b))
            .sum()
    }
}

fn ce_oracle() -> Check {
    let (mut worst_ce, mut worst_lp, mut worst_single) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let stack = random_model(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let cfg = stack.config.clone();
        let batch: Vec<Example> = (0..rng.gen_range(1..5)).map(|_| random_example(&mut rng, &cfg)).collect();
        let slot = if stack.is_active(Slot::Stage2) { Slot::Stage2 } else { Slot::Stage1 };
        let lib = ce_loss(&batch, &stack, slot).map_err(e2s)?.value;
        let lib_fwd = ce_value(&batch, &stack).map_err(e2s)?;
        let reference = oracle::ce(&stack, &batch);
        worst_ce = worst_ce.max((lib - reference).abs()).max((lib_fwd - reference).abs());
        for ex in &batch {
            let lp = seq_logprob(&stack, ex).map_err(e2s)?;
            worst_lp = worst_lp.max((lp - oracle::seq_logprob(&stack, ex)).abs());
            let single = ce_loss(std::slice::from_ref(ex), &stack, slot).map_err(e2s)?.value;
            let n = (ex.text.len() - ex.target_start) as f64;
            worst_single = worst_single.max((-lp / n - single).abs());
        }
    }
    let detail = format!(
        "50 batches: ce diff {worst_ce:.1e}, seq_logprob diff {worst_lp:.1e}, singleton identity {worst_single:.1e}"
    );
    ensure(worst_ce < 1e-10 && worst_lp < 1e-10 && worst_single < 1e-12, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 5

fn partition_contracts() -> Check {
    let corpus = generate_corpus(&CorpusConfig {
        n_contexts: 100,
        n_items_per_context: 100,
        val_fraction: 0.0,
        test_fraction: 0.0,
        seed: 5,
        ..CorpusConfig::default()
    })
    .map_err(e2s)?;
    let items = &corpus.train;
    ensure(items.len() == 10_000, format!("corpus has {} items", items.len()))?;
    let teachers: Vec<Box<dyn Teacher>> = vec![
        Box::new(SimulatedTeacher(TeacherProfile::new("t1", 0.9, 101))),
        Box::new(SimulatedTeacher(TeacherProfile::new("t2", 0.9, 202))),
    ];
    let variant = Default::default();
    let ks = acquire_knowledge(items, &teachers, variant, None).map_err(e2s)?;
    let part = partition_by_consensus(&ks).map_err(e2s)?;
    let n = part.total() as f64;
    let frac = part.conflict.len() as f64 / n;
    let sigma = (0.18f64 * 0.82 / n).sqrt();
    let gold = gold_labels(items);
    let mut requested = BTreeSet::new();
    let ann = request_annotations(&part, |id| {
        requested.insert(id.to_string());
        gold.get(id).copied()
    })
    .map_err(e2s)?;
    let pairs = build_dpo_pairs(items, &ks, &part, &ann, variant).map_err(e2s)?;
    let wrong = pairs
        .iter()
        .filter(|p| parse_response(&p.preferred).map(|(l, _)| l).ok() != gold.get(&p.item_id).copied())
        .count();
    let detail = format!(
        "conflict fraction {frac:.4} (0.18 ± {:.4}), {} requests for {} conflicts, {} pairs, {wrong} mislabeled",
        3.0 * sigma,
        ann.requests,
        part.conflict.len(),
        pairs.len()
    );
    ensure((frac - 0.18).abs() <= 3.0 * sigma, detail.clone())?;
    ensure(ann.requests == part.conflict.len() && requested.len() == part.conflict.len(), detail.clone())?;
    ensure(wrong == 0 && !pairs.is_empty(), detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn end_to_end() -> Check {
    let seeds: u64 = std::env::var("ACCEPTANCE_SEEDS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
    let (mut zs, mut s1, mut full, mut margin) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for seed in 0..seeds {
        let t0 = Instant::now();
        let cfg = PipelineConfig::default().with_seed(seed);
        let corpus = generate_corpus(&cfg.corpus).map_err(e2s)?;
        let teachers: Vec<_> = cfg.teachers.iter().map(|t| t.build()).collect();
        let items: Vec<_> = corpus.train.iter().chain(&corpus.val).cloned().collect();
        let ks = acquire_knowledge(&items, &teachers, cfg.prompt_variant, None).map_err(e2s)?;
        let part = partition_by_consensus(&ks.subset(corpus.train.iter().map(|i| i.id.as_str()))).map_err(e2s)?;
        let gold = gold_labels(&corpus.train);
        let ann = request_annotations(&part, |id| gold.get(id).copied()).map_err(e2s)?;
        let prep = prepare(&cfg, &corpus, &ks, &ann).map_err(e2s)?;
        let held = HeldOut::build(&cfg, &corpus, &ks).map_err(e2s)?;

        let z = run_prepared(AblationMode::NoStep1NoStep2, &prep, &held, &corpus.test, &cfg, None).map_err(e2s)?;
        let a = run_prepared(AblationMode::NoStep2, &prep, &held, &corpus.test, &cfg, None).map_err(e2s)?;
        let r1 = a.stage1.clone().expect("stage 1 ran");
        let f = run_prepared(AblationMode::Full, &prep, &held, &corpus.test, &cfg, Some((&a.stack, &r1))).map_err(e2s)?;
        println!(
            "    seed {seed}: train {} test {} | zero-shot {:.3} stage1 {:.3} full {:.3} margin {:+.5} ({:.0}s)",
            corpus.train.len(),
            corpus.test.len(),
            z.metrics.accuracy,
            a.metrics.accuracy,
            f.metrics.accuracy,
            f.held_out_margin.unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
        zs.push(z.metrics.accuracy);
        s1.push(a.metrics.accuracy);
        full.push(f.metrics.accuracy);
        margin.push(f.held_out_margin.ok_or("no held-out pairs")?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (z, a, f, m) = (mean(&zs), mean(&s1), mean(&full), mean(&margin));
    let detail = format!(
        "{seeds} seeds: zero-shot {z:.3}, stage1 {a:.3}, full {f:.3}, held-out margin {m:+.5}"
    );
    let mut failed = Vec::new();
    if a < 0.80 {
        failed.push("(a) stage1 < 0.80");
    }
    if a - z < 0.25 {
        failed.push("(b) gain over zero-shot < 0.25");
    }
    if !(f >= a && m > 0.0) {
        failed.push("(c) full < stage1 or margin <= 0");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failed.join(", ")))
    }
}

// ---------------------------------------------------------------- 7

fn brute_metrics(p: &[Label], g: &[Label]) -> [f64; 4] {
    let ooc = Label::OutOfContext;
    let tp = p.iter().zip(g).filter(|(a, b)| **a == ooc && **b == ooc).count() as f64;
    let pred_pos = p.iter().filter(|a| **a == ooc).count() as f64;
    let gold_pos = g.iter().filter(|a| **a == ooc).count() as f64;
    let correct = p.iter().zip(g).filter(|(a, b)| a == b).count() as f64;
    let prec = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
    let rec = if gold_pos > 0.0 { tp / gold_pos } else { 0.0 };
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    let acc = if p.is_empty() { 0.0 } else { correct / p.len() as f64 };
    [acc, prec, rec, f1]
}

fn metrics_oracle() -> Check {
    let label = |bit: usize| if bit == 1 { Label::OutOfContext } else { Label::Pristine };
    let close = |m: &newsdistill::eval::Metrics, o: [f64; 4]| {
        [m.accuracy, m.precision, m.recall, m.f1]
            .iter()
            .zip(o)
            .all(|(a, b)| (a - b).abs() < 1e-12)
    };
    let mut cases = 0;
    for n in 1..=6usize {
        for code in 0..(1usize << (2 * n)) {
            let p: Vec<Label> = (0..n).map(|i| label((code >> i) & 1)).collect();
            let g: Vec<Label> = (0..n).map(|i| label((code >> (n + i)) & 1)).collect();
            let m = compute_metrics(&p, &g).map_err(e2s)?;
            ensure(close(&m, brute_metrics(&p, &g)), format!("mismatch on {p:?} / {g:?}"))?;
            ensure(m.counts.total() == n, "counts do not add up")?;
            cases += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.gen_range(1..300);
        let p: Vec<Label> = (0..n).map(|_| label(rng.gen_range(0..2))).collect();
        let g: Vec<Label> = (0..n).map(|_| label(rng.gen_range(0..2))).collect();
        let m = compute_metrics(&p, &g).map_err(e2s)?;
        ensure(close(&m, brute_metrics(&p, &g)), "mismatch on a random vector")?;
        let mut g2 = g.clone();
        g2[0] = Label::OutOfContext;
        if n > 1 {
            g2[1] = Label::Pristine;
        }
        let perfect = compute_metrics(&g2, &g2).map_err(e2s)?;
        ensure(
            perfect.accuracy == 1.0 && perfect.precision == 1.0 && perfect.recall == 1.0 && perfect.f1 == 1.0,
            "perfect predictions did not score 1.0",
        )?;
    }
    Ok(format!("{cases} exhaustive cases and 1000 random vectors agree"))
}

// ---------------------------------------------------------------- 8 & 9

/// A reduced pipeline configuration that still exercises every stage.
fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig::default().with_seed(3);
    c.corpus.n_contexts = 12;
    c.corpus.n_items_per_context = 12;
    c.model.d_model = 16;
    c.model.d_ff = 32;
    c.train.stage1.epochs = 1;
    c.train.stage1.lora_rank = 4;
    c.train.stage1.lora_alpha = 8.0;
    c.train.stage2.lora_rank = 4;
    c.train.stage2.lora_alpha = 8.0;
    c.eval.max_new_tokens = 8;
    c
}

fn run_pipeline(dir: &Path, config: PipelineConfig, extra: &[AblationMode]) -> Result<(), String> {
    let mut run = RunDir::open(dir, config).map_err(e2s)?;
    run.run_all().map_err(e2s)?;
    for &m in extra {
        run.evaluate(m).map_err(e2s)?;
    }
    Ok(())
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Check {
    run_pipeline(a, small_config(), &[])?;
    run_pipeline(b, small_config(), &[])?;
    for rel in ["checkpoints/stage1", "checkpoints/stage2", "corpus"] {
        let (x, y) = (tree(&a.join(rel)), tree(&b.join(rel)));
        ensure(!x.is_empty() && x == y, format!("{rel} differs between runs"))?;
    }
    for rel in ["knowledge.jsonl", "annotations.jsonl", "eval/Full/metrics.json", "eval/Full/predictions.jsonl"] {
        let x = fs::read(a.join(rel)).map_err(e2s)?;
        ensure(x == fs::read(b.join(rel)).map_err(e2s)?, format!("{rel} differs between runs"))?;
    }
    Ok("two full runs: checkpoints, knowledge, annotations and metrics byte-identical".into())
}

fn ablation_reduction(base: &Path, scratch: &Path) -> Check {
    {
        let mut run = RunDir::open(base, small_config()).map_err(e2s)?;
        run.evaluate(AblationMode::NoDpoStep2).map_err(e2s)?;
        run.evaluate(AblationMode::NoLoraFtStep2).map_err(e2s)?;
    }
    for (mode, name) in [(AblationMode::NoDpoStep2, "alpha"), (AblationMode::NoLoraFtStep2, "gamma")] {
        let mut cfg = small_config();
        match mode {
            AblationMode::NoDpoStep2 => cfg.train.stage2.alpha = 0.0,
            _ => cfg.train.stage2.gamma = 0.0,
        }
        let dir = scratch.join(name);
        run_pipeline(&dir, cfg, &[])?;
        let ablated = tree(&base.join(format!("eval/{mode}/checkpoint")));
        ensure(
            !ablated.is_empty() && ablated == tree(&dir.join("checkpoints/stage2")),
            format!("{mode} checkpoint differs from a Stage-2 run with {name} = 0"),
        )?;
    }
    Ok("NoDpoStep2 = (α=0), NoLoraFtStep2 = (γ=0), byte-identical checkpoints".into())
}

// ---------------------------------------------------------------- driver

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |n: usize| only.as_ref().map_or(true, |s| s.contains(&n));
    let tmp = tempfile::tempdir().expect("temp dir");
    let run_a = tmp.path().join("run-a");
    let run_b = tmp.path().join("run-b");

    // Criterion 3 reads the checkpoints of the determinism run.
    let needs_pipeline = wanted(3) || wanted(8) || wanted(9);
    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut go = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if !wanted(n) {
            return;
        }
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        let tag = if r.is_ok() { "PASS" } else { "FAIL" };
        let msg = match &r {
            Ok(m) | Err(m) => m.clone(),
        };
        println!("criterion {n} [{name}]: {tag} ({secs:.1}s) {msg}");
        results.push((n, name, r, secs));
    };

    go(1, "gradient correctness", &mut gradients);
    go(2, "DPO identity", &mut dpo_identity);
    go(4, "CE oracle", &mut ce_oracle);
    go(5, "partition and budget", &mut partition_contracts);
    go(7, "metrics oracle", &mut metrics_oracle);
    if needs_pipeline {
        go(8, "determinism", &mut || determinism(&run_a, &run_b));
        if !run_a.join("checkpoints/stage2").exists() {
            let _ = run_pipeline(&run_a, small_config(), &[]);
        }
    }
    go(3, "LoRA structure", &mut || lora_structure(&run_a));
    go(9, "ablation reduction", &mut || ablation_reduction(&run_a, &tmp.path().join("zero")));
    go(6, "end-to-end curriculum", &mut end_to_end);

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (criteria {failed:?})") }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
