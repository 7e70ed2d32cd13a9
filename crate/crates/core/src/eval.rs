//! Student scoring, the ablation matrix and hyperparameter sweeps.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, PipelineConfig};
use crate::corpus::{Corpus, Label, NewsItem};
use crate::error::{Error, Result};
use crate::experiment::{prepare, HeldOut, Prepared};
use crate::losses::dpo_margins;
use crate::model::{greedy_decode, AdapterStack, Slot, Vocab};
use crate::partition::Annotations;
use crate::prompt::{build_prompt, parse_response, PromptVariant};
use crate::teacher::KnowledgeSet;
use crate::train::{train_stage1, train_stage2, TrainConfig, TrainReport};

/// Student answer for one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub item_id: String,
    pub pred: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    pub parse_ok: bool,
    pub rationale: String,
}

/// Greedy answer of the student, parsed into a verdict. Unparseable
/// answers get `fallback` with `parse_ok = false` and the raw text as
/// rationale.
pub fn predict(
    stack: &AdapterStack,
    vocab: &Vocab,
    item: &NewsItem,
    variant: PromptVariant,
    config: &EvalConfig,
) -> Result<(Label, String, bool)> {
    let prompt = build_prompt(item, variant);
    let ids = vocab.encode_prompt(&prompt.text);
    let out = greedy_decode(stack, &item.image, &ids, config.max_new_tokens)?;
    Ok(interpret(&vocab.decode(&out.tokens), config.fallback_label))
}

/// Parses a decoded answer, applying the fallback label.
pub fn interpret(text: &str, fallback: Label) -> (Label, String, bool) {
    match parse_response(text) {
        Ok((label, rationale)) => (label, rationale, true),
        Err(_) => (fallback, text.to_string(), false),
    }
}

/// Predictions for `items` in order; items are decoded in parallel.
pub fn predict_all(
    stack: &AdapterStack,
    vocab: &Vocab,
    items: &[NewsItem],
    variant: PromptVariant,
    config: &EvalConfig,
) -> Result<Vec<Prediction>> {
    items
        .par_iter()
        .map(|item| {
            let (pred, rationale, parse_ok) = predict(stack, vocab, item, variant, config)?;
            Ok(Prediction {
                item_id: item.id.clone(),
                pred,
                gold: item.gold_label,
                parse_ok,
                rationale,
            })
        })
        .collect()
}

/// Confusion counts with out-of-context as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub parse_failure_count: usize,
    pub counts: ConfusionCounts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy over all items; precision, recall and F1 for the
/// out-of-context class. Precision or recall with an empty denominator is
/// 0, and so is F1 when both are 0.
pub fn compute_metrics(predictions: &[Label], golds: &[Label]) -> Result<Metrics> {
    if predictions.len() != golds.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in predictions.iter().zip(golds) {
        match (p.is_ooc(), g.is_ooc()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision,
        recall,
        f1,
        parse_failure_count: 0,
        counts: c,
    })
}

/// Metrics of predictions that carry gold labels.
pub fn score(predictions: &[Prediction]) -> Result<Metrics> {
    let golds = predictions
        .iter()
        .map(|p| p.gold.ok_or_else(|| Error::MissingGold(p.item_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Label> = predictions.iter().map(|p| p.pred).collect();
    let mut m = compute_metrics(&preds, &golds)?;
    m.parse_failure_count = predictions.iter().filter(|p| !p.parse_ok).count();
    Ok(m)
}

/// One JSON object per line: `item_id`, `pred`, `gold`, `parse_ok`, `rationale`.
pub fn write_predictions(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    Full,
    /// Untrained student.
    NoStep1NoStep2,
    NoStep2,
    NoDpoStep2,
    NoLoraFtStep2,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoStep1NoStep2,
        AblationMode::NoStep2,
        AblationMode::NoDpoStep2,
        AblationMode::NoLoraFtStep2,
    ];

    /// (Stage 1 runs, Stage 2 runs, γ override, α override).
    pub fn plan(self) -> (bool, bool, Option<f64>, Option<f64>) {
        match self {
            AblationMode::Full => (true, true, None, None),
            AblationMode::NoStep1NoStep2 => (false, false, None, None),
            AblationMode::NoStep2 => (true, false, None, None),
            AblationMode::NoDpoStep2 => (true, true, None, Some(0.0)),
            AblationMode::NoLoraFtStep2 => (true, true, Some(0.0), None),
        }
    }

    /// Training config with this mode's loss-weight overrides applied.
    pub fn apply(self, config: &TrainConfig) -> TrainConfig {
        let (_, _, gamma, alpha) = self.plan();
        let mut c = config.clone();
        if let Some(g) = gamma {
            c.stage2.gamma = g;
        }
        if let Some(a) = alpha {
            c.stage2.alpha = a;
        }
        c
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace(['-', '_'], "");
        AblationMode::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(&key))
            .ok_or_else(|| Error::Argument(format!("unknown ablation mode `{s}`")))
    }
}

/// Everything an ablation run produces.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub mode: AblationMode,
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
    pub stage1: Option<TrainReport>,
    pub stage2: Option<TrainReport>,
    /// Mean DPO margin on held-out conflict pairs, when Stage 2 ran.
    pub held_out_margin: Option<f64>,
    pub stack: AdapterStack,
}

/// Mean DPO margin of `stack` against its φ-only reference.
pub fn mean_margin(stack: &AdapterStack, prepared: &Prepared, held_out: &HeldOut, beta: f64) -> Result<Option<f64>> {
    if held_out.pairs.is_empty() || !stack.is_active(Slot::Stage2) {
        return Ok(None);
    }
    let batch: Vec<_> = held_out
        .pairs
        .iter()
        .map(|p| crate::train::encode_pair(&prepared.vocab, p))
        .collect();
    let m = dpo_margins(&batch, stack, &stack.reference(), beta)?;
    Ok(Some(m.iter().sum::<f64>() / m.len() as f64))
}

/// Trains the stages `mode` enables on the training split and scores the
/// result on the test split. Every mode starts from the same base weights
/// and seeds.
pub fn run_ablation(
    mode: AblationMode,
    corpus: &Corpus,
    ks: &KnowledgeSet,
    annotations: &Annotations,
    config: &PipelineConfig,
) -> Result<AblationOutcome> {
    let prepared = prepare(config, corpus, ks, annotations)?;
    let held_out = HeldOut::build(config, corpus, ks)?;
    run_prepared(mode, &prepared, &held_out, &corpus.test, config, None)
}

/// [`run_ablation`] on already prepared data. A supplied Stage-1 stack is
/// reused instead of retraining φ.
pub fn run_prepared(
    mode: AblationMode,
    prepared: &Prepared,
    held_out: &HeldOut,
    test: &[NewsItem],
    config: &PipelineConfig,
    stage1: Option<(&AdapterStack, &TrainReport)>,
) -> Result<AblationOutcome> {
    let (do1, do2, _, _) = mode.plan();
    let train_cfg = mode.apply(&config.train);
    let mut stack = AdapterStack::new(prepared.model.clone())?;
    let mut r1 = None;
    let mut r2 = None;
    if do1 {
        match stage1 {
            Some((s, r)) => {
                stack = s.clone();
                r1 = Some(r.clone());
            }
            None => r1 = Some(train_stage1(&mut stack, &prepared.vocab, &prepared.stage1_targets, &train_cfg, None)?),
        }
    }
    if do2 {
        r2 = Some(train_stage2(
            &mut stack,
            &prepared.vocab,
            &prepared.pairs,
            &prepared.stage2_targets,
            &train_cfg,
            None,
        )?);
    }
    let predictions = predict_all(&stack, &prepared.vocab, test, config.prompt_variant, &config.eval)?;
    let metrics = score(&predictions)?;
    let held_out_margin = if do2 {
        mean_margin(&stack, prepared, held_out, train_cfg.stage2.beta)?
    } else {
        None
    };
    Ok(AblationOutcome {
        mode,
        metrics,
        predictions,
        stage1: r1,
        stage2: r2,
        held_out_margin,
        stack,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LoraRank,
    DpoAlpha,
    Beta,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").to_ascii_lowercase().as_str() {
            "lora_rank" | "rank" => Ok(SweepParam::LoraRank),
            "dpo_alpha" | "alpha" => Ok(SweepParam::DpoAlpha),
            "beta" => Ok(SweepParam::Beta),
            _ => Err(Error::Argument(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::LoraRank => "lora_rank",
            SweepParam::DpoAlpha => "dpo_alpha",
            SweepParam::Beta => "beta",
        })
    }
}

impl SweepParam {
    fn apply(self, config: &mut TrainConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::LoraRank => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Argument(format!("lora rank must be a positive integer, got {value}")));
                }
                // Keep alpha/r fixed so only the capacity changes.
                let s1 = config.stage1.lora_alpha / config.stage1.lora_rank as f64;
                let s2 = config.stage2.lora_alpha / config.stage2.lora_rank as f64;
                config.stage1.lora_rank = value as usize;
                config.stage2.lora_rank = value as usize;
                config.stage1.lora_alpha = s1 * value;
                config.stage2.lora_alpha = s2 * value;
            }
            SweepParam::DpoAlpha => config.stage2.alpha = value,
            SweepParam::Beta => config.stage2.beta = value,
        }
        config.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: Option<Metrics>,
    pub error: Option<String>,
}

/// Retrains and scores the full curriculum once per value. Rank changes
/// retrain both stages; α and β reuse one Stage-1 adapter. A failing value
/// is recorded and the sweep moves on.
pub fn sweep(
    param: SweepParam,
    values: &[f64],
    corpus: &Corpus,
    ks: &KnowledgeSet,
    annotations: &Annotations,
    config: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let prepared = prepare(config, corpus, ks, annotations)?;
    let held_out = HeldOut::build(config, corpus, ks)?;
    let shared = if param == SweepParam::LoraRank {
        None
    } else {
        let mut s = AdapterStack::new(prepared.model.clone())?;
        let r = train_stage1(&mut s, &prepared.vocab, &prepared.stage1_targets, &config.train, None)?;
        Some((s, r))
    };
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let run = || -> Result<Metrics> {
            let mut cfg = config.clone();
            param.apply(&mut cfg.train, value)?;
            let out = run_prepared(
                AblationMode::Full,
                &prepared,
                &held_out,
                &corpus.test,
                &cfg,
                shared.as_ref().map(|(s, r)| (s, r)),
            )?;
            Ok(out.metrics)
        };
        rows.push(match run() {
            Ok(m) => SweepRow {
                value,
                metrics: Some(m),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep {param}={value} failed: {e}");
                SweepRow {
                    value,
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    Ok(rows)
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut s = format!("{param},accuracy,precision,recall,f1,parse_failures,error\n");
    for r in rows {
        match &r.metrics {
            Some(m) => s.push_str(&format!(
                "{},{},{},{},{},{},\n",
                r.value, m.accuracy, m.precision, m.recall, m.f1, m.parse_failure_count
            )),
            None => s.push_str(&format!(
                "{},,,,,,\"{}\"\n",
                r.value,
                r.error.as_deref().unwrap_or("").replace('"', "'")
            )),
        }
    }
    s
}

/// Line chart of accuracy and F1 against the swept value, as SVG.
pub fn sweep_svg(param: SweepParam, rows: &[SweepRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const PAD: f64 = 48.0;
    let ok: Vec<(usize, &Metrics)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.metrics.as_ref().map(|m| (i, m)))
        .collect();
    let n = rows.len().max(2) as f64 - 1.0;
    let x = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / n;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let line = |f: &dyn Fn(&Metrics) -> f64| -> String {
        ok.iter()
            .map(|(i, m)| format!("{:.1},{:.1}", x(*i), y(f(m))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - PAD,
        W - PAD
    ));
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t:.2}</text>\n",
            PAD - 6.0,
            y(t) + 4.0
        ));
    }
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x(i),
            H - PAD + 16.0,
            r.value
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{param}</text>\n",
        W / 2.0,
        H - 10.0
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n",
        line(&|m| m.accuracy)
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\" stroke-dasharray=\"5,3\" points=\"{}\"/>\n",
        line(&|m| m.f1)
    ));
    s.push_str(&format!(
        "<text x=\"{0:.1}\" y=\"{1:.1}\" fill=\"#1f77b4\">accuracy</text>\n<text x=\"{0:.1}\" y=\"{2:.1}\" fill=\"#d62728\">f1</text>\n",
        W - PAD - 50.0,
        PAD - 20.0,
        PAD - 6.0
    ));
    s.push_str("</svg>\n");
    s
}
