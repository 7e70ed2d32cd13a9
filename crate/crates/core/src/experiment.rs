//! Turns a corpus, teacher knowledge and annotations into the tokenizer,
//! model shape and per-stage training data.

use crate::config::PipelineConfig;
use crate::corpus::Corpus;
use crate::error::Result;
use crate::model::{TinyLmConfig, Vocab};
use crate::partition::{
    build_dpo_pairs, gold_labels, partition_by_consensus, request_annotations, stage1_targets, stage2_targets,
    Annotations, ConsensusPartition, DpoPair, StageTarget,
};
use crate::prompt::{build_prompt, PromptVariant, NO_VERDICT, YES_VERDICT};
use crate::teacher::KnowledgeSet;

/// Vocabulary over every prompt of the corpus and every teacher answer.
pub fn build_vocab(corpus: &Corpus, ks: &KnowledgeSet, variant: PromptVariant) -> Vocab {
    let prompts: Vec<String> = corpus.all().map(|i| build_prompt(i, variant).text).collect();
    Vocab::build(
        prompts
            .iter()
            .map(String::as_str)
            .chain(ks.all_records().map(|r| r.raw_response.as_str()))
            .chain([YES_VERDICT, NO_VERDICT]),
    )
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub model: TinyLmConfig,
    pub partition: ConsensusPartition,
    pub stage1_targets: Vec<StageTarget>,
    pub pairs: Vec<DpoPair>,
    pub stage2_targets: Vec<StageTarget>,
}

/// Partitions the training split and derives both stages' data.
pub fn prepare(
    config: &PipelineConfig,
    corpus: &Corpus,
    ks: &KnowledgeSet,
    annotations: &Annotations,
) -> Result<Prepared> {
    let train_ks = ks.subset(corpus.train.iter().map(|i| i.id.as_str()));
    let partition = partition_by_consensus(&train_ks)?;
    let variant = config.prompt_variant;
    let stage1 = stage1_targets(
        &corpus.train,
        &train_ks,
        &partition,
        annotations,
        &config.primary_teacher,
        variant,
    )?;
    let pairs = build_dpo_pairs(&corpus.train, &train_ks, &partition, annotations, variant)?;
    let stage2 = stage2_targets(&pairs, &train_ks);
    let vocab = build_vocab(corpus, ks, variant);
    let model = TinyLmConfig {
        text_vocab_size: vocab.len(),
        ..config.model.clone()
    };
    Ok(Prepared {
        vocab,
        model,
        partition,
        stage1_targets: stage1,
        pairs,
        stage2_targets: stage2,
    })
}

/// Preference pairs on validation conflict items, labelled from gold, for
/// measuring DPO margins on data Stage 2 never saw.
#[derive(Debug, Clone, Default)]
pub struct HeldOut {
    pub pairs: Vec<DpoPair>,
}

impl HeldOut {
    pub fn build(config: &PipelineConfig, corpus: &Corpus, ks: &KnowledgeSet) -> Result<HeldOut> {
        let val = &corpus.val;
        if val.is_empty() || !val.iter().all(|i| ks.is_complete_for(&i.id)) {
            return Ok(HeldOut::default());
        }
        let val_ks = ks.subset(val.iter().map(|i| i.id.as_str()));
        let partition = partition_by_consensus(&val_ks)?;
        let gold = gold_labels(val);
        let annotations = request_annotations(&partition, |id| gold.get(id).copied())?;
        let pairs = build_dpo_pairs(val, &val_ks, &partition, &annotations, config.prompt_variant)?;
        Ok(HeldOut { pairs })
    }
}
