//! Run directories: one manifest, stage stamps and a lock file per
//! directory, with every pipeline stage reading its inputs from and writing
//! its outputs to fixed paths inside it.
//!
//! A stamp is the SHA-256 of the config hash and the stage key. A stage
//! whose stamp already matches is a no-op; a stage whose upstream stamp is
//! missing or was made under another config fails with an ordering error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{hex, PipelineConfig};
use crate::corpus::{generate_corpus, load_jsonl, write_jsonl, Corpus, NewsItem};
use crate::error::{Error, Result};
use crate::eval::{mean_margin, predict_all, score, sweep, sweep_csv, sweep_svg, write_predictions, AblationMode, SweepParam};
use crate::experiment::{prepare, HeldOut, Prepared};
use crate::gradcheck::run_gradcheck;
use crate::model::{load_checkpoint, AdapterStack};
use crate::partition::{
    gold_labels, partition_by_consensus, read_annotations, request_annotations, write_annotations, Annotations,
    ConsensusPartition,
};
use crate::teacher::{acquire_knowledge, read_knowledge, KnowledgeSet, KnowledgeStore};
use crate::train::{train_stage1, train_stage2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    Acquire,
    Partition,
    TrainStage1,
    TrainStage2,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Acquire => "acquire",
            Stage::Partition => "partition",
            Stage::TrainStage1 => "train-stage1",
            Stage::TrainStage2 => "train-stage2",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages that must have completed before this one.
    fn upstream(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Generate => &[],
            Acquire => &[Generate],
            Partition => &[Generate, Acquire],
            TrainStage1 => &[Generate, Acquire, Partition],
            TrainStage2 => &[Generate, Acquire, Partition, TrainStage1],
            Evaluate => &[Generate, Acquire, Partition, TrainStage1, TrainStage2],
        }
    }
}

/// Fixed layout of a run directory, relative to its root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub config: String,
    pub corpus: String,
    pub knowledge: String,
    pub partition: String,
    pub budget: String,
    pub annotation_requests: String,
    pub annotations: String,
    pub vocab: String,
    pub stage1_checkpoint: String,
    pub stage2_checkpoint: String,
    pub reports: String,
    pub eval: String,
    pub sweeps: String,
    pub gradcheck: String,
}

impl Default for ManifestPaths {
    fn default() -> Self {
        ManifestPaths {
            config: "config.toml".into(),
            corpus: "corpus".into(),
            knowledge: "knowledge.jsonl".into(),
            partition: "partition.json".into(),
            budget: "budget.json".into(),
            annotation_requests: "annotation_requests.jsonl".into(),
            annotations: "annotations.jsonl".into(),
            vocab: "vocab.json".into(),
            stage1_checkpoint: "checkpoints/stage1".into(),
            stage2_checkpoint: "checkpoints/stage2".into(),
            reports: "reports".into(),
            eval: "eval".into(),
            sweeps: "sweeps".into(),
            gradcheck: "gradcheck.json".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config_hash: String,
    pub seed: u64,
    pub paths: ManifestPaths,
    /// Stage key (`acquire`, `evaluate:Full`, ...) → stamp.
    pub stamps: BTreeMap<String, String>,
}

/// Result of one stage invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageOutcome {
    pub stage: String,
    /// False when the stamps already matched and nothing ran.
    pub ran: bool,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct RunDir {
    pub root: PathBuf,
    pub config: PipelineConfig,
    pub manifest: PipelineManifest,
    config_hash: String,
    _lock: RunLock,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

impl RunDir {
    /// Locks `root` and loads its manifest. The effective config is written
    /// to the directory; stamps from a different config no longer match.
    pub fn open(root: impl AsRef<Path>, config: PipelineConfig) -> Result<RunDir> {
        config.validate()?;
        let root = root.as_ref().to_path_buf();
        let lock = RunLock::acquire(&root)?;
        let manifest_path = root.join("manifest.json");
        let mut manifest: PipelineManifest = if manifest_path.exists() {
            serde_json::from_slice(&fs::read(&manifest_path)?)?
        } else {
            PipelineManifest::default()
        };
        let config_hash = config.hash();
        if manifest.config_hash != config_hash {
            manifest.config_hash = config_hash.clone();
            manifest.seed = config.train.seed;
        }
        let dir = RunDir {
            root,
            config,
            manifest,
            config_hash,
            _lock: lock,
        };
        write_atomic(&dir.path(&dir.manifest.paths.config), dir.config.to_toml()?.as_bytes())?;
        dir.save_manifest()?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        write_json(&self.root.join("manifest.json"), &self.manifest)
    }

    fn stamp_for(&self, key: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update([0]);
        h.update(key.as_bytes());
        hex(&h.finalize())
    }

    pub fn is_current(&self, key: &str) -> bool {
        self.manifest.stamps.get(key) == Some(&self.stamp_for(key))
    }

    fn require(&self, stage: Stage) -> Result<()> {
        if let Some(missing) = stage.upstream().iter().find(|s| !self.is_current(s.name())) {
            return Err(Error::Ordering {
                stage: stage.name().into(),
                missing: missing.name().into(),
            });
        }
        Ok(())
    }

    fn finish(&mut self, key: &str, invalidates: &[Stage]) -> Result<()> {
        for s in invalidates {
            self.manifest.stamps.remove(s.name());
        }
        if invalidates.contains(&Stage::Evaluate) {
            self.manifest.stamps.retain(|k, _| !k.starts_with("evaluate"));
        }
        let stamp = self.stamp_for(key);
        self.manifest.stamps.insert(key.to_string(), stamp);
        self.save_manifest()
    }

    fn up_to_date(&self, key: &str, outputs: Vec<String>) -> StageOutcome {
        StageOutcome {
            stage: key.to_string(),
            ran: false,
            outputs,
            summary: json!({"status": "up_to_date"}),
        }
    }

    fn downstream(stage: Stage) -> Vec<Stage> {
        [
            Stage::Acquire,
            Stage::Partition,
            Stage::TrainStage1,
            Stage::TrainStage2,
            Stage::Evaluate,
        ]
        .into_iter()
        .filter(|s| *s > stage)
        .collect()
    }

    fn corpus_file(&self, split: &str) -> PathBuf {
        self.path(&self.manifest.paths.corpus).join(format!("{split}.jsonl"))
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let read = |split: &str| -> Result<Vec<NewsItem>> {
            let p = self.corpus_file(split);
            if p.exists() {
                load_jsonl(p)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Corpus {
            train: read("train")?,
            val: read("val")?,
            test: read("test")?,
        })
    }

    pub fn load_knowledge(&self) -> Result<KnowledgeSet> {
        let names = self.config.teachers.iter().map(|t| t.name().to_string()).collect();
        Ok(KnowledgeSet::from_records(
            names,
            read_knowledge(self.path(&self.manifest.paths.knowledge))?,
        ))
    }

    pub fn load_annotations(&self, partition: &ConsensusPartition) -> Result<Annotations> {
        let labels = read_annotations(self.path(&self.manifest.paths.annotations))?;
        request_annotations(partition, |id| labels.get(id).copied())
    }

    pub fn load_partition(&self) -> Result<ConsensusPartition> {
        Ok(serde_json::from_slice(&fs::read(self.path(&self.manifest.paths.partition))?)?)
    }

    /// Corpus, knowledge and both stages' data, as Stage 1 and later see them.
    pub fn prepared(&self) -> Result<(Corpus, KnowledgeSet, Annotations, Prepared)> {
        let corpus = self.load_corpus()?;
        let ks = self.load_knowledge()?;
        let annotations = self.load_annotations(&self.load_partition()?)?;
        let prepared = prepare(&self.config, &corpus, &ks, &annotations)?;
        Ok((corpus, ks, annotations, prepared))
    }

    pub fn generate(&mut self) -> Result<StageOutcome> {
        let key = Stage::Generate.name();
        let dir = self.path(&self.manifest.paths.corpus);
        let outputs = vec![self.manifest.paths.corpus.clone()];
        if self.is_current(key) {
            return Ok(self.up_to_date(key, outputs));
        }
        let corpus = match &self.config.ingest {
            Some(ing) => Corpus {
                train: load_jsonl(&ing.train)?,
                val: ing.val.as_ref().map(load_jsonl).transpose()?.unwrap_or_default(),
                test: load_jsonl(&ing.test)?,
            },
            None => generate_corpus(&self.config.corpus)?,
        };
        fs::create_dir_all(&dir)?;
        for (split, items) in [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)] {
            write_jsonl(self.corpus_file(split), items)?;
        }
        self.finish(key, &Self::downstream(Stage::Generate))?;
        Ok(StageOutcome {
            stage: key.into(),
            ran: true,
            outputs,
            summary: json!({
                "train": corpus.train.len(),
                "val": corpus.val.len(),
                "test": corpus.test.len(),
                "source": if self.config.ingest.is_some() { "ingested" } else { "synthetic" },
            }),
        })
    }

    /// Queries every teacher on the training and validation items. An
    /// interrupted run resumes from the records already on disk, as long as
    /// the config is unchanged.
    pub fn acquire(&mut self) -> Result<StageOutcome> {
        let key = Stage::Acquire.name();
        self.require(Stage::Acquire)?;
        let outputs = vec![self.manifest.paths.knowledge.clone()];
        if self.is_current(key) {
            return Ok(self.up_to_date(key, outputs));
        }
        let path = self.path(&self.manifest.paths.knowledge);
        let marker = path.with_extension("config");
        let resumable = fs::read_to_string(&marker).map(|h| h == self.config_hash).unwrap_or(false);
        if !resumable && path.exists() {
            fs::remove_file(&path)?;
        }
        fs::write(&marker, &self.config_hash)?;
        let corpus = self.load_corpus()?;
        let items: Vec<NewsItem> = corpus.train.iter().chain(&corpus.val).cloned().collect();
        let teachers: Vec<_> = self.config.teachers.iter().map(|t| t.build()).collect();
        let mut store = KnowledgeStore::open(&path)?;
        let ks = acquire_knowledge(&items, &teachers, self.config.prompt_variant, Some(&mut store))?;
        // Rewrite in canonical order so reruns are byte-identical.
        let mut w = BufWriter::new(fs::File::create(&path)?);
        for r in ks.all_records() {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        drop(w);
        self.finish(key, &Self::downstream(Stage::Acquire))?;
        Ok(StageOutcome {
            stage: key.into(),
            ran: true,
            outputs,
            summary: json!({ "records": ks.record_count(), "items": items.len() }),
        })
    }

    /// Splits the training items by teacher agreement and requests gold
    /// labels for the conflict set, from the corpus where items carry them
    /// and from the configured annotations file otherwise.
    pub fn partition(&mut self) -> Result<StageOutcome> {
        let key = Stage::Partition.name();
        self.require(Stage::Partition)?;
        let p = self.manifest.paths.clone();
        let outputs = vec![p.partition.clone(), p.budget.clone(), p.annotation_requests.clone(), p.annotations.clone(), p.vocab.clone()];
        if self.is_current(key) {
            return Ok(self.up_to_date(key, outputs));
        }
        let corpus = self.load_corpus()?;
        let ks = self.load_knowledge()?;
        let train_ks = ks.subset(corpus.train.iter().map(|i| i.id.as_str()));
        let partition = partition_by_consensus(&train_ks)?;
        let budget = partition.budget();

        let mut requests = BufWriter::new(fs::File::create(self.path(&p.annotation_requests))?);
        for id in &partition.conflict {
            serde_json::to_writer(&mut requests, &json!({ "item_id": id }))?;
            requests.write_all(b"\n")?;
        }
        requests.flush()?;

        let mut labels = gold_labels(&corpus.train);
        if let Some(file) = self.config.ingest.as_ref().and_then(|i| i.annotations.as_ref()) {
            labels.extend(read_annotations(file)?);
        }
        let annotations = request_annotations(&partition, |id| labels.get(id).copied())?;
        write_annotations(self.path(&p.annotations), &annotations.labels)?;
        write_json(&self.path(&p.partition), &partition)?;
        write_json(&self.path(&p.budget), &budget)?;
        let prepared = prepare(&self.config, &corpus, &ks, &annotations)?;
        prepared.vocab.save(self.path(&p.vocab))?;

        self.finish(key, &Self::downstream(Stage::Partition))?;
        Ok(StageOutcome {
            stage: key.into(),
            ran: true,
            outputs,
            summary: json!({
                "budget": budget,
                "annotation_requests": annotations.requests,
                "stage1_targets": prepared.stage1_targets.len(),
                "dpo_pairs": prepared.pairs.len(),
            }),
        })
    }

    pub fn train_stage1(&mut self) -> Result<StageOutcome> {
        let key = Stage::TrainStage1.name();
        self.require(Stage::TrainStage1)?;
        let p = self.manifest.paths.clone();
        let outputs = vec![p.stage1_checkpoint.clone(), format!("{}/stage1.json", p.reports)];
        if self.is_current(key) {
            return Ok(self.up_to_date(key, outputs));
        }
        let (_, _, _, prepared) = self.prepared()?;
        let mut stack = AdapterStack::new(prepared.model.clone())?;
        let ckpt = self.path(&p.stage1_checkpoint);
        fs::create_dir_all(ckpt.parent().expect("checkpoint has a parent"))?;
        let report = train_stage1(&mut stack, &prepared.vocab, &prepared.stage1_targets, &self.config.train, Some(&ckpt))?;
        let reports = self.path(&p.reports);
        fs::create_dir_all(&reports)?;
        report.write(reports.join("stage1.json"), reports.join("stage1_trace.csv"))?;
        self.finish(key, &Self::downstream(Stage::TrainStage1))?;
        Ok(StageOutcome {
            stage: key.into(),
            ran: true,
            outputs,
            summary: json!({
                "steps": report.total_steps,
                "examples": report.n_examples,
                "epoch_mean_loss": report.epoch_mean_loss,
            }),
        })
    }

    pub fn train_stage2(&mut self) -> Result<StageOutcome> {
        let key = Stage::TrainStage2.name();
        self.require(Stage::TrainStage2)?;
        let p = self.manifest.paths.clone();
        let outputs = vec![p.stage2_checkpoint.clone(), format!("{}/stage2.json", p.reports)];
        if self.is_current(key) {
            return Ok(self.up_to_date(key, outputs));
        }
        let (_, _, _, prepared) = self.prepared()?;
        let mut stack = load_checkpoint(self.path(&p.stage1_checkpoint))?;
        let report = train_stage2(
            &mut stack,
            &prepared.vocab,
            &prepared.pairs,
            &prepared.stage2_targets,
            &self.config.train,
            Some(&self.path(&p.stage2_checkpoint)),
        )?;
        let reports = self.path(&p.reports);
        report.write(reports.join("stage2.json"), reports.join("stage2_trace.csv"))?;
        self.finish(key, &Self::downstream(Stage::TrainStage2))?;
        Ok(StageOutcome {
            stage: key.into(),
            ran: true,
            outputs,
            summary: json!({
                "steps": report.total_steps,
                "pairs": report.n_examples,
                "skipped": report.skipped,
            }),
        })
    }

    /// Scores one ablation on the test split. `Full` uses the Stage-2
    /// checkpoint, `NoStep2` the Stage-1 one and `NoStep1NoStep2` the bare
    /// base; the two loss ablations retrain Stage 2 from the Stage-1
    /// checkpoint with one loss weight at zero and keep their own
    /// checkpoint under the evaluation directory.
    pub fn evaluate(&mut self, mode: AblationMode) -> Result<StageOutcome> {
        let key = format!("{}:{mode}", Stage::Evaluate.name());
        self.require(Stage::Evaluate)?;
        let p = self.manifest.paths.clone();
        let out_dir = format!("{}/{mode}", p.eval);
        let outputs = vec![format!("{out_dir}/metrics.json"), format!("{out_dir}/predictions.jsonl")];
        if self.is_current(&key) {
            return Ok(self.up_to_date(&key, outputs));
        }
        let (corpus, ks, _, prepared) = self.prepared()?;
        let dir = self.path(&out_dir);
        fs::create_dir_all(&dir)?;
        let train_cfg = mode.apply(&self.config.train);
        let stack = match mode {
            AblationMode::Full => load_checkpoint(self.path(&p.stage2_checkpoint))?,
            AblationMode::NoStep2 => {
                let mut s = load_checkpoint(self.path(&p.stage1_checkpoint))?;
                s.stage2 = None;
                s
            }
            AblationMode::NoStep1NoStep2 => AdapterStack::new(prepared.model.clone())?,
            AblationMode::NoDpoStep2 | AblationMode::NoLoraFtStep2 => {
                let mut s = load_checkpoint(self.path(&p.stage1_checkpoint))?;
                let report = train_stage2(
                    &mut s,
                    &prepared.vocab,
                    &prepared.pairs,
                    &prepared.stage2_targets,
                    &train_cfg,
                    Some(&dir.join("checkpoint")),
                )?;
                report.write(dir.join("stage2.json"), dir.join("stage2_trace.csv"))?;
                s
            }
        };
        let predictions = predict_all(&stack, &prepared.vocab, &corpus.test, self.config.prompt_variant, &self.config.eval)?;
        let metrics = score(&predictions)?;
        let held_out = HeldOut::build(&self.config, &corpus, &ks)?;
        let margin = if mode.plan().1 {
            mean_margin(&stack, &prepared, &held_out, train_cfg.stage2.beta)?
        } else {
            None
        };
        let doc = json!({
            "mode": mode.to_string(),
            "metrics": metrics,
            "held_out_margin": margin,
            "held_out_pairs": held_out.pairs.len(),
            "config_hash": self.config_hash,
        });
        write_json(&dir.join("metrics.json"), &doc)?;
        write_predictions(dir.join("predictions.jsonl"), &predictions)?;
        self.finish(&key, &[])?;
        Ok(StageOutcome {
            stage: key,
            ran: true,
            outputs,
            summary: doc,
        })
    }

    /// Full curriculum retrained once per value; needs the partition.
    pub fn sweep(&mut self, param: SweepParam, values: &[f64]) -> Result<StageOutcome> {
        let list: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        let key = format!("sweep:{param}:{}", list.join(","));
        self.require(Stage::TrainStage1)?;
        let rel = format!("{}/{param}", self.manifest.paths.sweeps);
        let outputs = vec![format!("{rel}/sweep.csv"), format!("{rel}/sweep.svg"), format!("{rel}/sweep.json")];
        if self.is_current(&key) {
            return Ok(self.up_to_date(&key, outputs));
        }
        let corpus = self.load_corpus()?;
        let ks = self.load_knowledge()?;
        let annotations = self.load_annotations(&self.load_partition()?)?;
        let rows = sweep(param, values, &corpus, &ks, &annotations, &self.config)?;
        let dir = self.path(&rel);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("sweep.csv"), sweep_csv(param, &rows))?;
        fs::write(dir.join("sweep.svg"), sweep_svg(param, &rows))?;
        write_json(&dir.join("sweep.json"), &rows)?;
        self.finish(&key, &[])?;
        Ok(StageOutcome {
            stage: key,
            ran: true,
            outputs,
            summary: json!({ "param": param.to_string(), "rows": rows }),
        })
    }

    /// Finite-difference check of every loss, with the configured Stage-2
    /// weights. A failed check is reported and returned as an error.
    pub fn gradcheck(&mut self) -> Result<StageOutcome> {
        let key = "gradcheck";
        let rel = self.manifest.paths.gradcheck.clone();
        if self.is_current(key) {
            return Ok(self.up_to_date(key, vec![rel]));
        }
        let s2 = &self.config.train.stage2;
        let summary = run_gradcheck(&self.config.gradcheck, s2.gamma, s2.alpha, s2.beta)?;
        write_json(&self.path(&rel), &summary)?;
        if !summary.passed {
            let worst = [&summary.ce, &summary.dpo, &summary.total]
                .into_iter()
                .map(|r| r.max_rel_error)
                .fold(0.0, f64::max);
            return Err(Error::GradCheck(format!("max relative error {worst:e}, see {rel}")));
        }
        self.finish(key, &[])?;
        Ok(StageOutcome {
            stage: key.into(),
            ran: true,
            outputs: vec![rel],
            summary: json!({
                "passed": true,
                "max_rel_error": {
                    "ce": summary.ce.max_rel_error,
                    "dpo": summary.dpo.max_rel_error,
                    "total": summary.total.max_rel_error,
                },
            }),
        })
    }

    /// generate → acquire → partition → both stages → evaluate (Full).
    pub fn run_all(&mut self) -> Result<Vec<StageOutcome>> {
        Ok(vec![
            self.generate()?,
            self.acquire()?,
            self.partition()?,
            self.train_stage1()?,
            self.train_stage2()?,
            self.evaluate(AblationMode::Full)?,
        ])
    }
}
