//! Teacher knowledge: per-item (label, rationale) from simulated or remote
//! teachers, persisted as append-only JSONL.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{item_difficulty, Label, NewsItem};
use crate::error::{Error, Result};
use crate::prompt::{self, build_prompt, parse_response, render_response, PromptText, PromptVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherProfile {
    pub name: String,
    pub base_accuracy: f64,
    /// Accuracy lost per unit of item difficulty.
    pub difficulty_sensitivity: f64,
    /// Positive values trade pristine accuracy for out-of-context accuracy.
    #[serde(default)]
    pub bias_toward_ooc: f64,
    pub seed: u64,
}

impl TeacherProfile {
    pub fn new(name: &str, base_accuracy: f64, seed: u64) -> Self {
        TeacherProfile {
            name: name.to_string(),
            base_accuracy,
            difficulty_sensitivity: 0.0,
            bias_toward_ooc: 0.0,
            seed,
        }
    }

    /// Probability of answering correctly for an item of the given gold
    /// label and difficulty.
    pub fn accuracy_for(&self, gold: Label, difficulty: f64) -> f64 {
        let bias = 0.5 * self.bias_toward_ooc * if gold.is_ooc() { 1.0 } else { -1.0 };
        (self.base_accuracy - self.difficulty_sensitivity * difficulty + bias).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub item_id: String,
    #[serde(rename = "teacher")]
    pub teacher_name: String,
    #[serde(rename = "label")]
    pub predicted_label: Label,
    pub rationale: String,
    #[serde(rename = "raw")]
    pub raw_response: String,
    /// False when the label came from a fallback policy.
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub parse_ok: bool,
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeSet {
    /// item_id → one record per teacher, in `teacher_names` order.
    pub records: BTreeMap<String, Vec<TeacherRecord>>,
    /// First entry is the designated primary teacher.
    pub teacher_names: Vec<String>,
}

impl KnowledgeSet {
    pub fn new(teacher_names: Vec<String>) -> Self {
        KnowledgeSet {
            records: BTreeMap::new(),
            teacher_names,
        }
    }

    /// Builds a set from loose records, ordering each item's records by
    /// `teacher_names`. Records from unknown teachers are dropped.
    pub fn from_records(
        teacher_names: Vec<String>,
        records: impl IntoIterator<Item = TeacherRecord>,
    ) -> Self {
        let mut ks = KnowledgeSet::new(teacher_names);
        for r in records {
            ks.insert(r);
        }
        ks
    }

    pub fn insert(&mut self, record: TeacherRecord) {
        if self.teacher_rank(&record.teacher_name).is_none() {
            return;
        }
        let slot = self.records.entry(record.item_id.clone()).or_default();
        slot.retain(|r| r.teacher_name != record.teacher_name);
        slot.push(record);
        let names = &self.teacher_names;
        slot.sort_by_key(|r| names.iter().position(|n| *n == r.teacher_name));
    }

    fn teacher_rank(&self, name: &str) -> Option<usize> {
        self.teacher_names.iter().position(|n| n == name)
    }

    pub fn get(&self, item_id: &str, teacher: &str) -> Option<&TeacherRecord> {
        self.records
            .get(item_id)?
            .iter()
            .find(|r| r.teacher_name == teacher)
    }

    pub fn record_count(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_complete_for(&self, item_id: &str) -> bool {
        self.records
            .get(item_id)
            .is_some_and(|rs| rs.len() == self.teacher_names.len())
    }

    pub fn all_records(&self) -> impl Iterator<Item = &TeacherRecord> {
        self.records.values().flatten()
    }

    /// Restricts to the given item ids.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> KnowledgeSet {
        let mut out = KnowledgeSet::new(self.teacher_names.clone());
        for id in ids {
            if let Some(rs) = self.records.get(id) {
                out.records.insert(id.to_string(), rs.clone());
            }
        }
        out
    }
}

const YES_RATIONALE: &str = "the visual entities {} agree with the caption.";
const NO_RATIONALE: &str = "the visual entities {} point to another event.";
const EMPTY_RATIONALE: &str = "the evidence is empty so the image alone decides.";

/// Words the rationale templates use.
pub fn rationale_words() -> BTreeSet<String> {
    [YES_RATIONALE, NO_RATIONALE, EMPTY_RATIONALE]
        .iter()
        .flat_map(|s| prompt::words(s))
        .collect()
}

fn item_seed(seed: u64, item_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(item_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn simulated_rationale(item: &NewsItem, label: Label, rng: &mut ChaCha8Rng) -> String {
    let ents = &item.evidence.visual_entities;
    if ents.is_empty() {
        return capitalize(EMPTY_RATIONALE);
    }
    let first = rng.gen_range(0..ents.len());
    let cited = if ents.len() > 1 {
        let mut second = rng.gen_range(0..ents.len() - 1);
        if second >= first {
            second += 1;
        }
        format!("{} and {}", ents[first], ents[second])
    } else {
        ents[first].clone()
    };
    let template = match label {
        Label::Pristine => YES_RATIONALE,
        Label::OutOfContext => NO_RATIONALE,
    };
    capitalize(&template.replacen("{}", &cited, 1))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Answers like a teacher of the given profile. Deterministic in
/// `(profile.seed, item.id)`.
pub fn simulate_teacher(
    item: &NewsItem,
    profile: &TeacherProfile,
    difficulty: f64,
) -> Result<TeacherRecord> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Argument(format!(
            "difficulty must lie in [0, 1], got {difficulty}"
        )));
    }
    let gold = item
        .gold_label
        .ok_or_else(|| Error::MissingGold(item.id.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(profile.seed, &item.id));
    let p = profile.accuracy_for(gold, difficulty);
    let predicted = if rng.gen::<f64>() < p { gold } else { gold.flip() };
    let rationale = simulated_rationale(item, predicted, &mut rng);
    let raw = render_response(predicted, &rationale);
    Ok(TeacherRecord {
        item_id: item.id.clone(),
        teacher_name: profile.name.clone(),
        predicted_label: predicted,
        rationale,
        raw_response: raw,
        parse_ok: true,
    })
}

/// Anything that can answer the detection prompt for an item.
pub trait Teacher: Send + Sync {
    fn name(&self) -> &str;
    fn answer(&self, item: &NewsItem, prompt: &PromptText) -> Result<TeacherRecord>;
}

pub struct SimulatedTeacher(pub TeacherProfile);

impl Teacher for SimulatedTeacher {
    fn name(&self) -> &str {
        &self.0.name
    }

    fn answer(&self, item: &NewsItem, _prompt: &PromptText) -> Result<TeacherRecord> {
        let difficulty = item_difficulty(item).ok_or_else(|| Error::MissingGold(item.id.clone()))?;
        simulate_teacher(item, &self.0, difficulty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherEndpointConfig {
    pub name: String,
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    pub auth_token_env: Option<String>,
    pub timeout_secs: u64,
    /// Maximum number of attempts, including the first.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Label recorded when the response has no parseable verdict.
    pub fallback_label: Label,
}

impl Default for TeacherEndpointConfig {
    fn default() -> Self {
        TeacherEndpointConfig {
            name: "remote".into(),
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "teacher".into(),
            auth_token_env: None,
            timeout_secs: 60,
            max_retries: 3,
            initial_backoff_ms: 500,
            temperature: 0.0,
            max_tokens: 256,
            fallback_label: Label::OutOfContext,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

/// Sends one chat-completion request with exponential backoff.
///
/// 5xx, 429 and network failures are retried; after the last attempt they
/// surface as [`Error::Transport`]. Other non-success statuses fail
/// immediately with [`Error::Protocol`].
pub fn query_external_teacher(
    endpoint: &TeacherEndpointConfig,
    prompt: &PromptText,
    image_tokens: &[u32],
) -> Result<TeacherRecord> {
    let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
    let body = serde_json::json!({
        "model": endpoint.model,
        "temperature": endpoint.temperature,
        "max_tokens": endpoint.max_tokens,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt.text},
                {"type": "image_tokens", "image_tokens": image_tokens},
            ],
        }],
    });
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_secs(endpoint.timeout_secs))
        .build();
    let token = endpoint
        .auth_token_env
        .as_deref()
        .and_then(|var| std::env::var(var).ok());

    let attempts = endpoint.max_retries.max(1);
    let mut last_error = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let wait = endpoint.initial_backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            std::thread::sleep(Duration::from_millis(wait));
        }
        let mut req = agent.post(&url).set("Content-Type", "application/json");
        if let Some(t) = &token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => {
                let parsed: ChatResponse = resp
                    .into_json()
                    .map_err(|e| Error::Protocol { status: 200, body: e.to_string() })?;
                let raw = parsed
                    .choices
                    .into_iter()
                    .next()
                    .map(|c| c.message.content)
                    .ok_or_else(|| Error::Protocol {
                        status: 200,
                        body: "response has no choices".into(),
                    })?;
                return Ok(record_from_raw(
                    &prompt.item_id,
                    &endpoint.name,
                    raw,
                    endpoint.fallback_label,
                ));
            }
            Err(ureq::Error::Status(status, resp)) if status >= 500 || status == 429 => {
                last_error = format!("HTTP {status}: {}", resp.into_string().unwrap_or_default());
            }
            Err(ureq::Error::Status(status, resp)) => {
                return Err(Error::Protocol {
                    status,
                    body: resp.into_string().unwrap_or_default(),
                });
            }
            Err(ureq::Error::Transport(t)) => last_error = t.to_string(),
        }
        log::warn!("teacher {} attempt {} failed: {last_error}", endpoint.name, attempt + 1);
    }
    Err(Error::Transport {
        attempts,
        message: last_error,
    })
}

/// Parses a raw answer, falling back to `fallback` when it has no verdict.
pub fn record_from_raw(item_id: &str, teacher: &str, raw: String, fallback: Label) -> TeacherRecord {
    let (label, rationale, ok) = match parse_response(&raw) {
        Ok((l, r)) => (l, r, true),
        Err(_) => (fallback, raw.clone(), false),
    };
    TeacherRecord {
        item_id: item_id.to_string(),
        teacher_name: teacher.to_string(),
        predicted_label: label,
        rationale,
        raw_response: raw,
        parse_ok: ok,
    }
}

pub struct ExternalTeacher(pub TeacherEndpointConfig);

impl Teacher for ExternalTeacher {
    fn name(&self) -> &str {
        &self.0.name
    }

    fn answer(&self, item: &NewsItem, prompt: &PromptText) -> Result<TeacherRecord> {
        query_external_teacher(&self.0, prompt, &item.image)
    }
}

/// Append-only knowledge log keyed by `(item_id, teacher)`.
pub struct KnowledgeStore {
    path: PathBuf,
    done: HashSet<(String, String)>,
    existing: Vec<TeacherRecord>,
}

impl KnowledgeStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let existing = if path.exists() { read_knowledge(&path)? } else { Vec::new() };
        let done = existing
            .iter()
            .map(|r| (r.item_id.clone(), r.teacher_name.clone()))
            .collect();
        Ok(KnowledgeStore { path, done, existing })
    }

    pub fn contains(&self, item_id: &str, teacher: &str) -> bool {
        self.done.contains(&(item_id.to_string(), teacher.to_string()))
    }

    pub fn append(&mut self, record: &TeacherRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.flush()?;
        self.done
            .insert((record.item_id.clone(), record.teacher_name.clone()));
        self.existing.push(record.clone());
        Ok(())
    }

    pub fn records(&self) -> &[TeacherRecord] {
        &self.existing
    }
}

pub fn read_knowledge(path: impl AsRef<Path>) -> Result<Vec<TeacherRecord>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Queries every teacher on every item, one record per pair.
///
/// With a store, pairs already on disk are skipped and new records are
/// appended as they arrive, so an interrupted run resumes where it
/// stopped.
pub fn acquire_knowledge(
    items: &[NewsItem],
    teachers: &[Box<dyn Teacher>],
    variant: PromptVariant,
    mut store: Option<&mut KnowledgeStore>,
) -> Result<KnowledgeSet> {
    if teachers.is_empty() {
        return Err(Error::Argument("at least one teacher is required".into()));
    }
    let names: Vec<String> = teachers.iter().map(|t| t.name().to_string()).collect();
    let wanted: HashSet<&str> = items.iter().map(|i| i.id.as_str()).collect();
    let mut ks = KnowledgeSet::new(names);
    if let Some(s) = store.as_deref() {
        for r in s.records() {
            if wanted.contains(r.item_id.as_str()) {
                ks.insert(r.clone());
            }
        }
    }
    for item in items {
        let prompt = build_prompt(item, variant);
        for teacher in teachers {
            if ks.get(&item.id, teacher.name()).is_some() {
                continue;
            }
            let record = teacher.answer(item, &prompt).map_err(|e| Error::Teacher {
                item_id: item.id.clone(),
                teacher: teacher.name().to_string(),
                source: Box::new(e),
            })?;
            if let Some(s) = store.as_deref_mut() {
                s.append(&record)?;
            }
            ks.insert(record);
        }
    }
    Ok(ks)
}
