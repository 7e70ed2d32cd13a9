//! Synthetic news world and NewsCLIPpings-style JSONL ingestion.
//!
//! The generator builds `n_contexts` news events ("contexts"), pairs each
//! with a semantically similar neighbour, and emits image-caption items.
//! Pristine items draw their image from the caption's own context;
//! out-of-context items draw it from the neighbour. Evidence always comes
//! from the image's context, so it carries the mismatch signal the way
//! image-retrieved web evidence does.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt;

/// Binary context label. `OutOfContext` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Pristine = 0,
    OutOfContext = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_ooc(self) -> bool {
        self == Label::OutOfContext
    }

    pub fn flip(self) -> Label {
        match self {
            Label::Pristine => Label::OutOfContext,
            Label::OutOfContext => Label::Pristine,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Pristine),
            1 => Ok(Label::OutOfContext),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l.as_u8()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub visual_entities: Vec<String>,
    pub searched_captions: Vec<String>,
    /// Text renderings of caption-retrieved images. Only the
    /// `EntitiesCaptionsAndImages` prompt variant reads them.
    #[serde(default)]
    pub searched_images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewsItem {
    pub id: String,
    /// Visual-token ids over the visual vocabulary.
    pub image: Vec<u32>,
    pub caption: String,
    pub evidence: Evidence,
    pub gold_label: Option<Label>,
    /// Context the caption was written for (generator-internal).
    pub context_id: Option<String>,
    /// Context the image was taken from (generator-internal).
    pub image_context_id: Option<String>,
}

/// Flat JSONL form of a [`NewsItem`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ItemRecord {
    id: String,
    caption: String,
    visual_entities: Vec<String>,
    searched_captions: Vec<String>,
    image_tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_context_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    searched_images: Vec<String>,
}

const REQUIRED_FIELDS: [&str; 5] = [
    "id",
    "caption",
    "visual_entities",
    "searched_captions",
    "image_tokens",
];

impl From<&NewsItem> for ItemRecord {
    fn from(it: &NewsItem) -> Self {
        ItemRecord {
            id: it.id.clone(),
            caption: it.caption.clone(),
            visual_entities: it.evidence.visual_entities.clone(),
            searched_captions: it.evidence.searched_captions.clone(),
            image_tokens: it.image.clone(),
            label: it.gold_label,
            context_id: it.context_id.clone(),
            image_context_id: it.image_context_id.clone(),
            searched_images: it.evidence.searched_images.clone(),
        }
    }
}

impl From<ItemRecord> for NewsItem {
    fn from(r: ItemRecord) -> Self {
        NewsItem {
            id: r.id,
            image: r.image_tokens,
            caption: r.caption,
            evidence: Evidence {
                visual_entities: r.visual_entities,
                searched_captions: r.searched_captions,
                searched_images: r.searched_images,
            },
            gold_label: r.label,
            context_id: r.context_id,
            image_context_id: r.image_context_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_contexts: usize,
    pub n_items_per_context: usize,
    pub ooc_ratio: f64,
    pub visual_vocab_size: usize,
    /// Number of synthetic content words available to contexts.
    pub text_vocab_size: usize,
    /// Fraction of topic words and visual tokens a context shares with its
    /// neighbour. Higher means swapped images are harder to spot.
    pub similarity_noise: f64,
    /// Probability that an evidence word or image token is replaced by a
    /// random one.
    pub evidence_noise: f64,
    pub min_image_len: usize,
    /// Longest image sequence (k_max).
    pub max_image_len: usize,
    pub topic_words_per_context: usize,
    pub visual_tokens_per_context: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_contexts: 100,
            n_items_per_context: 30,
            ooc_ratio: 0.5,
            visual_vocab_size: 256,
            text_vocab_size: 400,
            similarity_noise: 0.3,
            evidence_noise: 0.1,
            min_image_len: 2,
            max_image_len: 4,
            topic_words_per_context: 6,
            visual_tokens_per_context: 4,
            val_fraction: 1.0 / 6.0,
            test_fraction: 1.0 / 6.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        frac("ooc_ratio", self.ooc_ratio)?;
        frac("similarity_noise", self.similarity_noise)?;
        frac("evidence_noise", self.evidence_noise)?;
        frac("val_fraction", self.val_fraction)?;
        frac("test_fraction", self.test_fraction)?;
        if self.val_fraction + self.test_fraction > 1.0 {
            return Err(Error::Config(
                "val_fraction + test_fraction exceeds 1".into(),
            ));
        }
        for (name, v) in [
            ("n_contexts", self.n_contexts),
            ("n_items_per_context", self.n_items_per_context),
            ("visual_vocab_size", self.visual_vocab_size),
            ("text_vocab_size", self.text_vocab_size),
            ("min_image_len", self.min_image_len),
            ("topic_words_per_context", self.topic_words_per_context),
            ("visual_tokens_per_context", self.visual_tokens_per_context),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_image_len < self.min_image_len {
            return Err(Error::Config(
                "max_image_len must be at least min_image_len".into(),
            ));
        }
        if self.ooc_ratio > 0.0 && self.n_contexts < 2 {
            return Err(Error::Config(
                "out-of-context items need at least two contexts".into(),
            ));
        }
        if self.topic_words_per_context < CAPTION_WORDS {
            return Err(Error::Config(format!(
                "topic_words_per_context must be at least {CAPTION_WORDS}"
            )));
        }
        if self.text_vocab_size < 2 * self.topic_words_per_context {
            return Err(Error::Config(
                "text_vocab_size too small for two distinct contexts".into(),
            ));
        }
        if self.visual_vocab_size < 2 * self.visual_tokens_per_context {
            return Err(Error::Config(
                "visual_vocab_size too small for two distinct contexts".into(),
            ));
        }
        Ok(())
    }

    pub fn total_items(&self) -> usize {
        self.n_contexts * self.n_items_per_context
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<NewsItem>,
    pub val: Vec<NewsItem>,
    pub test: Vec<NewsItem>,
}

impl Corpus {
    pub fn all(&self) -> impl Iterator<Item = &NewsItem> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

const CAPTION_WORDS: usize = 3;
const ENTITY_WORDS: usize = 3;
const SEARCHED_CAPTIONS: usize = 2;

/// Caption skeletons. `{}` slots take context topic words.
const CAPTION_TEMPLATES: [&str; 4] = [
    "{} {} officials gather near {}",
    "crowds in {} watch {} during {}",
    "{} leaders discuss {} at {}",
    "residents of {} protest {} outside {}",
];

/// Filler vocabulary used by the caption skeletons.
pub fn filler_words() -> BTreeSet<String> {
    CAPTION_TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != "{}")
        .map(str::to_string)
        .collect()
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn syllable(i: usize) -> [u8; 2] {
    let n = VOWELS.len();
    [CONSONANTS[(i / n) % CONSONANTS.len()], VOWELS[i % n]]
}

/// Deterministic pseudo-word inventory of the requested size, skipping any
/// word that collides with prompt, rationale or caption filler wording.
pub fn content_vocabulary(size: usize) -> Vec<String> {
    let reserved = prompt::reserved_words();
    let n_syl = CONSONANTS.len() * VOWELS.len();
    let mut out = Vec::with_capacity(size);
    let mut i = 0usize;
    while out.len() < size {
        let mut w = Vec::new();
        w.extend_from_slice(&syllable(i % n_syl));
        w.extend_from_slice(&syllable((i / n_syl) % n_syl));
        if i >= n_syl * n_syl {
            w.extend_from_slice(&syllable(i / (n_syl * n_syl)));
        }
        let w = String::from_utf8(w).expect("ascii");
        if !reserved.contains(&w) {
            out.push(w);
        }
        i += 1;
    }
    out
}

struct Context {
    id: String,
    topics: Vec<String>,
    visual: Vec<u32>,
    neighbour: usize,
}

fn build_world(cfg: &CorpusConfig, rng: &mut ChaCha8Rng) -> Vec<Context> {
    let vocab = content_vocabulary(cfg.text_vocab_size);
    let k = cfg.topic_words_per_context;
    let kv = cfg.visual_tokens_per_context;
    let shared_words = ((cfg.similarity_noise * k as f64).round() as usize).min(k);
    let shared_visual = ((cfg.similarity_noise * kv as f64).round() as usize).min(kv);

    let mut contexts: Vec<Context> = Vec::with_capacity(cfg.n_contexts);
    let mut c = 0;
    while c < cfg.n_contexts {
        let pair = if c + 1 < cfg.n_contexts { 2 } else { 1 };
        let words: Vec<String> = vocab
            .choose_multiple(rng, (2 * k - shared_words).min(vocab.len()))
            .cloned()
            .collect();
        let visual: Vec<u32> = (0..cfg.visual_vocab_size as u32)
            .collect::<Vec<_>>()
            .choose_multiple(rng, 2 * kv - shared_visual)
            .copied()
            .collect();
        for m in 0..pair {
            // Member m gets the shared prefix plus its own private block.
            let own = |all: &[String]| -> Vec<String> {
                let mut v: Vec<String> = all[..shared_words].to_vec();
                let start = shared_words + m * (k - shared_words);
                v.extend_from_slice(&all[start..start + (k - shared_words)]);
                v
            };
            let own_visual = {
                let mut v: Vec<u32> = visual[..shared_visual].to_vec();
                let start = shared_visual + m * (kv - shared_visual);
                v.extend_from_slice(&visual[start..start + (kv - shared_visual)]);
                v
            };
            contexts.push(Context {
                id: format!("ctx-{:04}", c + m),
                topics: own(&words),
                visual: own_visual,
                neighbour: if pair == 2 { c + 1 - m } else { c.saturating_sub(1) },
            });
        }
        c += pair;
    }
    contexts
}

fn render_caption(words: &[String], rng: &mut ChaCha8Rng) -> String {
    let template = CAPTION_TEMPLATES[rng.gen_range(0..CAPTION_TEMPLATES.len())];
    let mut it = words.iter();
    template
        .split_whitespace()
        .map(|w| {
            if w == "{}" {
                it.next().cloned().unwrap_or_default()
            } else {
                w.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn noisy_words(
    ctx: &Context,
    n: usize,
    vocab: &[String],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    ctx.topics
        .choose_multiple(rng, n.min(ctx.topics.len()))
        .map(|w| {
            if rng.gen_bool(noise) {
                vocab[rng.gen_range(0..vocab.len())].clone()
            } else {
                w.clone()
            }
        })
        .collect()
}

/// Generates train/val/test splits. A pure function of `config`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let world = build_world(config, &mut rng);
    let vocab = content_vocabulary(config.text_vocab_size);

    let total = config.total_items();
    let mut slots: Vec<(usize, usize)> = (0..config.n_contexts)
        .flat_map(|c| (0..config.n_items_per_context).map(move |j| (c, j)))
        .collect();
    slots.shuffle(&mut rng);

    let n_test = (config.test_fraction * total as f64).round() as usize;
    let n_val = ((config.val_fraction * total as f64).round() as usize).min(total - n_test);
    let n_train = total - n_val - n_test;

    let mut next_id = 0usize;
    let mut split = |n: usize, offset: usize, rng: &mut ChaCha8Rng| -> Vec<NewsItem> {
        let n_ooc = (config.ooc_ratio * n as f64).round() as usize;
        let mut labels: Vec<bool> = (0..n).map(|i| i < n_ooc).collect();
        labels.shuffle(rng);
        let mut items = Vec::with_capacity(n);
        for (&(c, _), ooc) in slots[offset..offset + n].iter().zip(labels) {
            let caption_ctx = &world[c];
            let image_ctx = if ooc { &world[caption_ctx.neighbour] } else { caption_ctx };

            let caption_words: Vec<String> = caption_ctx
                .topics
                .choose_multiple(rng, CAPTION_WORDS)
                .cloned()
                .collect();
            let caption = render_caption(&caption_words, rng);

            let len = rng.gen_range(config.min_image_len..=config.max_image_len);
            let image = (0..len)
                .map(|_| {
                    if rng.gen_bool(config.evidence_noise) {
                        rng.gen_range(0..config.visual_vocab_size as u32)
                    } else {
                        *image_ctx.visual.choose(rng).expect("non-empty")
                    }
                })
                .collect();

            let visual_entities =
                noisy_words(image_ctx, ENTITY_WORDS, &vocab, config.evidence_noise, rng);
            let searched_captions = (0..SEARCHED_CAPTIONS)
                .map(|_| {
                    let w = noisy_words(image_ctx, CAPTION_WORDS, &vocab, config.evidence_noise, rng);
                    render_caption(&w, rng)
                })
                .collect();

            items.push(NewsItem {
                id: format!("item-{next_id:05}"),
                image,
                caption,
                evidence: Evidence {
                    visual_entities,
                    searched_captions,
                    searched_images: Vec::new(),
                },
                gold_label: Some(if ooc { Label::OutOfContext } else { Label::Pristine }),
                context_id: Some(caption_ctx.id.clone()),
                image_context_id: Some(image_ctx.id.clone()),
            });
            next_id += 1;
        }
        items
    };

    let train = split(n_train, 0, &mut rng);
    let val = split(n_val, n_train, &mut rng);
    let test = split(n_test, n_train + n_val, &mut rng);
    Ok(Corpus { train, val, test })
}

/// Difficulty in [0, 1] from lexical agreement between caption and evidence.
///
/// A pristine item whose evidence shares no caption words is hard, and so
/// is an out-of-context item whose evidence shares many. `None` when the
/// gold label is unknown.
pub fn item_difficulty(item: &NewsItem) -> Option<f64> {
    let gold = item.gold_label?;
    let filler = filler_words();
    let caption: BTreeSet<String> = prompt::words(&item.caption)
        .into_iter()
        .filter(|w| !filler.contains(w))
        .collect();
    if caption.is_empty() {
        return Some(0.5);
    }
    let evidence: BTreeSet<String> = item
        .evidence
        .visual_entities
        .iter()
        .chain(&item.evidence.searched_captions)
        .flat_map(|s| prompt::words(s))
        .collect();
    let overlap = caption.intersection(&evidence).count() as f64 / caption.len() as f64;
    Some(match gold {
        Label::Pristine => 1.0 - overlap,
        Label::OutOfContext => overlap,
    })
}

/// Reads NewsCLIPpings-style JSONL, preserving line order.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<NewsItem>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno,
                message: e.to_string(),
            })?;
        let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
            path: path.to_path_buf(),
            line: lineno,
            message: "expected a JSON object".into(),
        })?;
        if let Some(field) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(Error::MissingField {
                path: path.to_path_buf(),
                line: lineno,
                field: field.to_string(),
            });
        }
        let record: ItemRecord =
            serde_json::from_value(value).map_err(|e| Error::MalformedLine {
                path: path.to_path_buf(),
                line: lineno,
                message: e.to_string(),
            })?;
        items.push(record.into());
    }
    Ok(items)
}

pub fn write_jsonl(path: impl AsRef<Path>, items: &[NewsItem]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &ItemRecord::from(item))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
