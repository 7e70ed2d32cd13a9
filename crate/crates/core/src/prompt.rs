//! Evidence-augmented prompt construction and verdict parsing.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{filler_words, Label, NewsItem};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptVariant {
    CaptionOnly,
    Entities,
    SearchedCaptions,
    #[default]
    EntitiesAndCaptions,
    EntitiesCaptionsAndImages,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 5] = [
        PromptVariant::CaptionOnly,
        PromptVariant::Entities,
        PromptVariant::SearchedCaptions,
        PromptVariant::EntitiesAndCaptions,
        PromptVariant::EntitiesCaptionsAndImages,
    ];
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown prompt variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub item_id: String,
    pub variant: PromptVariant,
}

const QUESTION: &str =
    "Does the following text description and the attached image come from the same news post?";

const RESPOND: &str = "Please respond with 'yes, the image is rightly used' if there is a semantic match between the text description and the attached image, or 'no' if there are semantic inconsistencies.";

const REASON: &str = "Please also give your reason.";

const CAPTION_ONLY_RESPOND: &str = "Please respond with 'yes' if there is a semantic match and 'no' if there are semantic inconsistencies.";

const ENTITIES_INTRO: &str = "I'll give you the visual entities detected from the attached image. But if the visual entities is not useful or is None, just ignore it and give your own prediction.";

const CAPTIONS_INTRO: &str = "To help with your judgment, I'll give you the searched captions of the attached image. The searched captions are separated by '<and>'. However, if the searched captions is not useful or is empty, just ignore it and give your own prediction.";

const BOTH_INTRO: &str = "To help with your judgment, I'll give you the visual entities detected from the attached image and the searched captions of the attached image. The searched captions are separated by '<and>'. However, if the visual entities or the searched captions is not useful or is empty, just ignore it and give your own prediction.";

const ALL_INTRO: &str = "To help with your judgment, I'll give you the visual entities detected from the attached image, the searched captions of the attached image, and the searched images of the text description. The searched captions are separated by '<and>'. The searched images are presented in the format of text and are separated by '<and>'. However, if the visual entities or the searched captions or the searched images is not useful or is empty, just ignore it and give your own prediction.";

/// Canonical verdict sentences the prompt asks for.
pub const YES_VERDICT: &str = "yes, the image is rightly used.";
pub const NO_VERDICT: &str = "no.";

fn join_or_none(parts: &[String], sep: &str) -> String {
    if parts.is_empty() {
        "None".to_string()
    } else {
        parts.join(sep)
    }
}

/// Fills the selected template with the item's caption and evidence.
///
/// Entities are joined by `", "` and searched captions by `" <and> "`;
/// an empty list renders as `None`. The image travels separately as the
/// item's visual-token prefix.
pub fn build_prompt(item: &NewsItem, variant: PromptVariant) -> PromptText {
    let ev = &item.evidence;
    let entities = format!("Visual entities: {}", join_or_none(&ev.visual_entities, ", "));
    let captions = format!(
        "Searched captions: {}",
        join_or_none(&ev.searched_captions, " <and> ")
    );
    let images = format!(
        "Searched images: {}",
        join_or_none(&ev.searched_images, " <and> ")
    );
    let description = format!("Text description: {}", item.caption);

    let text = match variant {
        PromptVariant::CaptionOnly => {
            format!("{QUESTION} {CAPTION_ONLY_RESPOND} {description}")
        }
        PromptVariant::Entities => [
            format!("{QUESTION} {ENTITIES_INTRO}"),
            RESPOND.to_string(),
            REASON.to_string(),
            entities,
            description,
        ]
        .join("\n\n"),
        PromptVariant::SearchedCaptions => [
            format!("{QUESTION} {CAPTIONS_INTRO}"),
            RESPOND.to_string(),
            REASON.to_string(),
            captions,
            description,
        ]
        .join("\n\n"),
        PromptVariant::EntitiesAndCaptions => [
            format!("{QUESTION} {BOTH_INTRO}"),
            RESPOND.to_string(),
            REASON.to_string(),
            entities,
            captions,
            description,
        ]
        .join("\n\n"),
        PromptVariant::EntitiesCaptionsAndImages => [
            format!("{QUESTION} {ALL_INTRO}"),
            RESPOND.to_string(),
            REASON.to_string(),
            entities,
            captions,
            images,
            description,
        ]
        .join("\n\n"),
    };
    PromptText {
        text,
        item_id: item.id.clone(),
        variant,
    }
}

/// Canonical response text for a verdict followed by a rationale.
pub fn render_response(label: Label, rationale: &str) -> String {
    let verdict = match label {
        Label::Pristine => YES_VERDICT,
        Label::OutOfContext => NO_VERDICT,
    };
    if rationale.trim().is_empty() {
        verdict.to_string()
    } else {
        format!("{verdict} {}", rationale.trim())
    }
}

fn word_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[a-z0-9]+").expect("valid regex"))
}

/// Lower-cased alphanumeric words of `text`.
pub fn words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    word_regex()
        .find_iter(&lower)
        .map(|m| m.as_str().to_string())
        .collect()
}

const VERDICT_WINDOW: usize = 10;

/// Splits a free-text answer into its verdict and rationale.
///
/// Only the first sentence is inspected: the first `yes` or `no` among its
/// first ten words decides the label. `yes` binds to a semantic match
/// (pristine), `no` to out-of-context.
pub fn parse_response(text: &str) -> Result<(Label, String)> {
    let trimmed = text.trim();
    let fail = || Error::ParseFailure {
        raw: text.to_string(),
    };
    if trimmed.is_empty() {
        return Err(fail());
    }
    let end = trimmed
        .find(['.', '!', '?', '\n'])
        .unwrap_or(trimmed.len());
    let (first, rest) = trimmed.split_at(end);
    let label = words(first)
        .into_iter()
        .take(VERDICT_WINDOW)
        .find_map(|w| match w.as_str() {
            "yes" => Some(Label::Pristine),
            "no" => Some(Label::OutOfContext),
            _ => None,
        })
        .ok_or_else(fail)?;
    let rationale = rest
        .get(1..)
        .unwrap_or("")
        .trim_start_matches(['.', '!', '?'])
        .trim()
        .to_string();
    Ok((label, rationale))
}

/// Words used by prompt templates, verdicts, rationales and caption filler.
/// Synthetic content words must avoid these.
pub fn reserved_words() -> BTreeSet<String> {
    let mut out: BTreeSet<String> = [
        QUESTION,
        RESPOND,
        REASON,
        CAPTION_ONLY_RESPOND,
        ENTITIES_INTRO,
        CAPTIONS_INTRO,
        BOTH_INTRO,
        ALL_INTRO,
        YES_VERDICT,
        NO_VERDICT,
        "Visual entities Searched captions Searched images Text description None and",
    ]
    .iter()
    .flat_map(|s| words(s))
    .collect();
    out.extend(crate::teacher::rationale_words());
    out.extend(filler_words());
    out
}
