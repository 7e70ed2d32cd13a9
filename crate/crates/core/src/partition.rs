//! Consensus partitioning, annotation budgeting, and construction of the
//! Stage-1 targets and Stage-2 preference pairs.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, NewsItem};
use crate::error::{Error, Result};
use crate::prompt::{build_prompt, PromptVariant};
use crate::teacher::{KnowledgeSet, TeacherRecord};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusPartition {
    pub agree: Vec<String>,
    pub conflict: Vec<String>,
}

impl ConsensusPartition {
    pub fn total(&self) -> usize {
        self.agree.len() + self.conflict.len()
    }

    pub fn budget(&self) -> BudgetReport {
        let total = self.total();
        BudgetReport {
            total,
            conflict: self.conflict.len(),
            fraction: if total == 0 {
                0.0
            } else {
                self.conflict.len() as f64 / total as f64
            },
        }
    }
}

/// How many gold labels the pipeline asked for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total: usize,
    pub conflict: usize,
    pub fraction: f64,
}

/// Gold labels obtained for conflict items.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Annotations {
    pub labels: BTreeMap<String, Label>,
    /// Number of label requests issued.
    pub requests: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTarget {
    pub item_id: String,
    pub image_tokens: Vec<u32>,
    pub prompt_text: String,
    /// Verdict sentence followed by the rationale.
    pub target_text: String,
    pub source_teacher: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoPair {
    pub item_id: String,
    pub image_tokens: Vec<u32>,
    pub prompt_text: String,
    /// Correct teacher's response (y_w).
    pub preferred: String,
    /// Incorrect teacher's response (y_l).
    pub rejected: String,
}

fn two_teachers(ks: &KnowledgeSet) -> Result<(&str, &str)> {
    match ks.teacher_names.as_slice() {
        [a, b] => Ok((a, b)),
        names => Err(Error::Unsupported(format!(
            "consensus partitioning needs exactly two teachers, found {}",
            names.len()
        ))),
    }
}

fn pair_for<'a>(ks: &'a KnowledgeSet, id: &str) -> Result<(&'a TeacherRecord, &'a TeacherRecord)> {
    let (a, b) = two_teachers(ks)?;
    match (ks.get(id, a), ks.get(id, b)) {
        (Some(x), Some(y)) => Ok((x, y)),
        _ => Err(Error::Incomplete(id.to_string())),
    }
}

/// Items on which both teachers predict the same label go to `agree`,
/// the rest to `conflict`.
pub fn partition_by_consensus(ks: &KnowledgeSet) -> Result<ConsensusPartition> {
    two_teachers(ks)?;
    let mut out = ConsensusPartition::default();
    for id in ks.records.keys() {
        let (x, y) = pair_for(ks, id)?;
        if x.predicted_label == y.predicted_label {
            out.agree.push(id.clone());
        } else {
            out.conflict.push(id.clone());
        }
    }
    Ok(out)
}

/// Requests gold labels for the conflict items only.
pub fn request_annotations<F>(partition: &ConsensusPartition, mut label_source: F) -> Result<Annotations>
where
    F: FnMut(&str) -> Option<Label>,
{
    let mut out = Annotations::default();
    for id in &partition.conflict {
        out.requests += 1;
        let label = label_source(id).ok_or_else(|| Error::MissingAnnotation(id.clone()))?;
        out.labels.insert(id.clone(), label);
    }
    Ok(out)
}

/// Gold labels of the given items, for synthetic runs.
pub fn gold_labels(items: &[NewsItem]) -> HashMap<String, Label> {
    items
        .iter()
        .filter_map(|i| i.gold_label.map(|l| (i.id.clone(), l)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    item_id: String,
    label: Label,
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<HashMap<String, Label>> {
    let path = path.as_ref();
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnnotationLine = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(a.item_id, a.label);
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, labels: &BTreeMap<String, Label>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, &label) in labels {
        serde_json::to_writer(
            &mut w,
            &AnnotationLine {
                item_id: id.clone(),
                label,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn index_items(items: &[NewsItem]) -> HashMap<&str, &NewsItem> {
    items.iter().map(|i| (i.id.as_str(), i)).collect()
}

/// Returns (correct, incorrect) records for a conflict item.
fn split_by_gold<'a>(
    ks: &'a KnowledgeSet,
    annotations: &Annotations,
    id: &str,
) -> Result<(&'a TeacherRecord, &'a TeacherRecord)> {
    let gold = *annotations
        .labels
        .get(id)
        .ok_or_else(|| Error::MissingAnnotation(id.to_string()))?;
    let (x, y) = pair_for(ks, id)?;
    if x.predicted_label == gold && y.predicted_label != gold {
        Ok((x, y))
    } else if y.predicted_label == gold && x.predicted_label != gold {
        Ok((y, x))
    } else {
        Err(Error::Consistency(id.to_string()))
    }
}

/// Conflict items whose teacher answers did not parse cleanly. They carry
/// no usable supervision and are dropped from both stages.
fn unusable_conflicts(ks: &KnowledgeSet, partition: &ConsensusPartition) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for id in &partition.conflict {
        let (x, y) = pair_for(ks, id)?;
        if !x.parse_ok || !y.parse_ok {
            out.push(id.clone());
        }
    }
    Ok(out)
}

/// One supervised target per item.
///
/// Agree items take the primary teacher's output; conflict items take the
/// output of the teacher that matches the annotation.
pub fn stage1_targets(
    items: &[NewsItem],
    ks: &KnowledgeSet,
    partition: &ConsensusPartition,
    annotations: &Annotations,
    primary_teacher: &str,
    variant: PromptVariant,
) -> Result<Vec<StageTarget>> {
    if !ks.teacher_names.iter().any(|n| n == primary_teacher) {
        return Err(Error::Config(format!(
            "primary teacher `{primary_teacher}` is not among {:?}",
            ks.teacher_names
        )));
    }
    let conflict: HashMap<&str, ()> = partition.conflict.iter().map(|s| (s.as_str(), ())).collect();
    let unusable = unusable_conflicts(ks, partition)?;
    let mut skipped = 0usize;
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        if unusable.contains(&item.id) {
            skipped += 1;
            continue;
        }
        let record = if conflict.contains_key(item.id.as_str()) {
            split_by_gold(ks, annotations, &item.id)?.0
        } else {
            let (x, y) = pair_for(ks, &item.id)?;
            let (primary, other) = if x.teacher_name == primary_teacher { (x, y) } else { (y, x) };
            if primary.parse_ok {
                primary
            } else if other.parse_ok {
                other
            } else {
                skipped += 1;
                continue;
            }
        };
        out.push(StageTarget {
            item_id: item.id.clone(),
            image_tokens: item.image.clone(),
            prompt_text: build_prompt(item, variant).text,
            target_text: record.raw_response.clone(),
            source_teacher: record.teacher_name.clone(),
        });
    }
    if skipped > 0 {
        log::info!("stage-1 targets: skipped {skipped} item(s) with unparseable teacher output");
    }
    Ok(out)
}

/// One (preferred, rejected) pair per usable conflict item.
pub fn build_dpo_pairs(
    items: &[NewsItem],
    ks: &KnowledgeSet,
    partition: &ConsensusPartition,
    annotations: &Annotations,
    variant: PromptVariant,
) -> Result<Vec<DpoPair>> {
    let by_id = index_items(items);
    let unusable = unusable_conflicts(ks, partition)?;
    if !unusable.is_empty() {
        log::info!("dpo pairs: skipped {} conflict item(s) with unparseable teacher output", unusable.len());
    }
    let mut out = Vec::with_capacity(partition.conflict.len());
    for id in &partition.conflict {
        if unusable.contains(id) {
            continue;
        }
        let Some(item) = by_id.get(id.as_str()) else {
            continue;
        };
        let (good, bad) = split_by_gold(ks, annotations, id)?;
        out.push(DpoPair {
            item_id: id.clone(),
            image_tokens: item.image.clone(),
            prompt_text: build_prompt(item, variant).text,
            preferred: good.raw_response.clone(),
            rejected: bad.raw_response.clone(),
        });
    }
    Ok(out)
}

/// Stage-2 supervised targets, aligned one-to-one with `pairs`: the target
/// is the preferred (correct teacher's) response.
pub fn stage2_targets(pairs: &[DpoPair], ks: &KnowledgeSet) -> Vec<StageTarget> {
    pairs
        .iter()
        .map(|p| StageTarget {
            item_id: p.item_id.clone(),
            image_tokens: p.image_tokens.clone(),
            prompt_text: p.prompt_text.clone(),
            target_text: p.preferred.clone(),
            source_teacher: ks
                .records
                .get(&p.item_id)
                .and_then(|rs| rs.iter().find(|r| r.raw_response == p.preferred))
                .map(|r| r.teacher_name.clone())
                .unwrap_or_default(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Evidence;
    use crate::prompt::{parse_response, render_response};

    fn rec(id: &str, teacher: &str, label: Label) -> TeacherRecord {
        let raw = render_response(label, &format!("{teacher} says so."));
        TeacherRecord {
            item_id: id.into(),
            teacher_name: teacher.into(),
            predicted_label: label,
            rationale: format!("{teacher} says so."),
            raw_response: raw,
            parse_ok: true,
        }
    }

    fn item(id: &str, gold: Label) -> NewsItem {
        NewsItem {
            id: id.into(),
            image: vec![1],
            caption: format!("caption {id}"),
            evidence: Evidence::default(),
            gold_label: Some(gold),
            context_id: None,
            image_context_id: None,
        }
    }

    use Label::{OutOfContext as Ooc, Pristine as Pri};

    /// (id, gold, T1 label, T2 label)
    fn fixture(rows: &[(&str, Label, Label, Label)]) -> (Vec<NewsItem>, KnowledgeSet) {
        let items = rows.iter().map(|r| item(r.0, r.1)).collect();
        let ks = KnowledgeSet::from_records(
            vec!["T1".into(), "T2".into()],
            rows.iter()
                .flat_map(|r| [rec(r.0, "T1", r.2), rec(r.0, "T2", r.3)]),
        );
        (items, ks)
    }

    #[test]
    fn consensus_split() {
        let (_, ks) = fixture(&[("a", Ooc, Ooc, Ooc), ("b", Ooc, Ooc, Pri), ("c", Pri, Pri, Pri)]);
        let p = partition_by_consensus(&ks).unwrap();
        assert_eq!(p.agree, ["a", "c"]);
        assert_eq!(p.conflict, ["b"]);
    }

    #[test]
    fn incomplete_knowledge_is_an_error() {
        let (_, mut ks) = fixture(&[("a", Ooc, Ooc, Ooc)]);
        ks.records.get_mut("a").unwrap().pop();
        assert!(matches!(partition_by_consensus(&ks), Err(Error::Incomplete(id)) if id == "a"));
    }

    #[test]
    fn more_than_two_teachers_is_unsupported() {
        let ks = KnowledgeSet::new(vec!["a".into(), "b".into(), "c".into()]);
        assert!(matches!(partition_by_consensus(&ks), Err(Error::Unsupported(_))));
    }

    #[test]
    fn annotations_cover_exactly_the_conflicts() {
        let (items, ks) = fixture(&[("a", Ooc, Ooc, Pri), ("b", Pri, Pri, Pri), ("c", Pri, Ooc, Pri)]);
        let p = partition_by_consensus(&ks).unwrap();
        let gold = gold_labels(&items);
        let mut asked = Vec::new();
        let ann = request_annotations(&p, |id| {
            asked.push(id.to_string());
            gold.get(id).copied()
        })
        .unwrap();
        assert_eq!(asked, ["a", "c"]);
        assert_eq!(ann.requests, 2);
        assert_eq!(ann.labels.len(), 2);
        assert_eq!(p.budget().conflict, 2);
    }

    #[test]
    fn zero_conflicts_cost_nothing() {
        let (_, ks) = fixture(&[("a", Ooc, Ooc, Ooc)]);
        let p = partition_by_consensus(&ks).unwrap();
        let ann = request_annotations(&p, |_| None).unwrap();
        assert_eq!(ann.requests, 0);
        assert!(ann.labels.is_empty());
        assert_eq!(p.budget().fraction, 0.0);
    }

    #[test]
    fn missing_annotation_is_an_error() {
        let (_, ks) = fixture(&[("a", Ooc, Ooc, Pri)]);
        let p = partition_by_consensus(&ks).unwrap();
        assert!(matches!(
            request_annotations(&p, |_| None),
            Err(Error::MissingAnnotation(_))
        ));
    }

    #[test]
    fn stage1_picks_primary_or_correct_teacher() {
        let (items, ks) = fixture(&[("a", Pri, Ooc, Ooc), ("b", Ooc, Ooc, Pri), ("c", Pri, Ooc, Pri)]);
        let p = partition_by_consensus(&ks).unwrap();
        let gold = gold_labels(&items);
        let ann = request_annotations(&p, |id| gold.get(id).copied()).unwrap();
        let t = stage1_targets(&items, &ks, &p, &ann, "T2", PromptVariant::default()).unwrap();
        assert_eq!(t.len(), items.len());
        let src: Vec<_> = t.iter().map(|t| t.source_teacher.as_str()).collect();
        // a: agree, primary T2. b: gold 1, T1 right. c: gold 0, T2 right.
        assert_eq!(src, ["T2", "T1", "T2"]);
        for target in &t {
            assert!(parse_response(&target.target_text).is_ok());
        }
    }

    #[test]
    fn dpo_pairs_prefer_the_correct_teacher() {
        let (items, ks) = fixture(&[("a", Pri, Pri, Ooc), ("b", Pri, Pri, Pri)]);
        let p = partition_by_consensus(&ks).unwrap();
        let gold = gold_labels(&items);
        let ann = request_annotations(&p, |id| gold.get(id).copied()).unwrap();
        let pairs = build_dpo_pairs(&items, &ks, &p, &ann, PromptVariant::default()).unwrap();
        assert_eq!(pairs.len(), p.conflict.len());
        assert_eq!(pairs[0].preferred, ks.get("a", "T1").unwrap().raw_response);
        assert_eq!(pairs[0].rejected, ks.get("a", "T2").unwrap().raw_response);
        let targets = stage2_targets(&pairs, &ks);
        assert_eq!(targets[0].source_teacher, "T1");
        assert_eq!(targets[0].target_text, pairs[0].preferred);
    }

    #[test]
    fn unparseable_conflicts_are_excluded() {
        let (items, mut ks) = fixture(&[("a", Pri, Pri, Ooc), ("b", Ooc, Pri, Ooc)]);
        ks.records.get_mut("a").unwrap()[1].parse_ok = false;
        let p = partition_by_consensus(&ks).unwrap();
        let gold = gold_labels(&items);
        let ann = request_annotations(&p, |id| gold.get(id).copied()).unwrap();
        let pairs = build_dpo_pairs(&items, &ks, &p, &ann, PromptVariant::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        let t = stage1_targets(&items, &ks, &p, &ann, "T1", PromptVariant::default()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].item_id, "b");
    }

    #[test]
    fn annotation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let labels: BTreeMap<_, _> = [("x".to_string(), Ooc), ("y".to_string(), Pri)].into();
        write_annotations(&path, &labels).unwrap();
        let back = read_annotations(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["x"], Ooc);
    }
}
