//! Story-level train/validation/test partitioning with an overlap audit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{PreprocessError, WindowedSample};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(rename = "train")]
    pub train_stories: Vec<String>,
    #[serde(rename = "val")]
    pub val_stories: Vec<String>,
    #[serde(rename = "test")]
    pub test_stories: Vec<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            train_stories: v(&["easy money", "the black willow"]),
            val_stories: v(&["lw1"]),
            test_stories: v(&["cable spool fort"]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    /// Checks that no story is listed twice.
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let mut seen = BTreeSet::new();
        for s in self.stories() {
            if !seen.insert(s) {
                return Err(PreprocessError::DuplicateStory(s.to_string()));
            }
        }
        Ok(())
    }

    fn stories(&self) -> impl Iterator<Item = &str> {
        self.train_stories
            .iter()
            .chain(&self.val_stories)
            .chain(&self.test_stories)
            .map(String::as_str)
    }

    pub fn partition_of(&self, story: &str) -> Option<Partition> {
        let has = |v: &[String]| v.iter().any(|s| s == story);
        if has(&self.train_stories) {
            Some(Partition::Train)
        } else if has(&self.val_stories) {
            Some(Partition::Val)
        } else if has(&self.test_stories) {
            Some(Partition::Test)
        } else {
            None
        }
    }
}

/// Transcript overlap between the train and test partitions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapAudit {
    /// Distinct test transcripts that also occur verbatim in train.
    pub overlapping_sentences: usize,
    pub test_sentences: usize,
    /// Distinct test words also seen in train transcripts.
    pub overlapping_words: usize,
    pub test_words: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<WindowedSample>,
    pub val: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub audit: OverlapAudit,
}

fn sentence_key(t: &str) -> String {
    t.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn transcripts(samples: &[WindowedSample]) -> BTreeSet<String> {
    samples
        .iter()
        .filter_map(|s| s.transcript.as_deref())
        .map(sentence_key)
        .filter(|s| !s.is_empty())
        .collect()
}

fn vocabulary(sentences: &BTreeSet<String>) -> BTreeSet<&str> {
    sentences.iter().flat_map(|s| s.split(' ')).collect()
}

pub fn audit_overlap(train: &[WindowedSample], test: &[WindowedSample]) -> OverlapAudit {
    let tr = transcripts(train);
    let te = transcripts(test);
    let (tr_words, te_words) = (vocabulary(&tr), vocabulary(&te));
    OverlapAudit {
        overlapping_sentences: te.intersection(&tr).count(),
        test_sentences: te.len(),
        overlapping_words: te_words.intersection(&tr_words).count(),
        test_words: te_words.len(),
    }
}

/// Partitions samples by story id, preserving input order in each list.
pub fn split_dataset(
    samples: Vec<WindowedSample>,
    spec: &SplitSpec,
) -> Result<DatasetSplit, PreprocessError> {
    spec.validate()?;
    let mut out = DatasetSplit::default();
    for s in samples {
        match spec.partition_of(&s.story_id) {
            Some(Partition::Train) => out.train.push(s),
            Some(Partition::Val) => out.val.push(s),
            Some(Partition::Test) => out.test.push(s),
            None => return Err(PreprocessError::UnknownStory(s.story_id)),
        }
    }
    out.audit = audit_overlap(&out.train, &out.test);
    Ok(out)
}
