//! Chat-style instruction records for the six ordered modality pairs over
//! neural signal ("eg"), speech and text, with chatml JSON-lines I/O.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Codec;
use crate::preprocess::WindowedSample;
use crate::rng::{fnv1a, seeded};
use crate::signal::{NeuralSignal, SignalHeader};
use crate::tokens::{
    default_channel_names, serialize_neural, serialize_speech, tokenize_signal, TokenError, VocabRegistry,
};

pub const SYSTEM_PROMPT: &str = "You are a helpful assistant named NeuGPT. You can understand and produce \
                                 neural signals, and you can interact with speech and text modalities.";

/// Lead-in placed between the instruction and the source payload.
pub const INPUT_LEAD: &str = "This is the input:";

/// Lead-in of the pretraining conversations, which use a shorter phrase
/// separated by spaces.
pub const PRETRAIN_INPUT_LEAD: &str = "This is input:";

const DEFAULT_TEMPLATES: &str = include_str!("../data/templates.json");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no modality pairs requested")]
    EmptyPairs,
    #[error("unknown modality pair {0:?} (expected one of {all})", all = PairTag::ALL.map(PairTag::as_str).join(", "))]
    UnknownPair(String),
    #[error("template pool: {0}")]
    Templates(String),
    #[error("{path}, line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Token(#[from] TokenError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Eg,
    Speech,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Eg => "eg",
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }
}

/// An ordered (source, target) pair of distinct modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PairTag {
    EgToText,
    TextToEg,
    EgToSpeech,
    SpeechToEg,
    SpeechToText,
    TextToSpeech,
}

impl PairTag {
    pub const ALL: [PairTag; 6] = [
        PairTag::EgToText,
        PairTag::TextToEg,
        PairTag::EgToSpeech,
        PairTag::SpeechToEg,
        PairTag::SpeechToText,
        PairTag::TextToSpeech,
    ];

    pub fn new(source: Modality, target: Modality) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.source() == source && p.target() == target)
    }

    pub fn source(self) -> Modality {
        match self {
            PairTag::EgToText | PairTag::EgToSpeech => Modality::Eg,
            PairTag::TextToEg | PairTag::TextToSpeech => Modality::Text,
            PairTag::SpeechToEg | PairTag::SpeechToText => Modality::Speech,
        }
    }

    pub fn target(self) -> Modality {
        match self {
            PairTag::TextToEg | PairTag::SpeechToEg => Modality::Eg,
            PairTag::EgToText | PairTag::SpeechToText => Modality::Text,
            PairTag::EgToSpeech | PairTag::TextToSpeech => Modality::Speech,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairTag::EgToText => "eg->text",
            PairTag::TextToEg => "text->eg",
            PairTag::EgToSpeech => "eg->speech",
            PairTag::SpeechToEg => "speech->eg",
            PairTag::SpeechToText => "speech->text",
            PairTag::TextToSpeech => "text->speech",
        }
    }

    pub fn involves(self, m: Modality) -> bool {
        self.source() == m || self.target() == m
    }
}

impl fmt::Display for PairTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts `eg->text`, `eg→text` and `eg2text`, case-insensitively.
impl FromStr for PairTag {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_lowercase();
        let (src, dst) = ["->", "→", "2"]
            .iter()
            .find_map(|sep| lower.split_once(sep))
            .ok_or_else(|| PromptError::UnknownPair(s.to_string()))?;
        let modality = |m: &str| match m {
            "eg" => Some(Modality::Eg),
            "speech" => Some(Modality::Speech),
            "text" => Some(Modality::Text),
            _ => None,
        };
        modality(src)
            .zip(modality(dst))
            .and_then(|(a, b)| PairTag::new(a, b))
            .ok_or_else(|| PromptError::UnknownPair(s.to_string()))
    }
}

impl Serialize for PairTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for PairTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// One conversation: system prompt, user turn, assistant turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub messages: Vec<Message>,
    pub pair: PairTag,
}

impl PromptRecord {
    /// Checks the message layout: exactly system, user, assistant.
    pub fn validate(&self) -> Result<(), String> {
        let roles: Vec<Role> = self.messages.iter().map(|m| m.role).collect();
        if roles != [Role::System, Role::User, Role::Assistant] {
            return Err(format!("expected roles [system, user, assistant], found {roles:?}"));
        }
        Ok(())
    }

    pub fn user(&self) -> &str {
        &self.messages[1].content
    }

    pub fn assistant(&self) -> &str {
        &self.messages[2].content
    }

    /// Plain-text view, one `role: content` block per message.
    pub fn render(&self) -> String {
        self.messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                format!("{role}: {}", m.content)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// How the instruction and the source payload are joined in the user turn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    /// `instruction`, newline, `This is the input:`, payload.
    #[default]
    FineTune,
    /// `instruction This is input: payload`.
    Pretrain,
}

/// Assembles a record from an explicit instruction.
pub fn compose_prompt(pair: PairTag, instruction: &str, style: PromptStyle, source: &str, target: &str) -> PromptRecord {
    let user = match style {
        PromptStyle::FineTune => format!("{instruction}\n{INPUT_LEAD}{source}"),
        PromptStyle::Pretrain => format!("{instruction} {PRETRAIN_INPUT_LEAD} {source}"),
    };
    let message = |role, content: String| Message { role, content };
    PromptRecord {
        messages: vec![
            message(Role::System, SYSTEM_PROMPT.to_string()),
            message(Role::User, user),
            message(Role::Assistant, target.to_string()),
        ],
        pair,
    }
}

/// Instruction paraphrases per pair, loaded from a JSON object mapping
/// pair names to lists of strings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplatePool {
    templates: BTreeMap<PairTag, Vec<String>>,
}

impl TemplatePool {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| PromptError::Templates(e.to_string()))?;
        let mut templates = BTreeMap::new();
        for (key, list) in raw {
            let pair: PairTag = key.parse()?;
            if list.iter().any(|t| t.trim().is_empty()) {
                return Err(PromptError::Templates(format!("{pair}: empty template")));
            }
            if templates.insert(pair, list).is_some() {
                return Err(PromptError::Templates(format!("{pair} listed twice")));
            }
        }
        let missing: Vec<&str> = PairTag::ALL
            .iter()
            .filter(|p| templates.get(p).is_none_or(Vec::is_empty))
            .map(|p| p.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(PromptError::Templates(format!("no templates for {}", missing.join(", "))));
        }
        Ok(Self { templates })
    }

    pub fn read(path: &Path) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn templates(&self, pair: PairTag) -> &[String] {
        &self.templates[&pair]
    }

    /// The template used for `pair` under `seed`.
    pub fn choose(&self, pair: PairTag, seed: u64) -> &str {
        let list = self.templates(pair);
        let mut rng = seeded(seed ^ fnv1a(pair.as_str().as_bytes()));
        &list[rng.random_range(0..list.len())]
    }

    pub fn build(&self, pair: PairTag, source: &str, target: &str, seed: u64) -> PromptRecord {
        compose_prompt(pair, self.choose(pair, seed), PromptStyle::FineTune, source, target)
    }
}

impl Default for TemplatePool {
    fn default() -> Self {
        static POOL: OnceLock<TemplatePool> = OnceLock::new();
        POOL.get_or_init(|| TemplatePool::from_json(DEFAULT_TEMPLATES).expect("bundled templates are valid"))
            .clone()
    }
}

/// A record for `pair` with an instruction drawn from the bundled pool.
pub fn build_prompt(pair: PairTag, source: &str, target: &str, seed: u64) -> PromptRecord {
    TemplatePool::default().build(pair, source, target, seed)
}

/// Counts from [`build_dataset`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub windows: usize,
    pub records: usize,
    /// Records per pair.
    pub built: BTreeMap<PairTag, usize>,
    /// Windows skipped per pair because a payload was missing.
    pub skipped: BTreeMap<PairTag, usize>,
}

fn window_signal(w: &WindowedSample) -> Result<NeuralSignal, TokenError> {
    let (channels, len) = w.signal.dim();
    let header = SignalHeader::new(w.sample_rate_hz, default_channel_names(channels), len);
    Ok(NeuralSignal::new(header, w.signal.clone())?)
}

/// Builds one record per (window, requested pair) whose payloads exist.
///
/// Neural payloads come from tokenizing the window with `codec`; text is
/// the window transcript and speech its precomputed unit codes. Records
/// are ordered by window, then by the order of `pairs`.
pub fn build_dataset(
    windows: &[WindowedSample],
    codec: &Codec,
    registry: &VocabRegistry,
    pairs: &[PairTag],
    pool: &TemplatePool,
    seed: u64,
) -> Result<(Vec<PromptRecord>, DatasetSummary), PromptError> {
    if pairs.is_empty() {
        return Err(PromptError::EmptyPairs);
    }
    let per_window = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| -> Result<Vec<Result<PromptRecord, PairTag>>, PromptError> {
            let text = w.transcript.clone().filter(|t| !t.trim().is_empty());
            let speech = match &w.speech_codes {
                Some(codes) if !codes.is_empty() => Some(serialize_speech(codes, registry)?),
                _ => None,
            };
            let available = |m: Modality| match m {
                Modality::Text => text.is_some(),
                Modality::Speech => speech.is_some(),
                Modality::Eg => true,
            };
            let feasible = |p: PairTag| available(p.source()) && available(p.target());
            let eg = if pairs.iter().any(|&p| p.involves(Modality::Eg) && feasible(p)) {
                let tokens = tokenize_signal(&window_signal(w)?, codec, registry)?;
                Some(serialize_neural(&tokens.tokens, registry)?)
            } else {
                None
            };
            let payload = |m: Modality| match m {
                Modality::Text => text.as_deref(),
                Modality::Speech => speech.as_deref(),
                Modality::Eg => eg.as_deref(),
            };
            Ok(pairs
                .iter()
                .map(|&p| match (payload(p.source()), payload(p.target())) {
                    (Some(src), Some(dst)) if feasible(p) => {
                        let record_seed = seed ^ fnv1a(format!("{i}:{p}").as_bytes());
                        Ok(pool.build(p, src, dst, record_seed))
                    }
                    _ => Err(p),
                })
                .collect())
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut summary = DatasetSummary {
        windows: windows.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for outcome in per_window.into_iter().flatten() {
        match outcome {
            Ok(r) => {
                *summary.built.entry(r.pair).or_default() += 1;
                records.push(r);
            }
            Err(p) => *summary.skipped.entry(p).or_default() += 1,
        }
    }
    summary.records = records.len();
    Ok((records, summary))
}

/// One JSON object per line: `{"messages": [...], "pair": "eg->text"}`.
pub fn write_chatml_jsonl(records: &[PromptRecord], path: &Path) -> Result<(), PromptError> {
    let io_err = |source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(f, "{line}").map_err(io_err)?;
    }
    f.flush().map_err(io_err)
}

/// Inverse of [`write_chatml_jsonl`]. Blank lines are ignored; any other
/// line that is not a valid record is an error naming its 1-based number.
pub fn read_chatml_jsonl(path: &Path) -> Result<Vec<PromptRecord>, PromptError> {
    let text = fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let line_err = |line: usize, message: String| PromptError::Line {
        path: path.to_path_buf(),
        line,
        message,
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let record: PromptRecord = serde_json::from_str(l).map_err(|e| line_err(i + 1, e.to_string()))?;
            record.validate().map_err(|m| line_err(i + 1, m))?;
            Ok(record)
        })
        .collect()
}
