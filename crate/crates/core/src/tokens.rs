//! Discrete token streams: the extended vocabulary, the channel-tied neural
//! wire format (`<soeg><nts><EG5><EG7>...<eoeg>`), the speech format
//! (`<sosp><334><77><eosp>`), and signal-level tokenization through a codec.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Codec, CodecError};
use crate::signal::{NeuralSignal, SignalError, SignalHeader};

pub const SOEG: &str = "<soeg>";
pub const EOEG: &str = "<eoeg>";
pub const NTS: &str = "<nts>";
pub const SOSP: &str = "<sosp>";
pub const EOSP: &str = "<eosp>";
/// Special symbols in id order.
pub const SPECIALS: [&str; 5] = [SOEG, EOEG, NTS, SOSP, EOSP];

pub const DEFAULT_SPEECH_SIZE: u32 = 1000;
pub const DEFAULT_NEURAL_SIZE: u32 = 8192;

#[derive(Debug, Error)]
pub enum TokenError {
    #[error("byte {position}: {message}")]
    Malformed { position: usize, message: String },
    #[error("byte {position}: unknown symbol {symbol:?}")]
    UnknownSymbol { position: usize, symbol: String },
    #[error("byte {position}: code {code} out of range for codebook of size {size}")]
    CodeOutOfRange { position: usize, code: u64, size: u32 },
    #[error("byte {position}: time step {step} has {found} channels, expected {expected}")]
    InconsistentChannels {
        position: usize,
        step: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("duplicate vocabulary symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("checkpoint codebook has {checkpoint} entries but the registry expects {registry}")]
    CodebookMismatch { checkpoint: usize, registry: u32 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
}

/// Symbol table for the tokens appended to a base text vocabulary: the
/// five specials, then speech codes `<0>..`, then neural codes `<EG0>..`,
/// with contiguous ids starting at `base_size`.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabRegistry {
    pub base_size: u32,
    pub speech_size: u32,
    pub neural_size: u32,
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub symbol: String,
    pub id: u32,
}

pub fn neural_symbol(code: u32) -> String {
    format!("<EG{code}>")
}

pub fn speech_symbol(code: u32) -> String {
    format!("<{code}>")
}

impl VocabRegistry {
    pub fn new(base_size: u32, speech_size: u32, neural_size: u32) -> Result<Self, TokenError> {
        if base_size == 0 {
            return Err(TokenError::InvalidSequence("base vocabulary size must be positive".into()));
        }
        let symbols: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain((0..speech_size).map(speech_symbol))
            .chain((0..neural_size).map(neural_symbol))
            .collect();
        let mut ids = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if ids.insert(s.clone(), base_size + i as u32).is_some() {
                return Err(TokenError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Self {
            base_size,
            speech_size,
            neural_size,
            symbols,
            ids,
        })
    }

    /// Base plus all extension symbols.
    pub fn total(&self) -> u32 {
        self.base_size + self.symbols.len() as u32
    }

    pub fn extension_len(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.ids.get(symbol).copied()
    }

    /// Symbol of an extension id; base ids have none.
    pub fn symbol(&self, id: u32) -> Option<&str> {
        let i = id.checked_sub(self.base_size)?;
        self.symbols.get(i as usize).map(String::as_str)
    }

    pub fn entries(&self) -> Vec<VocabEntry> {
        self.symbols
            .iter()
            .enumerate()
            .map(|(i, s)| VocabEntry {
                symbol: s.clone(),
                id: self.base_size + i as u32,
            })
            .collect()
    }

    /// Writes the extension table as a JSON array of `{symbol, id}`.
    pub fn write_json(&self, path: &Path) -> Result<(), TokenError> {
        let text = serde_json::to_string_pretty(&self.entries()).expect("entries serialize");
        std::fs::write(path, text).map_err(|e| TokenError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

impl Default for VocabRegistry {
    /// A 151936-entry base vocabulary with the default speech and neural codebooks.
    fn default() -> Self {
        Self::new(151_936, DEFAULT_SPEECH_SIZE, DEFAULT_NEURAL_SIZE).expect("default layout is valid")
    }
}

/// Codes of a multi-channel recording, one row per time step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuralTokenSequence {
    pub channel_names: Vec<String>,
    /// `[T_E, C]`.
    pub codes: Array2<u32>,
}

/// `ch0, ch1, ...` for streams whose channel names are not known.
pub fn default_channel_names(channels: usize) -> Vec<String> {
    (0..channels).map(|c| format!("ch{c}")).collect()
}

impl NeuralTokenSequence {
    pub fn new(channel_names: Vec<String>, codes: Array2<u32>) -> Result<Self, TokenError> {
        if codes.ncols() != channel_names.len() {
            return Err(TokenError::InvalidSequence(format!(
                "{} channel names for {} code columns",
                channel_names.len(),
                codes.ncols()
            )));
        }
        Ok(Self { channel_names, codes })
    }

    pub fn num_steps(&self) -> usize {
        self.codes.nrows()
    }

    pub fn num_channels(&self) -> usize {
        self.codes.ncols()
    }
}

/// `<soeg>` + per step `<nts><EGc1>...<EGcC>` + `<eoeg>`.
pub fn serialize_neural(seq: &NeuralTokenSequence, registry: &VocabRegistry) -> Result<String, TokenError> {
    let mut out = String::with_capacity(7 * seq.codes.len() + 6 * seq.num_steps() + 12);
    out.push_str(SOEG);
    for (t, row) in seq.codes.outer_iter().enumerate() {
        out.push_str(NTS);
        for (c, &code) in row.iter().enumerate() {
            if code >= registry.neural_size {
                return Err(TokenError::InvalidSequence(format!(
                    "code {code} at step {t}, channel {c} is outside a codebook of {}",
                    registry.neural_size
                )));
            }
            out.push_str("<EG");
            out.push_str(&code.to_string());
            out.push('>');
        }
    }
    out.push_str(EOEG);
    Ok(out)
}

/// `<sosp>` + `<c>` per code + `<eosp>`.
pub fn serialize_speech(codes: &[u32], registry: &VocabRegistry) -> Result<String, TokenError> {
    let mut out = String::with_capacity(6 * codes.len() + 12);
    out.push_str(SOSP);
    for (i, &code) in codes.iter().enumerate() {
        if code >= registry.speech_size {
            return Err(TokenError::InvalidSequence(format!(
                "speech code {code} at index {i} is outside a codebook of {}",
                registry.speech_size
            )));
        }
        out.push_str(&speech_symbol(code));
    }
    out.push_str(EOSP);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Symbol {
    Special(&'static str),
    Neural(u64),
    Speech(u64),
}

/// Splits `text` into `(byte offset, symbol)` pairs, rejecting anything
/// that is not a sequence of known `<...>` symbols.
fn lex(text: &str) -> Result<Vec<(usize, Symbol)>, TokenError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let rest = &text[pos..];
        if !rest.starts_with('<') {
            return Err(TokenError::Malformed {
                position: pos,
                message: format!("expected '<', found {:?}", rest.chars().next().expect("non-empty")),
            });
        }
        let Some(end) = rest.find('>') else {
            return Err(TokenError::Malformed {
                position: pos,
                message: "unterminated symbol".into(),
            });
        };
        let raw = &rest[..=end];
        let inner = &raw[1..raw.len() - 1];
        let canonical_number = |s: &str| {
            !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit()) && (s == "0" || !s.starts_with('0'))
        };
        let symbol = if let Some(special) = SPECIALS.iter().find(|s| **s == raw) {
            Symbol::Special(special)
        } else if let Some(digits) = inner.strip_prefix("EG").filter(|d| canonical_number(d)) {
            Symbol::Neural(digits.parse().unwrap_or(u64::MAX))
        } else if canonical_number(inner) {
            Symbol::Speech(inner.parse().unwrap_or(u64::MAX))
        } else {
            return Err(TokenError::UnknownSymbol {
                position: pos,
                symbol: raw.to_string(),
            });
        };
        out.push((pos, symbol));
        pos += raw.len();
    }
    Ok(out)
}

fn unexpected(position: usize, found: Symbol, wanted: &str) -> TokenError {
    let found = match found {
        Symbol::Special(s) => s.to_string(),
        Symbol::Neural(c) => format!("<EG{c}>"),
        Symbol::Speech(c) => format!("<{c}>"),
    };
    TokenError::Malformed {
        position,
        message: format!("expected {wanted}, found {found}"),
    }
}

/// Inverse of [`serialize_neural`]. The channel count is taken from the
/// first time step and enforced on the rest; channels are named `ch0..`.
pub fn parse_neural(text: &str, registry: &VocabRegistry) -> Result<NeuralTokenSequence, TokenError> {
    parse_neural_inner(text, registry, None)
}

/// As [`parse_neural`], with known channel names (which also fixes the
/// channel count of an empty stream).
pub fn parse_neural_channels(
    text: &str,
    registry: &VocabRegistry,
    channel_names: &[String],
) -> Result<NeuralTokenSequence, TokenError> {
    parse_neural_inner(text, registry, Some(channel_names))
}

fn parse_neural_inner(
    text: &str,
    registry: &VocabRegistry,
    names: Option<&[String]>,
) -> Result<NeuralTokenSequence, TokenError> {
    let symbols = lex(text)?;
    let mut it = symbols.iter().copied().peekable();
    match it.next() {
        Some((_, Symbol::Special(SOEG))) => {}
        Some((p, s)) => return Err(unexpected(p, s, SOEG)),
        None => {
            return Err(TokenError::Malformed {
                position: 0,
                message: format!("empty stream, expected {SOEG}"),
            })
        }
    }
    let mut expected = names.map(<[String]>::len);
    let mut data = Vec::new();
    let mut steps = 0;
    loop {
        match it.next() {
            Some((_, Symbol::Special(EOEG))) => break,
            Some((step_pos, Symbol::Special(NTS))) => {
                let mut count = 0;
                while let Some(&(p, Symbol::Neural(code))) = it.peek() {
                    if code >= u64::from(registry.neural_size) {
                        return Err(TokenError::CodeOutOfRange {
                            position: p,
                            code,
                            size: registry.neural_size,
                        });
                    }
                    data.push(code as u32);
                    count += 1;
                    it.next();
                }
                if let Some(&(p, s)) = it.peek() {
                    if !matches!(s, Symbol::Special(NTS) | Symbol::Special(EOEG)) {
                        return Err(unexpected(p, s, "a neural code, <nts> or <eoeg>"));
                    }
                }
                match expected {
                    None if count > 0 => expected = Some(count),
                    Some(e) if e == count => {}
                    _ => {
                        return Err(TokenError::InconsistentChannels {
                            position: step_pos,
                            step: steps,
                            expected: expected.unwrap_or(1),
                            found: count,
                        })
                    }
                }
                steps += 1;
            }
            Some((p, s)) => return Err(unexpected(p, s, "<nts> or <eoeg>")),
            None => {
                return Err(TokenError::Malformed {
                    position: text.len(),
                    message: format!("missing {EOEG}"),
                })
            }
        }
    }
    if let Some((p, _)) = it.next() {
        return Err(TokenError::Malformed {
            position: p,
            message: format!("trailing symbols after {EOEG}"),
        });
    }
    let channels = expected.unwrap_or(0);
    let channel_names = names.map_or_else(|| default_channel_names(channels), <[String]>::to_vec);
    let codes = Array2::from_shape_vec((steps, channels), data).expect("every step has `channels` codes");
    NeuralTokenSequence::new(channel_names, codes)
}

/// Inverse of [`serialize_speech`].
pub fn parse_speech(text: &str, registry: &VocabRegistry) -> Result<Vec<u32>, TokenError> {
    let symbols = lex(text)?;
    let mut it = symbols.into_iter();
    match it.next() {
        Some((_, Symbol::Special(SOSP))) => {}
        Some((p, s)) => return Err(unexpected(p, s, SOSP)),
        None => {
            return Err(TokenError::Malformed {
                position: 0,
                message: format!("empty stream, expected {SOSP}"),
            })
        }
    }
    let mut codes = Vec::new();
    loop {
        match it.next() {
            Some((_, Symbol::Special(EOSP))) => break,
            Some((p, Symbol::Speech(code))) => {
                if code >= u64::from(registry.speech_size) {
                    return Err(TokenError::CodeOutOfRange {
                        position: p,
                        code,
                        size: registry.speech_size,
                    });
                }
                codes.push(code as u32);
            }
            Some((p, s)) => return Err(unexpected(p, s, "a speech code or <eosp>")),
            None => {
                return Err(TokenError::Malformed {
                    position: text.len(),
                    message: format!("missing {EOSP}"),
                })
            }
        }
    }
    if let Some((p, _)) = it.next() {
        return Err(TokenError::Malformed {
            position: p,
            message: format!("trailing symbols after {EOSP}"),
        });
    }
    Ok(codes)
}

/// A tokenized recording with what is needed to restore its header.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSignal {
    pub header: SignalHeader,
    /// Zeros appended to each channel before encoding.
    pub pad: usize,
    pub tokens: NeuralTokenSequence,
}

/// On-disk form of a [`TokenizedSignal`]: the header, the padding and the
/// serialized neural stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenFile {
    pub header: SignalHeader,
    pub pad: usize,
    pub stream: String,
}

impl TokenizedSignal {
    pub fn to_file(&self, registry: &VocabRegistry) -> Result<TokenFile, TokenError> {
        Ok(TokenFile {
            header: self.header.clone(),
            pad: self.pad,
            stream: serialize_neural(&self.tokens, registry)?,
        })
    }

    pub fn from_file(file: &TokenFile, registry: &VocabRegistry) -> Result<Self, TokenError> {
        Ok(Self {
            header: file.header.clone(),
            pad: file.pad,
            tokens: parse_neural_channels(&file.stream, registry, &file.header.channel_names)?,
        })
    }

    pub fn write_json(&self, path: &Path, registry: &VocabRegistry) -> Result<(), TokenError> {
        let text = serde_json::to_string(&self.to_file(registry)?).expect("token file serializes");
        std::fs::write(path, text).map_err(|e| TokenError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn read_json(path: &Path, registry: &VocabRegistry) -> Result<Self, TokenError> {
        let file_err = |message: String| TokenError::File {
            path: path.to_path_buf(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        let file: TokenFile = serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))?;
        Self::from_file(&file, registry)
    }
}

fn check_codebook(codec: &Codec, registry: &VocabRegistry) -> Result<(), TokenError> {
    if codec.config.codebook_size != registry.neural_size as usize {
        return Err(TokenError::CodebookMismatch {
            checkpoint: codec.config.codebook_size,
            registry: registry.neural_size,
        });
    }
    Ok(())
}

/// Encodes and quantizes every channel independently (stage-1 codes) and
/// ties the codes per time step in channel order.
pub fn tokenize_signal(
    signal: &NeuralSignal,
    codec: &Codec,
    registry: &VocabRegistry,
) -> Result<TokenizedSignal, TokenError> {
    check_codebook(codec, registry)?;
    let rows: Vec<Vec<f32>> = signal.samples().outer_iter().map(|r| r.to_vec()).collect();
    let per_channel = rows
        .par_iter()
        .map(|r| codec.tokenize(r))
        .collect::<Result<Vec<_>, _>>()?;
    let pad = per_channel.first().map_or(0, |(_, p)| *p);
    let steps = per_channel.first().map_or(0, |(c, _)| c.ncols());
    let channels = per_channel.len();
    let codes = Array2::from_shape_fn((steps, channels), |(t, c)| per_channel[c].0[[0, t]]);
    Ok(TokenizedSignal {
        header: signal.header().clone(),
        pad,
        tokens: NeuralTokenSequence::new(signal.header().channel_names.clone(), codes)?,
    })
}

/// Dequantizes and decodes every channel, strips the recorded padding and
/// restores the original header.
pub fn detokenize_signal(
    tokenized: &TokenizedSignal,
    codec: &Codec,
    registry: &VocabRegistry,
) -> Result<NeuralSignal, TokenError> {
    check_codebook(codec, registry)?;
    let seq = &tokenized.tokens;
    if seq.num_channels() != tokenized.header.num_channels() {
        return Err(TokenError::InvalidSequence(format!(
            "{} code channels for a {}-channel header",
            seq.num_channels(),
            tokenized.header.num_channels()
        )));
    }
    let columns: Vec<Array2<u32>> = (0..seq.num_channels())
        .map(|c| seq.codes.column(c).to_owned().insert_axis(ndarray::Axis(0)))
        .collect();
    let rows = columns
        .par_iter()
        .map(|codes| codec.detokenize(codes.view(), tokenized.pad))
        .collect::<Result<Vec<_>, _>>()?;
    let len = tokenized.header.num_samples;
    if let Some(bad) = rows.iter().find(|r| r.len() != len) {
        return Err(TokenError::InvalidSequence(format!(
            "decoded {} samples per channel, header records {len}",
            bad.len()
        )));
    }
    let samples = Array2::from_shape_vec((rows.len(), len), rows.concat()).expect("rows checked above");
    Ok(NeuralSignal::new(tokenized.header.clone(), samples)?)
}
