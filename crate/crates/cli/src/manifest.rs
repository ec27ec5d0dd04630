//! Windowed samples on disk: one signal file per window plus a JSON-lines
//! manifest carrying the split, timing, transcript and speech codes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use neurotok::preprocess::{DatasetSplit, WindowedSample};
use neurotok::signal::{read_signal, write_signal, NeuralSignal, SignalHeader};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    /// Signal path relative to the manifest directory, without extension.
    pub file: String,
    pub story_id: String,
    pub start_time_s: f64,
    #[serde(default)]
    pub transcript: Option<String>,
    #[serde(default)]
    pub speech_codes: Option<Vec<u32>>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn parts(split: &DatasetSplit) -> [(&'static str, &[WindowedSample]); 3] {
    [("train", &split.train), ("val", &split.val), ("test", &split.test)]
}

/// Writes every window under `out_dir/windows/<split>/` and returns the
/// manifest path. Earlier window files are removed first.
pub fn write_windows(split: &DatasetSplit, channel_names: &[String], out_dir: &Path) -> Result<PathBuf> {
    let root = out_dir.join("windows");
    if root.exists() {
        fs::remove_dir_all(&root).with_context(|| format!("clearing {}", root.display()))?;
    }
    let manifest = out_dir.join("manifest.jsonl");
    let mut lines = String::new();
    for (name, samples) in parts(split) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, w) in samples.iter().enumerate() {
            let file = format!("windows/{name}/{i:06}");
            let mut header = SignalHeader::new(w.sample_rate_hz, channel_names.to_vec(), w.signal.ncols());
            header.story_id = Some(w.story_id.clone());
            let signal = NeuralSignal::new(header, w.signal.clone())?;
            write_signal(&signal, &out_dir.join(&file))?;
            let entry = ManifestEntry {
                split: name.to_string(),
                file,
                story_id: w.story_id.clone(),
                start_time_s: w.start_time_s,
                transcript: w.transcript.clone(),
                speech_codes: w.speech_codes.clone(),
            };
            lines.push_str(&serde_json::to_string(&entry)?);
            lines.push('\n');
        }
    }
    let mut f = fs::File::create(&manifest).with_context(|| format!("creating {}", manifest.display()))?;
    f.write_all(lines.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let e: ManifestEntry =
                serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))?;
            if !SPLITS.contains(&e.split.as_str()) {
                bail!("{} line {}: unknown split {:?}", path.display(), i + 1, e.split);
            }
            Ok(e)
        })
        .collect()
}

/// Loads the windows of `split` (all splits for `None`) in manifest order.
pub fn load_windows(manifest: &Path, split: Option<&str>) -> Result<Vec<WindowedSample>> {
    let base = manifest.parent().unwrap_or(Path::new(""));
    read_manifest(manifest)?
        .into_iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| {
            let signal = read_signal(&base.join(&e.file))?;
            Ok(WindowedSample {
                sample_rate_hz: signal.sample_rate_hz(),
                signal: signal.samples().clone(),
                story_id: e.story_id,
                start_time_s: e.start_time_s,
                transcript: e.transcript,
                speech_codes: e.speech_codes,
            })
        })
        .collect()
}
