use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use neurotok::codec::CodecConfig;
use neurotok::preprocess::{PreprocessConfig, SplitSpec};
use neurotok::prompts::PairTag;
use neurotok::tokens::{VocabRegistry, DEFAULT_NEURAL_SIZE, DEFAULT_SPEECH_SIZE};
use serde::{Deserialize, Serialize};

/// Vocabulary extension sizes appended after the base text vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryConfig {
    pub base_size: u32,
    pub speech_size: u32,
    pub neural_size: u32,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            base_size: 151_936,
            speech_size: DEFAULT_SPEECH_SIZE,
            neural_size: DEFAULT_NEURAL_SIZE,
        }
    }
}

impl RegistryConfig {
    pub fn build(&self) -> Result<VocabRegistry> {
        Ok(VocabRegistry::new(self.base_size, self.speech_size, self.neural_size)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory of signal files (`<name>.json` + `<name>.f32`).
    pub signals_dir: PathBuf,
    /// Word-onset annotations (JSON lines); windows get no text without it.
    pub annotations: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub preprocess: PreprocessConfig,
    pub codec: CodecConfig,
    pub registry: RegistryConfig,
    pub split: SplitSpec,
    pub pairs: Vec<PairTag>,
    /// Instruction templates replacing the bundled set.
    pub templates: Option<PathBuf>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            signals_dir: PathBuf::from("signals"),
            annotations: None,
            output_dir: PathBuf::from("out"),
            preprocess: PreprocessConfig::default(),
            codec: CodecConfig::default(),
            registry: RegistryConfig::default(),
            split: SplitSpec::default(),
            pairs: PairTag::ALL.to_vec(),
            templates: None,
            seed: 0,
        }
    }
}

/// Paths a command reads, checked for existence during validation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Needs {
    pub signals: bool,
    pub manifest: bool,
    pub checkpoint: Option<&'static str>,
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults) and resolves relative paths
    /// against the directory of the config file.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.signals_dir);
        resolve(&mut cfg.output_dir);
        if let Some(p) = cfg.annotations.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.templates.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    /// The codec settings with the pipeline seed applied.
    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            seed: self.seed,
            ..self.codec.clone()
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join("manifest.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("codec.ckpt")
    }

    /// Every problem with the configuration, in a stable order.
    pub fn problems(&self, needs: Needs) -> Vec<String> {
        let mut out = Vec::new();
        let p = &self.preprocess;
        if !(p.low_hz > 0.0 && p.low_hz < p.high_hz && p.high_hz.is_finite()) {
            out.push(format!("preprocess: band {}..{} Hz must satisfy 0 < low < high", p.low_hz, p.high_hz));
        }
        if !(p.target_hz > 0.0 && p.target_hz.is_finite()) {
            out.push(format!("preprocess: target_hz {} must be positive", p.target_hz));
        }
        if let Err(e) = p.window.validate() {
            out.push(format!("preprocess: {e}"));
        }
        if let Err(e) = self.codec.validate() {
            out.push(format!("codec: {e}"));
        }
        if self.codec.steps == 0 {
            out.push("codec: steps must be positive".into());
        }
        if let Err(e) = self.registry.build() {
            out.push(format!("registry: {e}"));
        }
        if self.registry.neural_size as usize != self.codec.codebook_size {
            out.push(format!(
                "registry: neural_size {} differs from codec codebook_size {}",
                self.registry.neural_size, self.codec.codebook_size
            ));
        }
        if let Err(e) = self.split.validate() {
            out.push(format!("split: {e}"));
        }
        if self.split.train_stories.is_empty() {
            out.push("split: no training stories".into());
        }
        if self.pairs.is_empty() {
            out.push("pairs: at least one modality pair is required".into());
        }
        if let Some(t) = &self.templates {
            if !t.is_file() {
                out.push(format!("templates: {} does not exist", t.display()));
            }
        }
        if needs.signals {
            if !self.signals_dir.is_dir() {
                out.push(format!("signals_dir: {} is not a directory", self.signals_dir.display()));
            }
            if let Some(a) = &self.annotations {
                if !a.is_file() {
                    out.push(format!("annotations: {} does not exist", a.display()));
                }
            }
        }
        if needs.manifest && !self.manifest_path().is_file() {
            out.push(format!(
                "output_dir: {} not found; run `neurotok preprocess` first",
                self.manifest_path().display()
            ));
        }
        if let Some(what) = needs.checkpoint {
            let ckpt = self.checkpoint_path();
            if !ckpt.is_file() {
                out.push(format!("{what}: {} not found; run `neurotok train-codec` first", ckpt.display()));
            }
        }
        out
    }

    pub fn validate(&self, needs: Needs) -> Result<()> {
        let problems = self.problems(needs);
        if problems.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        bail!("invalid configuration ({} problems):\n{}", problems.len(), list.join("\n"))
    }
}
