//! Run configuration: one strict TOML file with a section per stage.
//!
//! Every section is optional and filled with defaults. Unknown keys are
//! rejected with their line number. Relative paths are resolved against the
//! directory holding the configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{BeamParams, LmKind};
use crate::error::{Error, Result};
use crate::lm::LmLevel;
use crate::models::{ModelDims, ModelKind, TrainConfig};
use crate::synth::{Split, SynthConfig};

/// File name of the configuration echoed into every run directory.
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding the split manifests and the LM corpus.
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { dir: PathBuf::from("data") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Output granularities, ascending and starting with 1.
    pub tasks: Vec<usize>,
    /// Vocabulary cap for trigram and fourgram tasks.
    pub top_k: usize,
    /// Initialization seed; the training seed is used when absent.
    pub init_seed: Option<u64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Single,
            tasks: vec![1],
            top_k: 1000,
            init_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub char_order: usize,
    pub word_order: usize,
    /// Training text, one line per sentence; defaults to the dataset's LM corpus.
    pub corpus: Option<PathBuf>,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            char_order: 4,
            word_order: 4,
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// Directory holding `model.json` and the vocabulary dumps.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    /// Best-path decoding instead of beam search.
    pub greedy: bool,
    /// ARPA file used when `beam.lm` is `char` or `word`.
    pub lm_path: Option<PathBuf>,
    pub beam: BeamParams,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            checkpoint: None,
            split: Split::Test,
            greedy: false,
            lm_path: None,
            beam: BeamParams::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// `id<TAB>text` hypotheses to score.
    pub hypotheses: Option<PathBuf>,
    /// `id<TAB>text` references; the dataset manifest of `decode.split` otherwise.
    pub references: Option<PathBuf>,
}

/// Decoders compared by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Greedy,
    Char,
    Word,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Greedy => "greedy",
            DecoderKind::Char => "char-lm",
            DecoderKind::Word => "word-lm",
        }
    }

    pub fn lm(self) -> LmKind {
        match self {
            DecoderKind::Greedy => LmKind::None,
            DecoderKind::Char => LmKind::Char,
            DecoderKind::Word => LmKind::Word,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub archs: Vec<ModelKind>,
    /// Task lists for the multi-task architectures; the single-task model always uses `[1]`.
    pub task_sets: Vec<Vec<usize>>,
    pub decoders: Vec<DecoderKind>,
    /// Regenerate the dataset from `[synth]` instead of reading `data.dir`.
    pub synthesize: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            seeds: vec![0, 1, 2],
            archs: vec![ModelKind::Single, ModelKind::Bmt, ModelKind::Hmt],
            task_sets: vec![vec![1, 2]],
            decoders: vec![DecoderKind::Greedy, DecoderKind::Char, DecoderKind::Word],
            synthesize: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory of the run.
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: ModelSection,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub lm: LmSection,
    pub decode: DecodeSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl RunConfig {
    /// Parses TOML text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(text, s.start));
            Error::parse(origin, line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve_opt(base, &mut self.out);
        resolve(base, &mut self.data.dir);
        resolve_opt(base, &mut self.lm.corpus);
        resolve_opt(base, &mut self.decode.checkpoint);
        resolve_opt(base, &mut self.decode.lm_path);
        resolve_opt(base, &mut self.eval.hypotheses);
        resolve_opt(base, &mut self.eval.references);
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.train.validate()?;
        self.decode.beam.validate()?;
        if self.model.top_k == 0 {
            return Err(Error::Config("model.top_k must be at least 1".into()));
        }
        for (name, order) in [("lm.char_order", self.lm.char_order), ("lm.word_order", self.lm.word_order)] {
            if !(1..=5).contains(&order) {
                return Err(Error::Config(format!("{name} must be in 1..=5, got {order}")));
            }
        }
        if self.experiment.seeds.is_empty() || self.experiment.archs.is_empty() || self.experiment.decoders.is_empty() {
            return Err(Error::Config("experiment needs at least one seed, architecture and decoder".into()));
        }
        let multi = self.experiment.archs.iter().any(|&k| k != ModelKind::Single);
        if multi && self.experiment.task_sets.is_empty() {
            return Err(Error::Config("experiment.task_sets is empty".into()));
        }
        Ok(())
    }

    /// Level of the LM named by `decode.beam.lm`, if any.
    pub fn decode_lm_level(&self) -> Option<LmLevel> {
        match self.decode.beam.lm {
            LmKind::None => None,
            LmKind::Char => Some(LmLevel::Char),
            LmKind::Word => Some(LmLevel::Word),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse("[train]\nseed = 4\n", "t.toml").unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.dims.hidden, 64);
        assert_eq!(cfg.decode.beam.width, 64);
        assert_eq!(cfg.experiment.seeds, vec![0, 1, 2]);
        assert_eq!(RunConfig::parse("", "t.toml").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named_with_their_line() {
        let err = RunConfig::parse("[model]\nkind = \"bmt\"\n\n[train]\nepochz = 3\n", "run.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("epochz"), "{msg}");
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err:?}");
        let err = RunConfig::parse("[train]\nepochs = \"many\"\n", "run.toml").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        assert!(RunConfig::parse("[train]\nepochs = 0\n", "run.toml").is_err());
        assert!(RunConfig::parse("[model]\nkind = \"deep\"\n", "run.toml").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "out = \"runs/a\"\n[data]\ndir = \"d\"\n[decode]\ncheckpoint = \"/abs/ckpt\"\nlm_path = \"lm/w.arpa\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.out.unwrap(), dir.path().join("runs/a"));
        assert_eq!(cfg.data.dir, dir.path().join("d"));
        assert_eq!(cfg.decode.checkpoint.unwrap(), PathBuf::from("/abs/ckpt"));
        assert_eq!(cfg.decode.lm_path.unwrap(), dir.path().join("lm/w.arpa"));
    }

    #[test]
    fn effective_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model.kind = ModelKind::Hmt;
        cfg.model.tasks = vec![1, 2, 3];
        cfg.train.task_weights.insert("2".into(), 0.5);
        cfg.decode.beam.lm = LmKind::Word;
        let back = RunConfig::parse(&cfg.to_toml(), "echo").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.decode_lm_level(), Some(LmLevel::Word));
    }
}
