//! Stage runners behind the command-line tool: dataset synthesis, LM
//! estimation, training, decoding, scoring and the architecture/decoder
//! comparison experiment.
//!
//! Every runner writes into an output directory and echoes the effective
//! configuration there. No run artifact contains timestamps or timings, so
//! repeating a run with the same configuration reproduces it byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DecoderKind, RunConfig, EFFECTIVE_CONFIG_FILE};
use crate::decode::{beam_search_decode, greedy_decode, BeamParams, LmKind};
use crate::error::{Error, Result};
use crate::lm::{train_ngram_lm, LmLevel, NgramLm};
use crate::metrics::EvalReport;
use crate::models::{
    build_model, load_checkpoint, save_checkpoint, train, write_history, Model, ModelKind, TaskVocabs, TrainOutcome,
};
use crate::synth::{generate_dataset, manifest_path, read_manifest, write_dataset, LineSample, Split, SynthData};

pub const TOOL_VERSION: &str = concat!("ngram-htr ", env!("CARGO_PKG_VERSION"));
pub const RUN_INFO_FILE: &str = "run_info.json";
pub const CHAR_LM_FILE: &str = "char.arpa";
pub const WORD_LM_FILE: &str = "word.arpa";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const HYPOTHESES_FILE: &str = "hypotheses.tsv";
pub const REPORT_FILE: &str = "report.json";

/// Provenance written next to every run's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub tool: String,
    pub command: String,
    pub seeds: Vec<u64>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Creates `out` and records the effective configuration, tool version and seeds.
pub fn prepare_run_dir(out: &Path, cfg: &RunConfig, command: &str, seeds: Vec<u64>) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join(EFFECTIVE_CONFIG_FILE), cfg.to_toml())?;
    let info = RunInfo {
        tool: TOOL_VERSION.to_string(),
        command: command.to_string(),
        seeds,
    };
    write_file(&out.join(RUN_INFO_FILE), to_json(&info))
}

/// Writes `id<TAB>text` lines.
pub fn write_hypotheses(path: &Path, lines: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (id, text) in lines {
        if id.contains('\t') || text.contains(['\t', '\n']) {
            return Err(Error::Input(format!("line {id:?} cannot be written as id<TAB>text")));
        }
        let _ = writeln!(out, "{id}\t{text}");
    }
    write_file(path, out)
}

/// Reads `id<TAB>text` lines; the text may be empty.
pub fn read_hypotheses(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(id, t)| (id.to_string(), t.to_string()))
                .ok_or_else(|| Error::parse(path, i + 1, "expected id<TAB>text"))
        })
        .collect()
}

/// Reads the transcripts of a dataset manifest without loading images.
pub fn read_manifest_transcripts(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let mut parts = l.splitn(3, '\t');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(id), Some(_), Some(t)) => Ok((id.to_string(), t.to_string())),
                _ => Err(Error::parse(path, i + 1, "expected id<TAB>path<TAB>transcript")),
            }
        })
        .collect()
}

/// Pairs references with hypotheses by id, in reference order.
pub fn align_by_id(refs: &[(String, String)], hyps: &[(String, String)]) -> Result<Vec<(String, String, String)>> {
    let mut by_id: HashMap<&str, &str> = HashMap::with_capacity(hyps.len());
    for (id, text) in hyps {
        if by_id.insert(id, text).is_some() {
            return Err(Error::Input(format!("duplicate hypothesis id {id}")));
        }
    }
    let items = refs
        .iter()
        .map(|(id, r)| {
            let h = by_id
                .remove(id.as_str())
                .ok_or_else(|| Error::Input(format!("no hypothesis for line {id}")))?;
            Ok((id.clone(), r.clone(), h.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::Input(format!("hypothesis {extra} has no reference")));
    }
    Ok(items)
}

/// Generates the synthetic benchmark into `out`.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<SynthData> {
    prepare_run_dir(out, cfg, "synth", vec![cfg.synth.seed])?;
    let data = generate_dataset(&cfg.synth)?;
    write_dataset(&data, out)?;
    Ok(data)
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Character- and word-level LMs estimated on `corpus`.
pub fn train_lms<S: AsRef<str>>(cfg: &RunConfig, corpus: &[S]) -> Result<(NgramLm, NgramLm)> {
    Ok((
        train_ngram_lm(corpus, cfg.lm.char_order, LmLevel::Char)?,
        train_ngram_lm(corpus, cfg.lm.word_order, LmLevel::Word)?,
    ))
}

/// Estimates both LMs and writes `char.arpa` and `word.arpa` into `out`.
pub fn run_lm(cfg: &RunConfig, out: &Path) -> Result<(NgramLm, NgramLm)> {
    prepare_run_dir(out, cfg, "lm", Vec::new())?;
    let corpus_path = cfg
        .lm
        .corpus
        .clone()
        .unwrap_or_else(|| cfg.data.dir.join(crate::synth::LM_CORPUS_FILE));
    let corpus = read_corpus(&corpus_path)?;
    let (char_lm, word_lm) = train_lms(cfg, &corpus)?;
    char_lm.write_arpa(&out.join(CHAR_LM_FILE))?;
    word_lm.write_arpa(&out.join(WORD_LM_FILE))?;
    Ok((char_lm, word_lm))
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<LineSample>> {
    read_manifest(&manifest_path(dir, split))
}

fn transcripts(samples: &[LineSample]) -> Vec<&str> {
    samples.iter().map(|s| s.transcript.as_str()).collect()
}

/// Trains one model and stores its checkpoint and history in `out`.
#[allow(clippy::too_many_arguments)]
pub fn train_and_save(
    cfg: &RunConfig,
    kind: ModelKind,
    tasks: &[usize],
    seed: u64,
    train_set: &[LineSample],
    val_set: &[LineSample],
    out: &Path,
    observer: &mut dyn FnMut(&crate::models::EpochRecord),
) -> Result<(TrainOutcome, TaskVocabs)> {
    if kind == ModelKind::Single && tasks != [1] {
        return Err(Error::Config(format!("a single-task model takes tasks [1], got {tasks:?}")));
    }
    let vocabs = TaskVocabs::build(&transcripts(train_set), tasks, cfg.model.top_k)?;
    let model = build_model(kind, &vocabs.specs(), &cfg.dims, cfg.model.init_seed.unwrap_or(seed))?;
    let tc = crate::models::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let outcome = train(model, &vocabs, train_set, val_set, &tc, observer)?;
    create_dir(out)?;
    save_checkpoint(out, &outcome.model, &vocabs)?;
    write_history(&out.join(HISTORY_FILE), &outcome.history)?;
    Ok((outcome, vocabs))
}

/// Trains the configured model on the dataset in `data.dir`.
pub fn run_train(
    cfg: &RunConfig,
    out: &Path,
    observer: &mut dyn FnMut(&crate::models::EpochRecord),
) -> Result<TrainOutcome> {
    prepare_run_dir(out, cfg, "train", vec![cfg.train.seed])?;
    let train_set = load_split(&cfg.data.dir, Split::Train)?;
    let val_set = load_split(&cfg.data.dir, Split::Val)?;
    let tasks = if cfg.model.kind == ModelKind::Single { vec![1] } else { cfg.model.tasks.clone() };
    let (outcome, _) = train_and_save(cfg, cfg.model.kind, &tasks, cfg.train.seed, &train_set, &val_set, out, observer)?;
    Ok(outcome)
}

/// Transcribes `samples` with the unigram head, in order.
pub fn transcribe(
    model: &Model,
    vocabs: &TaskVocabs,
    samples: &[LineSample],
    greedy: bool,
    lm: Option<&NgramLm>,
    params: &BeamParams,
) -> Result<Vec<(String, String)>> {
    params.validate()?;
    samples
        .par_iter()
        .map(|s| {
            let grid = model.forward_task(&s.image, 1)?;
            let text = if greedy {
                greedy_decode(&grid, &vocabs.alphabet)
            } else {
                beam_search_decode(&grid, &vocabs.alphabet, lm, params)?
            };
            Ok((s.id.clone(), text))
        })
        .collect()
}

/// Loads the LM a beam configuration asks for and checks its level.
pub fn load_decode_lm(cfg: &RunConfig) -> Result<Option<NgramLm>> {
    let Some(level) = cfg.decode_lm_level() else {
        return Ok(None);
    };
    if cfg.decode.greedy {
        return Err(Error::Config("greedy decoding does not use a language model".into()));
    }
    let path = cfg
        .decode
        .lm_path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("decode.beam.lm = {level:?} needs decode.lm_path")))?;
    NgramLm::read_arpa(path, level).map(Some)
}

/// Decodes a dataset split with a saved checkpoint into `hypotheses.tsv`.
pub fn run_decode(cfg: &RunConfig, out: &Path) -> Result<Vec<(String, String)>> {
    let ckpt = cfg
        .decode
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("decode.checkpoint is not set".into()))?;
    let ckpt_file = crate::models::checkpoint_path(ckpt);
    if !ckpt_file.is_file() {
        return Err(Error::Input(format!("checkpoint file {} does not exist", ckpt_file.display())));
    }
    let lm = load_decode_lm(cfg)?;
    let (model, vocabs) = load_checkpoint(ckpt)?;
    prepare_run_dir(out, cfg, "decode", Vec::new())?;
    let samples = load_split(&cfg.data.dir, cfg.decode.split)?;
    let hyps = transcribe(&model, &vocabs, &samples, cfg.decode.greedy, lm.as_ref(), &cfg.decode.beam)?;
    write_hypotheses(&out.join(HYPOTHESES_FILE), &hyps)?;
    Ok(hyps)
}

/// Scores hypotheses against references and writes `report.json`.
pub fn run_eval(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let hyp_path = cfg
        .eval
        .hypotheses
        .as_ref()
        .ok_or_else(|| Error::Config("eval.hypotheses is not set".into()))?;
    let hyps = read_hypotheses(hyp_path)?;
    let refs = match &cfg.eval.references {
        Some(p) => read_hypotheses(p)?,
        None => read_manifest_transcripts(&manifest_path(&cfg.data.dir, cfg.decode.split))?,
    };
    let report = EvalReport::build(&align_by_id(&refs, &hyps)?)?;
    prepare_run_dir(out, cfg, "eval", Vec::new())?;
    write_file(&out.join(REPORT_FILE), to_json(&report))?;
    Ok(report)
}

/// One trained model scored with one decoder on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arch: ModelKind,
    pub tasks: Vec<usize>,
    pub seed: u64,
    pub decoder: DecoderKind,
    pub best_epoch: usize,
    pub val_cer: f64,
    pub cer: f64,
    pub wer: f64,
}

/// Seed medians of one (architecture, tasks, decoder) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub arch: ModelKind,
    pub tasks: Vec<usize>,
    pub decoder: DecoderKind,
    pub seeds: Vec<u64>,
    pub cer: Vec<f64>,
    pub wer: Vec<f64>,
    pub median_cer: f64,
    pub median_wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub runs: Vec<RunResult>,
    pub rows: Vec<TableRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn tasks_label(tasks: &[usize]) -> String {
    tasks.iter().map(|n| format!("{n}g")).collect::<Vec<_>>().join("+")
}

impl ExperimentResults {
    fn from_runs(runs: Vec<RunResult>) -> Self {
        let mut cells: BTreeMap<(usize, ModelKind, Vec<usize>, DecoderKind), Vec<&RunResult>> = BTreeMap::new();
        for (i, r) in runs.iter().enumerate() {
            let first = runs
                .iter()
                .position(|o| o.arch == r.arch && o.tasks == r.tasks && o.decoder == r.decoder)
                .unwrap_or(i);
            cells.entry((first, r.arch, r.tasks.clone(), r.decoder)).or_default().push(r);
        }
        let rows = cells
            .into_iter()
            .map(|((_, arch, tasks, decoder), rs)| {
                let cer: Vec<f64> = rs.iter().map(|r| r.cer).collect();
                let wer: Vec<f64> = rs.iter().map(|r| r.wer).collect();
                TableRow {
                    arch,
                    tasks,
                    decoder,
                    seeds: rs.iter().map(|r| r.seed).collect(),
                    median_cer: median(&cer),
                    median_wer: median(&wer),
                    cer,
                    wer,
                }
            })
            .collect();
        ExperimentResults { runs, rows }
    }

    pub fn row(&self, arch: ModelKind, tasks: &[usize], decoder: DecoderKind) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.arch == arch && r.tasks == tasks && r.decoder == decoder)
    }

    /// Fixed-width comparison table of seed medians, in percent.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<10} {:<8} {:>8} {:>8}  per-seed CER%",
            "arch", "tasks", "decoder", "CER%", "WER%"
        );
        for r in &self.rows {
            let per_seed: Vec<String> = r.cer.iter().map(|c| format!("{:.2}", 100.0 * c)).collect();
            let _ = writeln!(
                out,
                "{:<8} {:<10} {:<8} {:>8.2} {:>8.2}  {}",
                r.arch.name(),
                tasks_label(&r.tasks),
                r.decoder.name(),
                100.0 * r.median_cer,
                100.0 * r.median_wer,
                per_seed.join(" ")
            );
        }
        out
    }
}

fn experiment_data(cfg: &RunConfig) -> Result<(Vec<LineSample>, Vec<LineSample>, Vec<LineSample>)> {
    if cfg.experiment.synthesize {
        let mut data = generate_dataset(&cfg.synth)?;
        let mut take = |s| data.splits.remove(&s).unwrap_or_default();
        Ok((take(Split::Train), take(Split::Val), take(Split::Test)))
    } else {
        Ok((
            load_split(&cfg.data.dir, Split::Train)?,
            load_split(&cfg.data.dir, Split::Val)?,
            load_split(&cfg.data.dir, Split::Test)?,
        ))
    }
}

/// Trains every configured architecture and task set for every seed, decodes
/// the test split with every configured decoder and tabulates seed medians.
/// The LMs see only training transcripts. `log` receives progress lines.
pub fn run_experiment(cfg: &RunConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentResults> {
    let exp = &cfg.experiment;
    prepare_run_dir(out, cfg, "experiment", exp.seeds.clone())?;
    let (train_set, val_set, test_set) = experiment_data(cfg)?;
    if test_set.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let (char_lm, word_lm) = train_lms(cfg, &transcripts(&train_set))?;
    let lm_dir = out.join("lm");
    create_dir(&lm_dir)?;
    char_lm.write_arpa(&lm_dir.join(CHAR_LM_FILE))?;
    word_lm.write_arpa(&lm_dir.join(WORD_LM_FILE))?;
    let refs: Vec<(String, String)> = test_set.iter().map(|s| (s.id.clone(), s.transcript.clone())).collect();

    let mut configs: Vec<(ModelKind, Vec<usize>)> = Vec::new();
    for &arch in &exp.archs {
        if arch == ModelKind::Single {
            configs.push((arch, vec![1]));
        } else {
            configs.extend(exp.task_sets.iter().map(|t| (arch, t.clone())));
        }
    }

    let mut runs = Vec::new();
    for (arch, tasks) in &configs {
        for &seed in &exp.seeds {
            let name = format!("{}-{}-seed{seed}", arch.name(), tasks_label(tasks));
            let run_dir = out.join(&name);
            let (outcome, vocabs) =
                train_and_save(cfg, *arch, tasks, seed, &train_set, &val_set, &run_dir, &mut |r| {
                    log(&format!(
                        "{name} epoch {} loss {:.3} val CER {:.2}%",
                        r.epoch,
                        r.train_loss,
                        100.0 * r.val_cer
                    ))
                })?;
            let val_cer = outcome.history[outcome.best_epoch - 1].val_cer;
            for &decoder in &exp.decoders {
                let lm = match decoder.lm() {
                    LmKind::None => None,
                    LmKind::Char => Some(&char_lm),
                    LmKind::Word => Some(&word_lm),
                };
                let params = BeamParams {
                    lm: decoder.lm(),
                    ..cfg.decode.beam.clone()
                };
                let hyps = transcribe(
                    &outcome.model,
                    &vocabs,
                    &test_set,
                    decoder == DecoderKind::Greedy,
                    lm,
                    &params,
                )?;
                write_hypotheses(&run_dir.join(format!("hyp_{}.tsv", decoder.name())), &hyps)?;
                let report = EvalReport::build(&align_by_id(&refs, &hyps)?)?;
                write_file(&run_dir.join(format!("report_{}.json", decoder.name())), to_json(&report))?;
                log(&format!(
                    "{name} {}: CER {:.2}% WER {:.2}%",
                    decoder.name(),
                    100.0 * report.cer,
                    100.0 * report.wer
                ));
                runs.push(RunResult {
                    arch: *arch,
                    tasks: tasks.clone(),
                    seed,
                    decoder,
                    best_epoch: outcome.best_epoch,
                    val_cer,
                    cer: report.cer,
                    wer: report.wer,
                });
            }
        }
    }
    let results = ExperimentResults::from_runs(runs);
    write_file(&out.join("results.json"), to_json(&results))?;
    write_file(&out.join("table.txt"), results.table())?;
    Ok(results)
}

/// Default output directory of `command` for a configuration file in `base`.
pub fn default_out(cfg: &RunConfig, command: &str, base: &Path) -> PathBuf {
    match (&cfg.out, command) {
        (Some(out), _) => out.clone(),
        (None, "synth") => cfg.data.dir.clone(),
        (None, _) => base.join("runs").join(command),
    }
}
