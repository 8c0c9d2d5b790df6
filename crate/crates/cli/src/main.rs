use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use htr_core::config::RunConfig;
use htr_core::decode::LmKind;
use htr_core::models::TaskVocabs;
use htr_core::pipeline;
use htr_core::vocab::LabelSeq;

/// Line-image text recognition with multi-task n-gram CTC targets.
#[derive(Parser)]
#[command(name = "ngram-htr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the stage (the seed list for `experiment`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// ARPA language model used by the beam search.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Level of `--lm`: none, char or word.
    #[arg(long)]
    lm_level: Option<LmKind>,
    /// LM weight for the selected level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-word insertion bonus.
    #[arg(long)]
    beta: Option<f64>,
    /// Best-path decoding.
    #[arg(long)]
    greedy: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic train/val/test line images.
    Synth(Common),
    /// Estimate character- and word-level ARPA language models.
    Lm(Common),
    /// Train a model and write its checkpoint and history.
    Train(Common),
    /// Transcribe a dataset split into `id<TAB>text` lines.
    Decode(DecodeArgs),
    /// Score hypotheses against references.
    Eval(Common),
    /// Compare architectures and decoders over several seeds.
    Experiment(Common),
    /// Print the target sequence of every task for a piece of text.
    Decompose {
        text: String,
        /// Comma-separated task list.
        #[arg(long, default_value = "1,2,3,4", value_delimiter = ',')]
        tasks: Vec<usize>,
        /// Vocabulary cap for trigrams and fourgrams.
        #[arg(long, default_value_t = 1000)]
        top_k: usize,
        /// Corpus (one line per sentence) for the n-gram vocabularies; the text itself otherwise.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

fn load(common: &Common, command: &str) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&common.config)?;
    let base = common
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let out = common.out.clone().unwrap_or_else(|| pipeline::default_out(&cfg, command, &base));
    Ok((cfg, out))
}

fn apply_seed(cfg: &mut RunConfig, command: &str, seed: Option<u64>) {
    let Some(seed) = seed else { return };
    match command {
        "synth" => cfg.synth.seed = seed,
        "experiment" => cfg.experiment.seeds = vec![seed],
        _ => cfg.train.seed = seed,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NGRAM_HTR_THREADS") {
        let n: usize = v.parse().with_context(|| format!("NGRAM_HTR_THREADS={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("NGRAM_HTR_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn decompose(text: &str, tasks: &[usize], top_k: usize, corpus: Option<&Path>) -> Result<()> {
    let lines: Vec<String> = match corpus {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => vec![text.to_string()],
    };
    let mut with_text = lines;
    with_text.push(text.to_string());
    let vocabs = TaskVocabs::build(&with_text, tasks, top_k)?;
    for n in vocabs.tasks() {
        let target: LabelSeq = vocabs.target(n, text)?;
        let units: Vec<String> = target
            .ids
            .iter()
            .map(|&id| match n {
                1 => vocabs.alphabet.char_of(id).map(String::from).unwrap_or_default(),
                _ => vocabs.ngrams[&n].gram_of(id).unwrap_or_default().to_string(),
            })
            .collect();
        let size = vocabs.vocab_len(n).unwrap_or_default();
        let label = if n == 1 { "unigram".to_string() } else { format!("{n}-gram") };
        println!("{label:<8} (|V|={size:>4}): {}", units.join("-"));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let started = Instant::now();
    match cli.command {
        Command::Synth(c) => {
            let (mut cfg, out) = load(&c, "synth")?;
            apply_seed(&mut cfg, "synth", c.seed);
            let data = pipeline::run_synth(&cfg, &out)?;
            for (split, samples) in &data.splits {
                println!("{}: {} lines", split.name(), samples.len());
            }
            println!("dataset written to {}", out.display());
        }
        Command::Lm(c) => {
            let (cfg, out) = load(&c, "lm")?;
            let (char_lm, word_lm) = pipeline::run_lm(&cfg, &out)?;
            println!("char LM order {} counts {:?}", char_lm.order(), char_lm.counts());
            println!("word LM order {} counts {:?}", word_lm.order(), word_lm.counts());
            println!("ARPA files written to {}", out.display());
        }
        Command::Train(c) => {
            let (mut cfg, out) = load(&c, "train")?;
            apply_seed(&mut cfg, "train", c.seed);
            let outcome = pipeline::run_train(&cfg, &out, &mut |r| {
                eprintln!(
                    "epoch {:>3}  lr {:.0e}  loss {:>9.4}  val CER {:>6.2}%  WER {:>6.2}%",
                    r.epoch,
                    r.lr,
                    r.train_loss,
                    100.0 * r.val_cer,
                    100.0 * r.val_wer
                )
            })?;
            println!(
                "best epoch {} (val CER {:.2}%); checkpoint in {}",
                outcome.best_epoch,
                100.0 * outcome.history[outcome.best_epoch - 1].val_cer,
                out.display()
            );
        }
        Command::Decode(d) => {
            let (mut cfg, out) = load(&d.common, "decode")?;
            apply_seed(&mut cfg, "decode", d.common.seed);
            if let Some(p) = d.checkpoint {
                cfg.decode.checkpoint = Some(p);
            }
            if let Some(w) = d.beam_width {
                cfg.decode.beam.width = w;
            }
            if let Some(p) = d.lm {
                cfg.decode.lm_path = Some(p);
            }
            if let Some(k) = d.lm_level {
                cfg.decode.beam.lm = k;
            }
            if let Some(a) = d.alpha {
                match cfg.decode.beam.lm {
                    LmKind::Char => cfg.decode.beam.char_lm_weight = a,
                    LmKind::Word => cfg.decode.beam.word_lm_weight = a,
                    LmKind::None => bail!("--alpha needs an LM level (--lm-level char|word)"),
                }
            }
            if let Some(b) = d.beta {
                cfg.decode.beam.word_bonus = b;
            }
            cfg.decode.greedy |= d.greedy;
            cfg.validate()?;
            let hyps = pipeline::run_decode(&cfg, &out)?;
            println!(
                "{} lines decoded into {}",
                hyps.len(),
                out.join(pipeline::HYPOTHESES_FILE).display()
            );
        }
        Command::Eval(c) => {
            let (cfg, out) = load(&c, "eval")?;
            let report = pipeline::run_eval(&cfg, &out)?;
            print!("{}", report.summary_table());
        }
        Command::Experiment(c) => {
            let (mut cfg, out) = load(&c, "experiment")?;
            apply_seed(&mut cfg, "experiment", c.seed);
            let results = pipeline::run_experiment(&cfg, &out, &mut |line| {
                eprintln!("[{:>6.0}s] {line}", started.elapsed().as_secs_f64())
            })?;
            print!("{}", results.table());
        }
        Command::Decompose {
            text,
            tasks,
            top_k,
            corpus,
        } => decompose(&text, &tasks, top_k, corpus.as_deref())?,
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
