use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lacuna_core::checkpoint::{Checkpoint, ModelSpec};
use lacuna_core::corpus::{build_corpus, read_split, Normalizer, PipelineConfig, Split};
use lacuna_core::eval::{context_sweep, evaluate, EvalConfig};
use lacuna_core::model::{CharLm, LmConfig, ModelConfig, Seq2Seq, Variant};
use lacuna_core::restore::{restorer_from_checkpoint, LmRestorer, Seq2SeqRestorer};
use lacuna_core::trainer::{fit, resume_state, Progress, SamplingBounds, TrainConfig, TrainState};
use lacuna_core::vocab::{CharAlphabet, WordVocab};
use lacuna_core::{BeamConfig, RngState};
use lacuna_service::AppState;
use serde_json::json;

const ALPHABET_FILE: &str = "alphabet.tsv";

#[derive(Parser)]
#[command(name = "lacuna", version, about = "Restore missing characters in damaged texts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus preparation.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Train a restoration model or the character language model baseline.
    Train(Box<TrainArgs>),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Print ranked fills for the `?` run of a text.
    Restore(RestoreArgs),
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Normalize raw records into train/valid/test splits.
    Build {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Alphabet file; written with the default Greek alphabet if absent.
        #[arg(long)]
        alphabet: PathBuf,
    },
    /// Write the default Greek alphabet.
    Alphabet {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arch {
    Seq2seq,
    Lm,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory produced by `pipeline build`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "seq2seq")]
    arch: Arch,
    #[arg(long, default_value = "bi-word")]
    variant: Variant,
    #[arg(long, default_value_t = 100_000)]
    steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Best checkpoint path; the latest one goes to `<out>.last`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    alphabet: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    vocab_cap: usize,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    char_dim: Option<usize>,
    #[arg(long)]
    word_dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    scheduled_p: Option<f64>,
    /// Ramp scheduled sampling up from 0 over this many steps.
    #[arg(long)]
    scheduled_warmup: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    min_context: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    min_target: Option<usize>,
    #[arg(long)]
    max_target: Option<usize>,
    /// Multiply the learning rate by this factor when validation stalls.
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    valid_beam: Option<usize>,
    #[arg(long)]
    valid_top_k: Option<usize>,
    #[arg(long)]
    valid_limit: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated context lengths, e.g. `20,50,100`.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<usize>>,
    /// Checked against the checkpoint's model kind when given.
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    #[arg(long, default_value_t = 100)]
    beam: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Directory of workbench static files, served under `/ui`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Text with one run of `?` marking the characters to restore.
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long, default_value_t = 100)]
    beam: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pipeline(PipelineCommand::Build { raw, out, alphabet }) => pipeline_build(&raw, &out, &alphabet),
        Command::Pipeline(PipelineCommand::Alphabet { out }) => {
            CharAlphabet::default_greek().save(&out)?;
            Ok(())
        }
        Command::Train(args) => train(*args),
        Command::Eval(args) => eval(args),
        Command::Serve(args) => serve(args),
        Command::Restore(args) => restore(args),
    }
}

fn load_or_create_alphabet(path: &Path) -> Result<CharAlphabet> {
    if path.exists() {
        return CharAlphabet::load(path).with_context(|| format!("reading {}", path.display()));
    }
    let a = CharAlphabet::default_greek();
    a.save(path)?;
    Ok(a)
}

fn pipeline_build(raw: &Path, out: &Path, alphabet: &Path) -> Result<()> {
    let alphabet = load_or_create_alphabet(alphabet)?;
    let normalizer = Normalizer::new(PipelineConfig::default())?;
    let summary = build_corpus(raw, out, &alphabet, &normalizer)?;
    alphabet.save(out.join(ALPHABET_FILE))?;
    for e in &summary.rejections {
        eprintln!("rejected: {e:?}");
    }
    println!("{}", json!({ "manifest": summary.manifest, "report": summary.report }));
    Ok(())
}

fn data_alphabet(data: &Path, explicit: Option<&Path>) -> Result<CharAlphabet> {
    let path = explicit.map_or_else(|| data.join(ALPHABET_FILE), Path::to_path_buf);
    if path.exists() {
        Ok(CharAlphabet::load(&path).with_context(|| format!("reading {}", path.display()))?)
    } else if explicit.is_some() {
        bail!("alphabet file {} not found", path.display())
    } else {
        Ok(CharAlphabet::default_greek())
    }
}

fn train_config(a: &TrainArgs, lm: Option<&LmConfig>) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let b = SamplingBounds::default();
    let valid_beam = BeamConfig::new(
        a.valid_beam.unwrap_or(d.valid_beam.beam_width),
        a.valid_top_k.unwrap_or(d.valid_beam.top_k),
    )?;
    Ok(TrainConfig {
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        learning_rate: a
            .learning_rate
            .or(lm.map(|c| c.learning_rate))
            .unwrap_or(d.learning_rate),
        clip: a.clip.or(lm.map(|c| c.clip)).unwrap_or(d.clip),
        scheduled_p: a.scheduled_p.unwrap_or(d.scheduled_p),
        scheduled_warmup: a.scheduled_warmup.unwrap_or(d.scheduled_warmup),
        dropout: a.dropout.or(lm.map(|c| c.dropout)).unwrap_or(d.dropout),
        max_steps: a.steps,
        checkpoint_every: a.checkpoint_every.unwrap_or(d.checkpoint_every),
        seed: a.seed,
        bounds: SamplingBounds {
            min_context: a.min_context.unwrap_or(b.min_context),
            max_context: a.max_context.unwrap_or(b.max_context),
            min_target: a.min_target.unwrap_or(b.min_target),
            max_target: a.max_target.unwrap_or(b.max_target),
        },
        lr_decay: a.lr_decay.or(lm.map(|c| c.decay)),
        valid_beam,
        valid_limit: a.valid_limit,
    })
}

fn progress_line(p: &Progress) -> serde_json::Value {
    json!({
        "step": p.step,
        "loss": p.loss,
        "grad_norm": p.grad_norm,
        "valid_metric": p.valid.metric,
        "valid_cer": p.valid.cer,
        "valid_top20": p.valid.top20,
        "valid_loss": p.valid.loss,
        "learning_rate": p.learning_rate,
        "best": p.best,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let train_set = read_split(&a.data, Split::Train)?;
    let valid_set = read_split(&a.data, Split::Valid)?;
    if train_set.is_empty() {
        bail!("{} has no training records", a.data.display());
    }
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let alphabet = match &resume {
        Some(c) => c.alphabet.clone(),
        None => data_alphabet(&a.data, a.alphabet.as_deref())?,
    };
    let mut init_rng = RngState::from_seed(a.seed).rng();
    let start = match &resume {
        Some(c) => resume_state::<f32>(c),
        None => TrainState::fresh(RngState::from_seed(a.seed.wrapping_add(1))),
    };
    let last_path = with_suffix(&a.out, ".last");
    let best_path = a.out.clone();
    let mut stdout = std::io::stdout().lock();
    let mut sink = |ckpt: &Checkpoint, p: &Progress| -> lacuna_core::Result<()> {
        ckpt.save(&last_path)?;
        if p.best {
            ckpt.save(&best_path)?;
        }
        let _ = writeln!(stdout, "{}", progress_line(p));
        Ok(())
    };

    let outcome = match a.arch {
        Arch::Seq2seq => {
            let restorer = match &resume {
                Some(c) => lacuna_core::trainer::seq2seq_from_checkpoint::<f32>(c)?,
                None => {
                    let vocab = a
                        .variant
                        .uses_words()
                        .then(|| WordVocab::build(train_set.iter().map(|r| r.text.as_str()), a.vocab_cap));
                    let mut cfg = ModelConfig::new(a.variant, alphabet.len(), vocab.as_ref().map_or(0, |v| v.len()));
                    cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
                    cfg.layers = a.layers.unwrap_or(cfg.layers);
                    cfg.char_dim = a.char_dim.unwrap_or(cfg.char_dim);
                    cfg.word_dim = a.word_dim.unwrap_or(cfg.word_dim);
                    cfg.dropout = a.dropout.unwrap_or(cfg.dropout);
                    let model = Seq2Seq::<f32>::init(cfg, &mut init_rng)?;
                    Seq2SeqRestorer::new(model, alphabet.clone(), vocab)?
                }
            };
            if let Some(v) = &restorer.vocab {
                v.save(with_suffix(&a.out, ".vocab.tsv"))?;
            }
            let config = train_config(&a, None)?;
            fit(restorer, &train_set, &valid_set, &config, start, &mut sink)?
        }
        Arch::Lm => {
            let restorer = match &resume {
                Some(c) => lacuna_core::trainer::lm_from_checkpoint::<f32>(c)?,
                None => {
                    let mut cfg = LmConfig::new(alphabet.len());
                    cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
                    cfg.layers = a.layers.unwrap_or(cfg.layers);
                    cfg.char_dim = a.char_dim.unwrap_or(cfg.char_dim);
                    cfg.dropout = a.dropout.unwrap_or(cfg.dropout);
                    LmRestorer::new(CharLm::<f32>::init(cfg, &mut init_rng)?, alphabet.clone())?
                }
            };
            let config = train_config(&a, Some(&restorer.model.config))?;
            fit(restorer, &train_set, &valid_set, &config, start, &mut sink)?
        }
    };
    alphabet.save(with_suffix(&a.out, ".alphabet.tsv"))?;
    eprintln!(
        "trained {} steps; best checkpoint at step {} -> {}",
        outcome.last.step,
        outcome.best.step,
        a.out.display()
    );
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .with_context(|| format!("unknown split {s:?}; expected train, valid or test"))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    match (a.arch, &ckpt.model) {
        (Some(Arch::Lm), ModelSpec::Seq2seq(_)) => bail!("{} holds a seq2seq model", a.model.display()),
        (Some(Arch::Seq2seq), ModelSpec::Lm(_)) => bail!("{} holds a language model", a.model.display()),
        _ => {}
    }
    let restorer = restorer_from_checkpoint(ckpt)?;
    let records = read_split(&a.data, parse_split(&a.split)?)?;
    let config = EvalConfig {
        beam: BeamConfig::new(a.beam, BeamConfig::default().top_k.min(a.beam))?,
        seed: a.seed,
        limit: a.limit,
        ..EvalConfig::default()
    };
    let result = evaluate(&records, restorer.as_ref(), &config)?;
    let mut report = json!({
        "model": restorer.describe(),
        "split": a.split,
        "examples": result.examples,
        "cer": result.cer,
        "top20": result.top20,
    });
    if let Some(lengths) = &a.sweep {
        let points = context_sweep(&records, restorer.as_ref(), lengths, &config)?;
        report["sweep"] = serde_json::to_value(&points)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        println!("context\ttop20\tcer");
        for p in points {
            println!("{}\t{:.4}\t{:.4}", p.context, p.top20, p.cer);
        }
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    let restorer = restorer_from_checkpoint(ckpt)?;
    let model_id = format!(
        "{}:{}",
        a.model
            .file_name()
            .map_or_else(|| a.model.display().to_string(), |n| n.to_string_lossy().into_owned()),
        restorer.describe()
    );
    let state = AppState::new(Arc::from(restorer), &a.data, model_id)?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad listen address")?;
    eprintln!("listening on http://{addr}");
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(lacuna_service::serve(Arc::new(state), a.ui_dir, addr))?;
    Ok(())
}

fn restore(a: RestoreArgs) -> Result<()> {
    let restorer = restorer_from_checkpoint(Checkpoint::load(&a.model)?)?;
    let beam = BeamConfig::new(a.beam, a.top.min(a.beam))?;
    let hyps = restorer.propose(&a.text, &beam)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&hyps)?);
        return Ok(());
    }
    for (rank, h) in hyps.iter().enumerate() {
        println!(
            "{:>3}  {:>10.4}  {:>6.2}%  {}",
            rank + 1,
            h.log_prob,
            100.0 * h.log_prob.exp(),
            h.text
        );
    }
    Ok(())
}
