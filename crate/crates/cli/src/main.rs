use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{ensure, Result};
use clap::{Args, Parser, Subcommand};
use graphdec::app::{self, Overrides};
use graphdec::{config_file, corpus_io};
use graphdec_core::config::Config;
use graphdec_core::metrics::EvalOptions;

/// Dynamic spatial-temporal graph convolutional decoder.
#[derive(Parser)]
#[command(name = "graphdec", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; its keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting preset: desk, paper or tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Seed for corpus generation, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Extra `key=value` setting, applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bilingual corpus with gold graphs.
    Synth {
        /// Output corpus (one JSON example per line).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes config, vocabulary, checkpoints and metrics.
    Train {
        /// Training corpus; synthesised from the config when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Run directory to create (must not exist).
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-decode source sentences with a trained model.
    Decode {
        /// Run directory produced by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Checkpoint to load instead of `final.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Beam width (defaults to the config's).
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score a trained model on a corpus and write a JSON report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        /// Feed reference tokens and score only the emitted graphs.
        #[arg(long)]
        forced: bool,
        /// Add-one smoothing for the 2..4-gram BLEU precisions.
        #[arg(long)]
        smooth: bool,
        /// Only score the trailing held-out examples of the corpus.
        #[arg(long)]
        held_out_only: bool,
    },
    /// Finite-difference check of the full joint loss gradient.
    Gradcheck {
        /// Model width for the check.
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        /// Target length of the checked sentence.
        #[arg(long, default_value_t = 6)]
        len: usize,
    },
    /// Random-walk kernel against walk enumeration and the dense reference.
    KernelCheck,
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        config: c.config.clone(),
        preset: c.preset.clone(),
        seed: c.seed,
        set: c.set.clone(),
    }
}

fn announce(cfg: &Config) {
    println!("# effective config");
    print!("{}", config_file::format(cfg));
}

fn run(cli: Cli) -> Result<()> {
    let o = overrides(&cli.common);
    match cli.command {
        Command::Synth { out } => {
            let cfg = app::resolve(&o, None)?;
            announce(&cfg);
            let corpus = app::synth_corpus(&cfg)?;
            app::write_atomic(&out, corpus_io::format_corpus(&corpus).as_bytes())?;
            println!("wrote {} examples to {}", corpus.len(), out.display());
        }
        Command::Train { corpus, out } => {
            let cfg = app::resolve(&o, None)?;
            announce(&cfg);
            let data = match corpus {
                Some(p) => corpus_io::read_corpus(&p)?,
                None => app::synth_corpus(&cfg)?,
            };
            let r = app::train(&cfg, &data, Some(&out), &mut |s| println!("{s}"))?;
            println!("trained in {:.1}s; run written to {}", r.seconds, out.display());
        }
        Command::Decode { model, checkpoint, corpus, out, beam } => {
            let cfg = app::resolve(&o, Some(app::model_config(&model)?))?;
            announce(&cfg);
            let m = app::load_model(&model, cfg, checkpoint.as_deref())?;
            let data = corpus_io::read_corpus(&corpus)?;
            let text = app::decode(&m, &data, beam.unwrap_or(m.config.train.beam))?;
            app::write_atomic(&out, text.as_bytes())?;
            println!("decoded {} sentences to {}", data.len(), out.display());
        }
        Command::Eval { model, checkpoint, corpus, out, beam, forced, smooth, held_out_only } => {
            let cfg = app::resolve(&o, Some(app::model_config(&model)?))?;
            announce(&cfg);
            let m = app::load_model(&model, cfg, checkpoint.as_deref())?;
            let mut data = corpus_io::read_corpus(&corpus)?;
            if held_out_only {
                let keep = m.config.held_out.min(data.len());
                data.drain(..data.len() - keep);
            }
            ensure!(!data.is_empty(), "no examples to evaluate in {}", corpus.display());
            let opts = EvalOptions {
                beam: beam.unwrap_or(m.config.train.beam),
                max_len: m.config.max_len,
                forced,
                smooth_bleu: smooth,
            };
            let r = app::eval(&m, &data, opts)?;
            app::write_atomic(&out, app::report_json(&r, &m.vocab)?.as_bytes())?;
            println!(
                "exact match {:.4}  bleu4 {:.4}  uas {:.4}  ({} sentences)",
                r.exact_match,
                r.bleu4,
                r.uas,
                r.sentences.len()
            );
        }
        Command::Gradcheck { d_model, len } => {
            let cfg = app::resolve(&o, None)?;
            announce(&cfg);
            let g = app::gradcheck(&cfg, d_model, len)?;
            let r = &g.report;
            println!(
                "{} params, sentence {:?}: max rel err {:.3e}, {:.4} of {} coordinates below 1e-4, {} skipped as non-smooth [{:.1}s]",
                g.params,
                g.sentence.join(" "),
                r.max_rel_error,
                r.fraction_below(1e-4),
                r.checked.len(),
                r.skipped.len(),
                g.seconds
            );
            ensure!(
                r.max_rel_error < 1e-3 && r.fraction_below(1e-4) >= 0.99,
                "gradient check failed: max rel err {:.3e}",
                r.max_rel_error
            );
        }
        Command::KernelCheck => {
            let cfg = app::resolve(&o, None)?;
            announce(&cfg);
            let r = app::kernel_check(cfg.train.seed)?;
            println!(
                "{} mismatches: exhaustive {}/{} (max diff {:.1e}), random {}/{} (max rel diff {:.1e})",
                r.mismatches(),
                r.exhaustive_mismatches,
                r.exhaustive_cases,
                r.max_exhaustive_diff,
                r.random_mismatches,
                r.random_cases,
                r.max_random_diff
            );
            ensure!(r.mismatches() == 0, "{} kernel mismatches", r.mismatches());
        }
    }
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
