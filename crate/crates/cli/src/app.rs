//! Command implementations shared by the binary and the acceptance suite.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use graphdec_core::config::{Config, ModelConfig};
use graphdec_core::corpus::{encode_all, split_held_out, EncodedExample, ToyGrammar, Vocab, SPECIALS};
use graphdec_core::gradcheck::{FdOptions, FdReport};
use graphdec_core::graph::{CorpusExample, Head};
use graphdec_core::metrics::{evaluate, EvalOptions, EvalReport};
use graphdec_core::rw_kernel::{oracle_suite, OracleReport};
use graphdec_core::training::{joint_loss_gradcheck, mean_loss, EpochStats, Trainer};
use graphdec_core::Model;
use serde::Serialize;

use crate::corpus_io::heads_to_ints;
use crate::{checkpoint, config_file, corpus_io};

/// Settings every command accepts.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    /// `key=value` pairs applied after the config file.
    pub set: Vec<String>,
}

/// Effective configuration: `base` (or the config file, or the preset),
/// then `--set` pairs, then `--seed`.
pub fn resolve(o: &Overrides, base: Option<Config>) -> Result<Config> {
    let mut cfg = match (&o.config, base) {
        (Some(path), _) => config_file::read(path, o.preset.as_deref())?,
        (None, Some(b)) if o.preset.is_none() => b,
        (None, _) => Config::preset(o.preset.as_deref().unwrap_or("desk"))?,
    };
    for kv in &o.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects key=value, got {kv:?}");
        };
        cfg.set(k, v).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(s) = o.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

pub fn synth_corpus(cfg: &Config) -> Result<Vec<CorpusExample>> {
    Ok(ToyGrammar::new(cfg.train.seed).generate(cfg.corpus_size, cfg.max_len)?)
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sibling(path, "tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("moving output to {}", path.display()))
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Specials first, then every corpus word in sorted order.
pub fn build_vocab(corpus: &[CorpusExample]) -> Result<Vocab> {
    let words: BTreeSet<&str> = corpus
        .iter()
        .flat_map(|e| e.src.iter().chain(&e.tgt))
        .map(String::as_str)
        .filter(|w| !SPECIALS.contains(w))
        .collect();
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(words.into_iter().map(str::to_string));
    Ok(Vocab::from_tokens(tokens)?)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Vocab::from_tokens(text.lines().map(str::to_string).collect()).with_context(|| format!("in {}", path.display()))
}

#[derive(Serialize)]
struct MetricsLine {
    epoch: usize,
    ce: f64,
    graph: f64,
    loss: f64,
    seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocab,
    pub config: Config,
    /// Mean loss over the training split before any update.
    pub initial: EpochStats,
    pub epochs: Vec<EpochStats>,
    pub train: Vec<EncodedExample>,
    pub held: Vec<EncodedExample>,
    pub seconds: f64,
}

/// Trains on `corpus` (last `held_out` examples reserved). With `out`, the
/// run directory is assembled beside it and renamed into place on success.
pub fn train(cfg: &Config, corpus: &[CorpusExample], out: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        ensure!(!dir.exists(), "output directory {} already exists", dir.display());
    }
    ensure!(
        corpus.len() > cfg.held_out,
        "corpus has {} examples, fewer than held_out + 1 = {}",
        corpus.len(),
        cfg.held_out + 1
    );
    let vocab = build_vocab(corpus)?;
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = vocab.len();
    cfg.validate()?;
    let work = out.map(|d| sibling(d, "partial"));
    let res = train_into(&cfg, corpus, vocab, work.as_deref(), log);
    match (res, work, out) {
        (Ok(o), Some(w), Some(d)) => {
            fs::rename(&w, d).with_context(|| format!("moving run to {}", d.display()))?;
            Ok(o)
        }
        (Ok(o), _, _) => Ok(o),
        (Err(e), w, _) => {
            if let Some(w) = w {
                let _ = fs::remove_dir_all(w);
            }
            Err(e)
        }
    }
}

fn train_into(cfg: &Config, corpus: &[CorpusExample], vocab: Vocab, work: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let start = Instant::now();
    let all = encode_all(corpus, &vocab)?;
    let (train, held) = split_held_out(&all, cfg.held_out);
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    if let Some(w) = work {
        fs::create_dir_all(w.join("ckpt")).with_context(|| format!("creating {}", w.display()))?;
        fs::write(w.join("config.cfg"), config_file::format(cfg))?;
        fs::write(w.join("vocab.txt"), vocab.tokens().join("\n") + "\n")?;
    }
    let mut metrics = String::new();
    let record = |s: &EpochStats, metrics: &mut String| -> Result<()> {
        let line = MetricsLine {
            epoch: s.epoch,
            ce: s.ce,
            graph: s.graph,
            loss: s.loss(),
            seconds: start.elapsed().as_secs_f64(),
        };
        metrics.push_str(&serde_json::to_string(&line)?);
        metrics.push('\n');
        if let Some(w) = work {
            fs::write(w.join("metrics.jsonl"), metrics.as_bytes())?;
        }
        Ok(())
    };
    let initial = mean_loss(&model, &train)?;
    log(&format!(
        "epoch 0: ce {:.5} graph {:.5} loss {:.5} ({} params, {} train, {} held out)",
        initial.ce,
        initial.graph,
        initial.loss(),
        model.num_parameters(),
        train.len(),
        held.len()
    ));
    record(&initial, &mut metrics)?;
    let mut trainer = Trainer::new(&model, cfg.train.clone())?;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        let s = trainer.train_epoch(&mut model, &train)?;
        log(&format!(
            "epoch {}: ce {:.5} graph {:.5} loss {:.5} [{:.1}s]",
            s.epoch,
            s.ce,
            s.graph,
            s.loss(),
            start.elapsed().as_secs_f64()
        ));
        record(&s, &mut metrics)?;
        if let Some(w) = work {
            checkpoint::write(&w.join("ckpt").join(format!("epoch-{}.ckpt", s.epoch)), &model.store)?;
        }
        epochs.push(s);
    }
    if let Some(w) = work {
        checkpoint::write(&w.join("final.ckpt"), &model.store)?;
    }
    Ok(TrainOutcome {
        model,
        vocab,
        config: cfg.clone(),
        initial,
        epochs,
        train,
        held,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// A trained model directory: `config.cfg`, `vocab.txt` and a checkpoint.
pub struct Loaded {
    pub config: Config,
    pub vocab: Vocab,
    pub model: Model,
}

pub fn model_config(dir: &Path) -> Result<Config> {
    config_file::read(&dir.join("config.cfg"), None)
}

/// Loads `dir` with `cfg` (usually [`model_config`] plus overrides) and the
/// given checkpoint, or `final.ckpt`.
pub fn load_model(dir: &Path, cfg: Config, ckpt: Option<&Path>) -> Result<Loaded> {
    let vocab = read_vocab(&dir.join("vocab.txt"))?;
    ensure!(
        vocab.len() == cfg.model.vocab_size,
        "vocab.txt has {} entries but the config says {}",
        vocab.len(),
        cfg.model.vocab_size
    );
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| dir.join("final.ckpt"));
    let entries = checkpoint::read(&path)?;
    checkpoint::load_into(&mut model.store, &entries).with_context(|| format!("loading {}", path.display()))?;
    Ok(Loaded { config: cfg, vocab, model })
}

#[derive(Serialize)]
struct DecodeLine {
    src: Vec<String>,
    tokens: Vec<String>,
    heads: Vec<i64>,
    adjacency: Vec<Vec<f64>>,
    logprob: f64,
    score: f64,
    finished: bool,
}

/// One JSON line per source sentence: tokens, spanning-tree heads (`-1` is
/// the root), the symmetric target adjacency and the beam score.
pub fn decode(m: &Loaded, corpus: &[CorpusExample], beam: usize) -> Result<String> {
    let mut out = String::new();
    for (i, ex) in corpus.iter().enumerate() {
        let src = m.vocab.encode(&ex.src);
        let h = m
            .model
            .beam(&src, &ex.src_heads, beam, m.config.max_len)
            .with_context(|| format!("decoding sentence {}", i + 1))?;
        let g = h.graph();
        let line = DecodeLine {
            src: ex.src.clone(),
            tokens: m.vocab.decode(&h.tokens),
            heads: heads_to_ints(&g.heads),
            adjacency: (0..g.n).map(|r| (0..g.n).map(|c| g.adjacency.get(r, c)).collect()).collect(),
            logprob: h.logprob,
            score: h.score(),
            finished: h.finished,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Serialize)]
struct SentenceJson {
    index: usize,
    tokens: Vec<String>,
    reference: Vec<String>,
    heads: Vec<i64>,
    gold_heads: Vec<i64>,
    score: f64,
    exact: bool,
    correct_heads: usize,
}

#[derive(Serialize)]
struct ReportJson {
    exact_match: f64,
    bleu4: f64,
    uas: f64,
    forced: bool,
    beam: usize,
    sentences: Vec<SentenceJson>,
}

pub fn report_json(r: &EvalReport, vocab: &Vocab) -> Result<String> {
    let words = |ids: &[usize]| ids.iter().map(|&i| vocab.word(i).to_string()).collect();
    let heads = |h: &[Head]| heads_to_ints(h);
    let doc = ReportJson {
        exact_match: r.exact_match,
        bleu4: r.bleu4,
        uas: r.uas,
        forced: r.forced,
        beam: r.beam,
        sentences: r
            .sentences
            .iter()
            .map(|s| SentenceJson {
                index: s.index,
                tokens: words(&s.tokens),
                reference: words(&s.reference),
                heads: heads(&s.heads),
                gold_heads: heads(&s.gold_heads),
                score: s.score,
                exact: s.exact,
                correct_heads: s.correct_heads,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

pub fn eval(m: &Loaded, corpus: &[CorpusExample], opts: EvalOptions) -> Result<EvalReport> {
    let data = encode_all(corpus, &m.vocab)?;
    Ok(evaluate(&m.model, &data, opts)?)
}

pub struct GradcheckOutcome {
    pub report: FdReport,
    pub params: usize,
    pub sentence: Vec<String>,
    pub seconds: f64,
}

/// Full joint-loss gradient check on the configured model shrunk to width
/// `d_model`, for the first grammar sentence of `len` target tokens.
pub fn gradcheck(cfg: &Config, d_model: usize, len: usize) -> Result<GradcheckOutcome> {
    let start = Instant::now();
    let vocab = ToyGrammar::vocab();
    let grammar = ToyGrammar::new(cfg.train.seed);
    let ex = grammar
        .generate(500, cfg.max_len.max(graphdec_core::corpus::MAX_SENTENCE))?
        .into_iter()
        .find(|e| e.tgt.len() == len)
        .with_context(|| format!("grammar produced no {len}-token sentence"))?;
    let mc = ModelConfig {
        vocab_size: vocab.len(),
        d_model,
        ..cfg.model.clone()
    };
    let model = Model::new(mc, cfg.train.seed)?;
    let enc = EncodedExample::new(&ex, &vocab)?;
    let report = joint_loss_gradcheck(&model, &enc, FdOptions::default())?;
    Ok(GradcheckOutcome {
        report,
        params: model.num_parameters(),
        sentence: ex.tgt,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Exhaustive binary grid (graphs ≤ 4 nodes, hidden ≤ 3, p ≤ 3) plus 100
/// random real-valued cases.
pub fn kernel_check(seed: u64) -> Result<OracleReport> {
    Ok(oracle_suite(4, 3, 3, 100, seed)?)
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusExample>> {
    corpus_io::read_corpus(path)
}
