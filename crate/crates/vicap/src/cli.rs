//! Command-line front end.
//!
//! Every value can come from three places with rising precedence: built-in
//! default, `--config` file (flat `key=value` lines), command-line flag.
//! The fully resolved configuration is snapshotted next to each command's
//! output so a run can be reproduced from its artifacts alone. Progress
//! goes to stderr, data to files (or stdout for reports).
//!
//! Exit codes: 0 success, 1 usage/configuration errors, 2 data-format
//! errors, 3 numerical failures.

use crate::decoder::{Branch, DecoderDims, DESK_DIMS, FULL_DIMS};
use crate::featio::{
    read_caption_file, synth_generate, write_caption_file, write_config_snapshot, Dataset,
    SynthConfig, Vocabulary,
};
use crate::fusion::{rerank, train_vse, vse_checkpoint, vse_from_checkpoint, VseConfig};
use crate::metrics::{compute_doc_freq, evaluate_corpus};
use crate::train::{
    load_checkpoint, model_checkpoint, model_from_checkpoint, save_checkpoint, train_ce, train_rl,
    LogEntry, TrainConfig,
};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "vicap", version, about = "Video captioning workbench")]
struct Cli {
    /// Flat key=value configuration file; command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker count; execution is always sequential, values above 1 are
    /// accepted and ignored for reproducibility.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic concept dataset.
    Synth(SynthArgs),
    /// Build a vocabulary from a caption file.
    Vocab(VocabArgs),
    /// Cross-entropy training.
    TrainCe(TrainArgs),
    /// Self-critical fine-tuning from a checkpoint.
    TrainRl(TrainArgs),
    /// Decode captions with a trained model.
    Decode(DecodeArgs),
    /// Score a candidate caption file against dataset references.
    Eval(EvalArgs),
    /// Train the visual-semantic embedding.
    TrainVse(VseArgs),
    /// Pick the best of several candidate caption files per video.
    Fuse(FuseArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    dt: Option<usize>,
    #[arg(long)]
    da: Option<usize>,
    #[arg(long)]
    dobj: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct VocabArgs {
    /// Caption TSV (video_id TAB caption [TAB caption…]).
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (manifest.tsv, captions.tsv, vocab.txt).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint (required for train-rl, optional for train-ce).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    branch: Option<String>,
    /// Model width: "desk" or "full".
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    w_cider: Option<f64>,
    #[arg(long)]
    w_bleu: Option<f64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    early_stop: Option<bool>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    init: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Beam length-normalization exponent.
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Candidate caption TSV, one caption per video.
    #[arg(long)]
    candidates: PathBuf,
    /// Report output path; a per-video TSV lands beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VseArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    embed: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained VSE checkpoint.
    #[arg(long)]
    vse: PathBuf,
    /// Candidate caption files, one per branch; repeat the flag.
    #[arg(long = "candidates", required = true)]
    candidates: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Key=value pairs loaded from --config.
struct FileCfg {
    map: HashMap<String, String>,
}

impl FileCfg {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(p) = path {
            let body =
                fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            for (lineno, line) in body.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Usage(format!(
                        "{} line {}: expected key=value",
                        p.display(),
                        lineno + 1
                    ))
                })?;
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(FileCfg { map })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::Usage(format!("config key {key:?}: cannot parse {raw:?}"))
            }),
        }
    }
}

/// Flag wins, then config file, then default.
fn resolve<T: std::str::FromStr + Clone>(
    flag: &Option<T>,
    cfg: &FileCfg,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    Ok(cfg.get(key)?.unwrap_or(default))
}

fn parse_scale(s: &str) -> Result<DecoderDims> {
    match s {
        "desk" => Ok(DESK_DIMS),
        "full" => Ok(FULL_DIMS),
        other => Err(Error::Usage(format!(
            "scale must be desk or full, got {other:?}"
        ))),
    }
}

fn snapshot_path(out: &Path) -> PathBuf {
    if out.extension().is_some() {
        out.with_extension("config")
    } else {
        out.join("config")
    }
}

fn write_snapshot(out: &Path, pairs: &[(String, String)]) -> Result<()> {
    write_config_snapshot(pairs, &snapshot_path(out))
}

fn kv(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn write_log(out: &Path, entries: &[LogEntry]) -> Result<()> {
    let body: String = entries.iter().map(|e| e.to_line() + "\n").collect();
    let path = out.with_extension("log");
    fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn resolve_train(a: &TrainArgs, cfg: &FileCfg, defaults: &TrainConfig) -> Result<TrainConfig> {
    let branch = Branch::parse(&resolve(
        &a.branch,
        cfg,
        "branch",
        defaults.branch.tag().to_string(),
    )?)?;
    let scale = resolve(&a.scale, cfg, "scale", "desk".to_string())?;
    Ok(TrainConfig {
        lr: resolve(&a.lr, cfg, "lr", defaults.lr)?,
        batch_size: resolve(&a.batch, cfg, "batch", defaults.batch_size)?,
        max_steps: resolve(&a.steps, cfg, "steps", defaults.max_steps)?,
        seed: resolve(&a.seed, cfg, "seed", defaults.seed)?,
        clip: resolve(&a.clip, cfg, "clip", defaults.clip)?,
        lambda_rl: resolve(&a.lambda, cfg, "lambda", defaults.lambda_rl)?,
        w_cider: resolve(&a.w_cider, cfg, "w_cider", defaults.w_cider)?,
        w_bleu: resolve(&a.w_bleu, cfg, "w_bleu", defaults.w_bleu)?,
        max_len: resolve(&a.max_len, cfg, "max_len", defaults.max_len)?,
        branch,
        dims: parse_scale(&scale)?,
        log_every: resolve(&a.log_every, cfg, "log_every", defaults.log_every)?,
        early_stop: resolve(&a.early_stop, cfg, "early_stop", defaults.early_stop)?,
    })
}

fn train_snapshot(cmd: &str, a: &TrainArgs, t: &TrainConfig) -> Vec<(String, String)> {
    vec![
        kv("command", cmd),
        kv("data", a.data.display()),
        kv("init", a.init.as_ref().map_or(String::from("-"), |p| p.display().to_string())),
        kv("lr", t.lr),
        kv("batch", t.batch_size),
        kv("steps", t.max_steps),
        kv("seed", t.seed),
        kv("clip", t.clip),
        kv("lambda", t.lambda_rl),
        kv("w_cider", t.w_cider),
        kv("w_bleu", t.w_bleu),
        kv("max_len", t.max_len),
        kv("branch", t.branch.tag()),
        kv("hidden", t.dims.hidden),
        kv("embed", t.dims.embed),
        kv("attn", t.dims.attn),
        kv("log_every", t.log_every),
        kv("early_stop", t.early_stop),
    ]
}

fn emit_log(entries: &[LogEntry]) {
    for e in entries {
        eprintln!("{}", e.to_line());
    }
}

fn cmd_synth(a: &SynthArgs, cfg: &FileCfg) -> Result<()> {
    let d = SynthConfig::default();
    let sc = SynthConfig {
        num_videos: resolve(&a.videos, cfg, "videos", d.num_videos)?,
        num_concepts: resolve(&a.concepts, cfg, "concepts", d.num_concepts)?,
        dt: resolve(&a.dt, cfg, "dt", d.dt)?,
        da: resolve(&a.da, cfg, "da", d.da)?,
        d_obj: resolve(&a.dobj, cfg, "dobj", d.d_obj)?,
        noise_scale: resolve(&a.noise, cfg, "noise", d.noise_scale)?,
    };
    let seed = resolve(&a.seed, cfg, "seed", 0)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let ds = synth_generate(&sc, seed, &a.out)?;
    write_snapshot(
        &a.out,
        &[
            kv("command", "synth"),
            kv("seed", seed),
            kv("videos", sc.num_videos),
            kv("concepts", sc.num_concepts),
            kv("dt", sc.dt),
            kv("da", sc.da),
            kv("dobj", sc.d_obj),
            kv("noise", sc.noise_scale),
        ],
    )?;
    eprintln!(
        "wrote {} videos, vocabulary of {} tokens, to {}",
        ds.items.len(),
        ds.vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_vocab(a: &VocabArgs, cfg: &FileCfg) -> Result<()> {
    let min_count = resolve(&a.min_count, cfg, "min_count", 1)?;
    let records = read_caption_file(&a.captions)?;
    let texts: Vec<String> = records
        .iter()
        .flat_map(|(_, caps)| caps.iter().cloned())
        .collect();
    let vocab = Vocabulary::build(&texts, min_count)?;
    vocab.save(&a.out)?;
    write_snapshot(
        &a.out,
        &[
            kv("command", "vocab"),
            kv("captions", a.captions.display()),
            kv("min_count", min_count),
            kv("size", vocab.len()),
            kv("hash", vocab.hash()),
        ],
    )?;
    eprintln!("vocabulary: {} tokens", vocab.len());
    Ok(())
}

fn cmd_train_ce(a: &TrainArgs, cfg: &FileCfg) -> Result<()> {
    let t = resolve_train(a, cfg, &TrainConfig::default())?;
    let data = Dataset::load(&a.data)?;
    let mut log = Vec::new();
    let model = train_ce(&data, &t, &mut log)?;
    emit_log(&log);
    save_checkpoint(&model_checkpoint(&model), &a.out)?;
    write_log(&a.out, &log)?;
    write_snapshot(&a.out, &train_snapshot("train-ce", a, &t))?;
    eprintln!("checkpoint at step {} → {}", model.step, a.out.display());
    Ok(())
}

fn cmd_train_rl(a: &TrainArgs, cfg: &FileCfg) -> Result<()> {
    let defaults = TrainConfig {
        max_steps: 500,
        lr: 1e-4,
        early_stop: false,
        ..TrainConfig::default()
    };
    let mut t = resolve_train(a, cfg, &defaults)?;
    let init = a
        .init
        .as_ref()
        .ok_or_else(|| Error::Usage("train-rl requires --init".into()))?;
    let data = Dataset::load(&a.data)?;
    let model = model_from_checkpoint(&load_checkpoint(init)?, Some(&data.vocab))?;
    // the checkpoint defines the architecture and branch; an explicit
    // --branch must agree with it
    if let Some(b) = &a.branch {
        if Branch::parse(b)? != model.branch {
            return Err(Error::Usage(format!(
                "--branch {b} conflicts with checkpoint branch {}",
                model.branch.tag()
            )));
        }
    }
    t.branch = model.branch;
    t.dims = model.dec.dims;
    let mut log = Vec::new();
    let model = train_rl(&data, &t, model, &mut log)?;
    emit_log(&log);
    save_checkpoint(&model_checkpoint(&model), &a.out)?;
    write_log(&a.out, &log)?;
    write_snapshot(&a.out, &train_snapshot("train-rl", a, &t))?;
    eprintln!("checkpoint at step {} → {}", model.step, a.out.display());
    Ok(())
}

fn cmd_decode(a: &DecodeArgs, cfg: &FileCfg) -> Result<()> {
    let beam = resolve(&a.beam, cfg, "beam", 1)?;
    let max_len = resolve(&a.max_len, cfg, "max_len", 8)?;
    let gamma = resolve(&a.gamma, cfg, "gamma", 0.0)?;
    let data = Dataset::load(&a.data)?;
    let model = model_from_checkpoint(&load_checkpoint(&a.init)?, Some(&data.vocab))?;
    let mut records = Vec::with_capacity(data.items.len());
    for item in &data.items {
        let ids = if beam <= 1 {
            model.greedy_caption(item, max_len)?
        } else {
            let mut tape = crate::diffcore::Tape::new();
            let enc = model.enc.encode(&mut tape, &model.store, &item.features)?;
            let vars = model.dec.lease(&mut tape, &model.store);
            crate::decoder::beam_decode(&mut tape, &vars, &enc, model.branch, beam, max_len, gamma)?
        };
        records.push((
            item.features.video_id.clone(),
            vec![data.vocab.decode(&ids)],
        ));
    }
    write_caption_file(&records, &a.out)?;
    write_snapshot(
        &a.out,
        &[
            kv("command", "decode"),
            kv("data", a.data.display()),
            kv("init", a.init.display()),
            kv("beam", beam),
            kv("max_len", max_len),
            kv("gamma", gamma),
            kv("branch", model.branch.tag()),
        ],
    )?;
    eprintln!("decoded {} videos → {}", records.len(), a.out.display());
    Ok(())
}

/// Candidate captions keyed and ordered by the dataset manifest.
fn aligned_candidates(data: &Dataset, path: &Path) -> Result<Vec<Vec<String>>> {
    let records = read_caption_file(path)?;
    let by_id: HashMap<&str, &Vec<String>> =
        records.iter().map(|(id, c)| (id.as_str(), c)).collect();
    data.items
        .iter()
        .map(|item| {
            let id = item.features.video_id.as_str();
            let caps = by_id
                .get(id)
                .ok_or_else(|| Error::Format(format!("{}: no candidate for {id}", path.display())))?;
            if caps.is_empty() {
                return Err(Error::Format(format!(
                    "{}: empty candidate list for {id}",
                    path.display()
                )));
            }
            Ok(vec![caps[0].clone()])
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let cands: Vec<Vec<String>> = aligned_candidates(&data, &a.candidates)?
        .into_iter()
        .map(|caps| crate::featio::tokenize(&caps[0]))
        .collect();
    let refs = data.reference_tokens();
    let df = compute_doc_freq(&refs);
    let report = evaluate_corpus(&cands, &refs, &df)?;
    fs::write(&a.out, report.to_kv()).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let ids: Vec<String> = data
        .items
        .iter()
        .map(|i| i.features.video_id.clone())
        .collect();
    let pv_path = a.out.with_extension("per_video.tsv");
    fs::write(&pv_path, report.per_video_tsv(&ids))
        .map_err(|e| Error::io(pv_path.display().to_string(), e))?;
    write_snapshot(
        &a.out,
        &[
            kv("command", "eval"),
            kv("data", a.data.display()),
            kv("candidates", a.candidates.display()),
        ],
    )?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_train_vse(a: &VseArgs, cfg: &FileCfg) -> Result<()> {
    let d = VseConfig::default();
    let v = VseConfig {
        lr: resolve(&a.lr, cfg, "lr", d.lr)?,
        batch_size: resolve(&a.batch, cfg, "batch", d.batch_size)?,
        max_steps: resolve(&a.steps, cfg, "steps", d.max_steps)?,
        seed: resolve(&a.seed, cfg, "seed", d.seed)?,
        clip: resolve(&a.clip, cfg, "clip", d.clip)?,
        embed: resolve(&a.embed, cfg, "embed", d.embed)?,
        margin: resolve(&a.margin, cfg, "margin", d.margin)?,
        log_every: resolve(&a.log_every, cfg, "log_every", d.log_every)?,
    };
    let data = Dataset::load(&a.data)?;
    let mut log = Vec::new();
    let model = train_vse(&data, &v, &mut log)?;
    emit_log(&log);
    save_checkpoint(&vse_checkpoint(&model), &a.out)?;
    write_log(&a.out, &log)?;
    write_snapshot(
        &a.out,
        &[
            kv("command", "train-vse"),
            kv("data", a.data.display()),
            kv("lr", v.lr),
            kv("batch", v.batch_size),
            kv("steps", v.max_steps),
            kv("seed", v.seed),
            kv("clip", v.clip),
            kv("embed", v.embed),
            kv("margin", v.margin),
            kv("log_every", v.log_every),
        ],
    )?;
    eprintln!("vse checkpoint → {}", a.out.display());
    Ok(())
}

fn cmd_fuse(a: &FuseArgs) -> Result<()> {
    if a.candidates.len() < 2 {
        return Err(Error::Usage("fuse needs at least two --candidates files".into()));
    }
    let data = Dataset::load(&a.data)?;
    let vse = vse_from_checkpoint(&load_checkpoint(&a.vse)?, Some(&data.vocab))?;
    let per_file: Vec<Vec<Vec<String>>> = a
        .candidates
        .iter()
        .map(|p| aligned_candidates(&data, p))
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(data.items.len());
    for (i, item) in data.items.iter().enumerate() {
        let texts: Vec<&str> = per_file.iter().map(|f| f[i][0].as_str()).collect();
        let id_lists: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| {
                crate::featio::tokenize(t)
                    .iter()
                    .map(|tok| data.vocab.id(tok).unwrap_or(crate::featio::UNK))
                    .collect()
            })
            .collect();
        let pick = rerank(&vse, &item.features, &id_lists)?;
        records.push((item.features.video_id.clone(), vec![texts[pick].to_string()]));
    }
    write_caption_file(&records, &a.out)?;
    write_snapshot(
        &a.out,
        &[
            kv("command", "fuse"),
            kv("data", a.data.display()),
            kv("vse", a.vse.display()),
            kv(
                "candidates",
                a.candidates
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
        ],
    )?;
    eprintln!("fused {} videos → {}", records.len(), a.out.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = FileCfg::load(cli.config.as_deref())?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::Usage("workers must be at least 1".into()));
        }
        if w > 1 {
            eprintln!("note: execution is sequential; --workers {w} ignored");
        }
    }
    match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, &cfg),
        Cmd::Vocab(a) => cmd_vocab(a, &cfg),
        Cmd::TrainCe(a) => cmd_train_ce(a, &cfg),
        Cmd::TrainRl(a) => cmd_train_rl(a, &cfg),
        Cmd::Decode(a) => cmd_decode(a, &cfg),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::TrainVse(a) => cmd_train_vse(a, &cfg),
        Cmd::Fuse(a) => cmd_fuse(a),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Value(_) => 1,
        Error::Format(_) | Error::Length(_) | Error::Shape(_) | Error::Io { .. } => 2,
        Error::Numeric(_) => 3,
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // --help/--version print and succeed; real parse errors are usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
