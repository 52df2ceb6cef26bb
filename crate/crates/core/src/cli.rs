//! The `narvid` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataio::{read_container, write_container, Dataset};
use crate::error::{NarvidError, Result};
use crate::filtering::{filter_pair, FilterMode, FilterSelection};
use crate::inference::{model_matrices, report, zero_shot_matrices, Direction, FusionMode};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::objective::{train, TrainConfig};
use crate::synthlab::{gen_planted, PlantSpec};

#[derive(Debug, Parser)]
#[command(name = "narvid", version, about = "Narration-aware text-video retrieval over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted synthetic dataset.
    Gen(GenArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Score a dataset and print a retrieval report.
    Eval(EvalArgs),
    /// Dump the filter selections of one query/candidate pair.
    Filter(FilterArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 64)]
    pub episodes: usize,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    #[arg(long, default_value_t = 6)]
    pub words: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.6)]
    pub signal: f64,
    #[arg(long, default_value_t = 0.25)]
    pub corrupt: f64,
    #[arg(long, default_value_t = 0.25)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON config; absent keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON-lines step log; stdout when omitted.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoringArgs {
    /// Nucleus threshold.
    #[arg(long, default_value_t = 0.4)]
    pub p: f64,
    /// Keep a fixed number of features instead of a nucleus.
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub tau: f64,
}

impl ScoringArgs {
    fn mode(&self) -> Result<FilterMode> {
        let mode = match self.top_k {
            Some(k) => FilterMode::TopK(k),
            None => FilterMode::Nucleus(self.p),
        };
        mode.validate().map_err(|e| NarvidError::Usage(e.to_string()))?;
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(NarvidError::Usage(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(mode)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "standardized", value_parser = parse_mode)]
    pub mode: FusionMode,
    #[arg(long, default_value = "t2v", value_parser = parse_direction)]
    pub direction: Direction,
    /// Score raw features against the EOS embedding; ignores --ckpt.
    #[arg(long)]
    pub zero_shot: bool,
    #[command(flatten)]
    pub scoring: ScoringArgs,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub query: usize,
    #[arg(long)]
    pub candidate: usize,
    #[command(flatten)]
    pub scoring: ScoringArgs,
}

fn parse_mode(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse().map_err(|e: NarvidError| e.to_string())
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    s.parse().map_err(|e: NarvidError| e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("narvid: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Filter(a) => cmd_filter(&a),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| NarvidError::io(p, e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json(out: &mut dyn Write, value: &impl Serialize, path: Option<&Path>) -> Result<()> {
    let io_err = |e: io::Error| NarvidError::io(path.unwrap_or(Path::new("<stdout>")), e);
    serde_json::to_writer_pretty(&mut *out, value).map_err(|e| io_err(e.into()))?;
    writeln!(out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec = PlantSpec {
        episodes: a.episodes,
        frames: a.frames,
        words: a.words,
        dim: a.dim,
        seed: a.seed,
        signal: a.signal,
        corrupt: a.corrupt,
        overlap: a.overlap,
    };
    write_container(&gen_planted(&spec)?, &a.out)
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p).map_err(|e| NarvidError::io(p, e))?),
    }
}

/// Diagnostics written when training hits a non-finite value.
#[derive(Debug, Serialize)]
struct NumericDump<'a> {
    error: String,
    step: usize,
    epoch: u64,
    batch: &'a [usize],
    batch_ids: Vec<&'a str>,
    /// Batch episodes with a near-zero input row, the usual culprits.
    suspects: Vec<&'a str>,
    last_good_checkpoint: Option<PathBuf>,
    config: &'a TrainConfig,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn min_row_norm(ds: &Dataset, i: usize) -> f64 {
    let ep = &ds.episodes()[i];
    [&ep.query_tokens, &ep.frames, &ep.captions]
        .iter()
        .flat_map(|t| t.row_iter())
        .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(f64::INFINITY, f64::min)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = read_config(a.config.as_deref())?;
    let ds = read_container(&a.data)?;
    let mut log = output(a.log.as_deref())?;
    let mut log_err = None;
    let result = train(&ds, &cfg, |step| {
        if log_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, step).map_err(io::Error::from).and_then(|_| writeln!(log)) {
                log_err = Some(e);
            }
        }
    });
    log.flush().map_err(|e| NarvidError::io(a.log.as_deref().unwrap_or(Path::new("<stdout>")), e))?;
    if let Some(e) = log_err {
        return Err(NarvidError::io(a.log.as_deref().unwrap_or(Path::new("<stdout>")), e));
    }
    match result {
        Ok(params) => save_checkpoint(&params, &a.out),
        Err(fail) if matches!(fail.error, NarvidError::Numeric(_)) => {
            let last_good = match &fail.last_good {
                Some(p) => {
                    let path = with_suffix(&a.out, ".last-good");
                    save_checkpoint(p, &path)?;
                    Some(path)
                }
                None => None,
            };
            let ids = |idx: &[usize]| idx.iter().map(|&i| ds.episodes()[i].id.as_str()).collect::<Vec<_>>();
            let suspects: Vec<usize> = fail.batch.iter().copied().filter(|&i| min_row_norm(&ds, i) < 1e-6).collect();
            let dump = NumericDump {
                error: fail.error.to_string(),
                step: fail.step,
                epoch: fail.epoch,
                batch: &fail.batch,
                batch_ids: ids(&fail.batch),
                suspects: ids(&suspects),
                last_good_checkpoint: last_good,
                config: &cfg,
            };
            let path = with_suffix(&a.out, ".nan-dump.json");
            let mut f = output(Some(&path))?;
            write_json(&mut f, &dump, Some(&path))?;
            let detail = match &fail.error {
                NarvidError::Numeric(msg) => msg.clone(),
                other => other.to_string(),
            };
            Err(NarvidError::Numeric(format!("step {}: {detail}; diagnostics in {}", fail.step, path.display())))
        }
        Err(fail) => Err(fail.error),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let filter = a.scoring.mode()?;
    let matrices = if a.zero_shot {
        zero_shot_matrices(&read_container(&a.data)?)
    } else {
        let ckpt = a
            .ckpt
            .as_ref()
            .ok_or_else(|| NarvidError::Usage("--ckpt is required unless --zero-shot is given".into()))?;
        let params = load_checkpoint(ckpt)?;
        model_matrices(&params, &read_container(&a.data)?, filter, a.scoring.tau)?
    };
    let r = report(&matrices, a.mode, a.direction)?;
    write_json(&mut *output(a.out.as_deref())?, &r, a.out.as_deref())
}

#[derive(Debug, Serialize)]
struct FilterDump<'a> {
    query: usize,
    candidate: usize,
    query_id: &'a str,
    candidate_id: &'a str,
    mode: FilterMode,
    tau: f64,
    video: FilterSelection,
    narration: FilterSelection,
}

pub fn cmd_filter(a: &FilterArgs) -> Result<()> {
    let mode = a.scoring.mode()?;
    let ds = read_container(&a.data)?;
    for (name, i) in [("query", a.query), ("candidate", a.candidate)] {
        if i >= ds.len() {
            return Err(NarvidError::Usage(format!("{name} index {i} out of range for {} episodes", ds.len())));
        }
    }
    let params = load_checkpoint(&a.ckpt)?;
    let (q, c) = (&ds.episodes()[a.query], &ds.episodes()[a.candidate]);
    let e = params.enhance_episode(c)?;
    let (video, narration) = filter_pair(q.eos(), &e.v_check, &e.n_check, mode, a.scoring.tau)?;
    let dump = FilterDump {
        query: a.query,
        candidate: a.candidate,
        query_id: &q.id,
        candidate_id: &c.id,
        mode,
        tau: a.scoring.tau,
        video,
        narration,
    };
    write_json(&mut *output(None)?, &dump, None)
}
