//! Command-line front end of the `mcsagan` binary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::attention::{plan_attention, AttentionBudget, AttentionPlan};
use crate::data::{generate_cohort, read_volume, write_volume, Dataset, PhantomSpec};
use crate::engine::{
    evaluate, load_segmenters, pretrain_segmenter, segmenter_checkpoint, synthesize, train_downstream, train_gan,
    train_val_split, Checkpoint, GanTrainer, TrainConfig,
};
use crate::error::{Error, Result};
use crate::networks::Contrast;

pub const THREADS_ENV: &str = "MCSAGAN_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mcsagan", version, about = "Multi-contrast volumetric synthesis with memory-bounded attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a cohort of paired phantoms.
    GenData(GenData),
    /// Pretrain the tumour segmenters.
    PretrainSeg(PretrainSeg),
    /// Adversarial training.
    Train(Train),
    /// Synthesize one contrast from a T2w volume.
    Synth(Synth),
    /// Evaluate a checkpoint on a paired dataset.
    Eval(Eval),
    /// Tabulate attention plans for a sweep of volume sizes.
    PlanAttention(PlanAttentionArgs),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// Phantom spec JSON; defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PretrainSeg {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Segmenter checkpoint from `pretrain-seg`.
    #[arg(long)]
    pub seg: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Synth {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub contrast: Contrast,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlanAttentionArgs {
    /// Comma-separated `DxHxW` list.
    #[arg(long, allow_hyphen_values = true)]
    pub dims: String,
    #[arg(long)]
    pub tq: Option<usize>,
    #[arg(long)]
    pub tkv: Option<usize>,
    #[arg(long)]
    pub tattn: Option<usize>,
    #[arg(long)]
    pub kappa: Option<usize>,
}

/// Parses `DxHxW[,DxHxW...]`; an empty string is an empty sweep.
pub fn parse_dims_list(s: &str) -> Result<Vec<[usize; 3]>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let v: Vec<usize> = p
                .split(['x', 'X'])
                .map(|n| n.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::invalid(format!("malformed dims `{p}`")))?;
            match v[..] {
                [d, h, w] if d > 0 && h > 0 && w > 0 => Ok([d, h, w]),
                _ => Err(Error::invalid(format!("dims `{p}` must be three positive integers DxHxW"))),
            }
        })
        .collect()
}

pub const PLAN_HEADER: &str = "dims\tn_full\tmode\ts_q\ts_kv\tq_dims\tkv_dims\tn_q\tm_k\taffinity";

pub fn plan_row(dims: [usize; 3], p: &AttentionPlan) -> String {
    let f = |d: [usize; 3]| format!("{}x{}x{}", d[0], d[1], d[2]);
    let mode = serde_json::to_value(p.mode).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        f(dims),
        p.n_full,
        mode,
        p.s_q,
        p.s_kv,
        f(p.q_dims),
        f(p.k_dims),
        p.n_q,
        p.m_k,
        p.n_q * p.m_k
    )
}

/// Plan table for a sweep, header first.
pub fn plan_table(args: &PlanAttentionArgs) -> Result<String> {
    let mut budget = AttentionBudget::default();
    budget.t_q = args.tq.unwrap_or(budget.t_q);
    budget.t_kv = args.tkv.unwrap_or(budget.t_kv);
    budget.t_attn = args.tattn.unwrap_or(budget.t_attn);
    budget.kappa = args.kappa.unwrap_or(budget.kappa);
    budget.validate()?;
    let mut out = String::from(PLAN_HEADER);
    out.push('\n');
    for dims in parse_dims_list(&args.dims)? {
        out.push_str(&plan_row(dims, &plan_attention(dims, &budget)?));
        out.push('\n');
    }
    Ok(out)
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    TrainConfig::from_json(&text)
}

fn json_lines(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn gen_data(a: &GenData) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("phantom spec: {e}")))?
        }
        None => PhantomSpec::default(),
    };
    let ds = generate_cohort(&spec, a.count, a.seed)?;
    ds.save(&a.out)?;
    info!("wrote {} phantoms to {}", ds.len(), a.out.display());
    Ok(())
}

fn pretrain(a: &PretrainSeg) -> Result<()> {
    let config = read_config(&a.config)?;
    let ds = Dataset::load(&a.data)?;
    if ds.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let (train, val) = if config.segmenter.validation > 0 {
        let (t, v) = train_val_split(&ds, config.segmenter.validation, config.seed)?;
        (t, Some(v))
    } else {
        (ds, None)
    };
    let mut log = a.log.as_deref().map(json_lines).transpose()?;
    let mut write = |e: &crate::engine::SegEpochLog| {
        if let Some(w) = log.as_mut() {
            if let Err(err) = serde_json::to_writer(&mut *w, e).map_err(Error::from).and_then(|_| Ok(writeln!(w)?)) {
                warn!("epoch log: {err}");
            }
        }
    };
    let (seg, _) = pretrain_segmenter(&train, val.as_ref(), &config, &mut write)?;
    let downstream = if config.segmenter.downstream_epochs > 0 {
        Some(train_downstream(&train, val.as_ref(), &config, &mut write)?.0)
    } else {
        None
    };
    segmenter_checkpoint(&config, &seg, downstream.as_ref())?.save(&a.out)
}

fn train(a: &Train) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mut trainer = match &a.resume {
        Some(p) => GanTrainer::from_checkpoint(&Checkpoint::load(p)?)?,
        None => {
            let mut config = read_config(&a.config)?;
            let (seg, downstream) = match &a.seg {
                Some(p) => {
                    let ckpt = Checkpoint::load(p)?;
                    let seg_config: TrainConfig = serde_json::from_value(ckpt.header.config.clone())
                        .map_err(|e| Error::Format(format!("segmenter checkpoint config: {e}")))?;
                    config.arch.segmenter = seg_config.arch.segmenter.clone();
                    let (s, d) = load_segmenters(&ckpt, &config)?;
                    (Some(s), d)
                }
                None => (None, None),
            };
            let mut t = GanTrainer::new(config, seg)?;
            t.downstream = downstream;
            t
        }
    };
    let (train, val) = if trainer.config.validation > 0 {
        let (t, v) = train_val_split(&ds, trainer.config.validation, trainer.config.seed)?;
        (t, Some(v))
    } else {
        (ds, None)
    };
    fs::create_dir_all(&a.out)?;
    let mut log = json_lines(&a.out.join("log.jsonl"))?;
    let out = a.out.clone();
    train_gan(
        &mut trainer,
        &train,
        val.as_ref(),
        &mut |entry| {
            serde_json::to_writer(&mut log, entry)?;
            writeln!(log)?;
            Ok(())
        },
        &mut |t, epoch| t.to_checkpoint()?.save(out.join(format!("epoch-{epoch:04}.mcsk"))),
    )?;
    log.flush()?;
    trainer.to_checkpoint()?.save(a.out.join("final.mcsk"))
}

fn synth(a: &Synth) -> Result<()> {
    let trainer = GanTrainer::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let x = read_volume(&a.input)?;
    let s = x.shape();
    let k = trainer.generator.config.divisor();
    if s.len() < 3 || s[s.len() - 3..].iter().any(|d| d % k != 0) {
        return Err(Error::Data(format!("input dims {s:?} must be divisible by {k}")));
    }
    write_volume(&a.out, &synthesize(&trainer.generator, &x, a.contrast)?)
}

fn eval(a: &Eval) -> Result<()> {
    let trainer = GanTrainer::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let report = evaluate(&trainer, &Dataset::load(&a.data)?)?;
    fs::write(&a.report, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainSeg(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::PlanAttention(a) => {
            print!("{}", plan_table(a)?);
            Ok(())
        }
    }
}

/// Sizes the global worker pool from `MCSAGAN_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    Ok(())
}

/// Entry point: parses arguments, runs the command and returns the process
/// exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
