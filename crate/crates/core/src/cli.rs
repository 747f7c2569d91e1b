//! The `curp` command line.
//!
//! Exit status: 0 on success, 1 on usage errors (bad flags or
//! configuration values), 2 on data or protocol errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::balanced_kmeans::{init_balanced_kmeans, random_uniform_codebook, DEFAULT_MAX_ITERS};
use crate::codec_io::{
    decode_index_file, decode_records, encode_adapter, encode_index_file, encode_records, read_codebook, read_pool,
    write_atomic, write_codebook, write_pool,
};
use crate::edge_protocol::{client_session, serve};
use crate::error::{CurpError, Result};
use crate::metrics::{render_stats_report, subspace_index_table, usage_stats, DEFAULT_ANCHOR_THRESHOLD};
use crate::pba::{
    evaluate_pba, render_pba_log, synth_personalization_task, train_pba, PbaConfig, PrefixMode, TaskConfig, ToyDecoder,
    DEFAULT_HIDDEN, DEFAULT_MAX_HISTORIES,
};
use crate::pcc::{render_pcc_log, train_pcc};
use crate::quantizer::encode_batch;
use crate::types::{generate_mixture_pool, CodebookSpec, PccConfig};

#[derive(Debug, Parser)]
#[command(name = "curp", version, about = "Prototype-codebook quantization of user-behavior embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic archetype-mixture embedding pool.
    Synth(SynthArgs),
    /// Generate a synthetic personalization task (train and held-out records).
    SynthTask(SynthTaskArgs),
    /// Initialize a codebook by balanced k-means.
    Init(InitArgs),
    /// Train a codebook with the quantization, diversity and usage losses.
    Train(TrainArgs),
    /// Encode a pool into an index file.
    Encode(EncodeArgs),
    /// Usage statistics and per-subspace index tables for an index file.
    Stats(StatsArgs),
    /// Train an adapter against a frozen toy decoder.
    Align(AlignArgs),
    /// Serve index-stream sessions.
    Serve(ServeArgs),
    /// Send a pool as an index stream to a server.
    Send(SendArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    archetypes: usize,
    #[arg(long, default_value_t = 100)]
    per_archetype: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    subspaces: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the archetype of each row, one per line.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthTaskArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    archetypes: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    histories: usize,
    #[arg(long, default_value_t = 400)]
    train_users: usize,
    #[arg(long, default_value_t = 100)]
    test_users: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long)]
    out_train: PathBuf,
    #[arg(long)]
    out_test: PathBuf,
    /// Also write every training history as a pool, for codebook building.
    #[arg(long)]
    out_pool: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    subspaces: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Uniform random entries in [-1, 1] instead of balanced k-means.
    #[arg(long)]
    random: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    codebook_in: PathBuf,
    #[arg(long)]
    codebook_out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    lambda_quant: f64,
    #[arg(long, default_value_t = 0.15)]
    lambda_div: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_usage: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    temp: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    accum: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Skip quantization and write the embeddings themselves as a pool.
    #[arg(long)]
    passthrough: bool,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    indices: PathBuf,
    /// One group tag per code; the last tab-separated field of each line.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ANCHOR_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    decoder_seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    wd: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    accum: usize,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_HISTORIES)]
    histories: usize,
    /// Feed raw embeddings to the adapter instead of quantized ones.
    #[arg(long)]
    passthrough: bool,
    /// Held-out records to report mean NLL on after training.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    listen: String,
    /// Exit after this many sessions.
    #[arg(long)]
    sessions: Option<usize>,
}

#[derive(Debug, Args)]
struct SendArgs {
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    connect: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Parses `argv` (program name first) and runs the subcommand, returning
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CurpError::InvalidConfig(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::SynthTask(a) => synth_task(a),
        Command::Init(a) => init(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Stats(a) => stats(a),
        Command::Align(a) => align(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Send(a) => send(a),
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CurpError {
    CurpError::InvalidConfig(e.to_string())
}

/// Spec errors raised while interpreting flags are usage errors.
fn spec_from_flags(dim: usize, subspaces: usize, k: usize) -> Result<CodebookSpec> {
    CodebookSpec::new(dim, subspaces, k).map_err(usage)
}

fn synth(a: SynthArgs) -> Result<()> {
    // Vocabulary is irrelevant for generation; 2 keeps the spec legal.
    let spec = spec_from_flags(a.dim, a.subspaces, 2)?;
    let m = generate_mixture_pool(a.seed, a.archetypes, a.per_archetype, &spec, a.sigma)?;
    if let Some(path) = &a.labels {
        let text: String = m.labels.iter().map(|l| format!("{l}\n")).collect();
        write_atomic(path, text.as_bytes())?;
    }
    write_pool(&a.out, &m.pool)
}

fn synth_task(a: SynthTaskArgs) -> Result<()> {
    let cfg = TaskConfig {
        seed: a.seed,
        archetypes: a.archetypes,
        vocab: a.vocab,
        dim: a.dim,
        histories: a.histories,
        train_users: a.train_users,
        test_users: a.test_users,
        noise_sigma: a.sigma,
        ..TaskConfig::default()
    };
    let task = synth_personalization_task(&cfg)?;
    if let Some(path) = &a.out_pool {
        write_pool(path, &crate::pba::history_pool(&task.train, a.dim)?)?;
    }
    write_atomic(&a.out_train, &encode_records(&task.train, a.dim)?)?;
    write_atomic(&a.out_test, &encode_records(&task.test, a.dim)?)
}

fn init(a: InitArgs) -> Result<()> {
    let pool = read_pool(&a.pool)?;
    let spec = spec_from_flags(pool.dim(), a.subspaces, a.k)?;
    let cb = if a.random {
        random_uniform_codebook(&spec, -1.0, 1.0, a.seed)?
    } else {
        init_balanced_kmeans(&pool, &spec, a.iters, a.seed)?
    };
    write_codebook(&a.out, &cb)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = PccConfig {
        lambda_quant: a.lambda_quant,
        lambda_div: a.lambda_div,
        lambda_usage: a.lambda_usage,
        tau: a.tau,
        soft_count_temp: a.temp,
        learning_rate: a.lr,
        weight_decay: a.wd,
        grad_clip: a.clip,
        batch_size: a.batch,
        accum_steps: a.accum,
        epochs: a.epochs,
        seed: a.seed,
    };
    config.validate()?;
    let pool = read_pool(&a.pool)?;
    let cb = read_codebook(&a.codebook_in)?;
    let run = train_pcc(&pool, &cb, &config)?;
    if let Some(path) = &a.log {
        write_atomic(path, render_pcc_log(&run.log).as_bytes())?;
    }
    write_codebook(&a.codebook_out, &run.codebook)
}

fn encode(a: EncodeArgs) -> Result<()> {
    let pool = read_pool(&a.pool)?;
    let cb = read_codebook(&a.codebook)?;
    pool.check_spec(cb.spec())?;
    if a.passthrough {
        return write_pool(&a.out, &pool);
    }
    let codes = encode_batch(&pool, &cb)?.codes;
    write_atomic(&a.out, &encode_index_file(&codes, &cb)?)
}

fn read_groups(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.rsplit('\t').next().unwrap_or(l).trim().to_string())
        .collect())
}

fn stats(a: StatsArgs) -> Result<()> {
    let cb = read_codebook(&a.codebook)?;
    let codes = decode_index_file(&fs::read(&a.indices)?, &cb)?;
    let groups = a.groups.as_deref().map(read_groups).transpose()?;
    let usage = usage_stats(&codes, cb.spec())?;
    let table = subspace_index_table(&codes, groups.as_deref(), cb.spec(), a.threshold)?;
    write_atomic(&a.out, render_stats_report(&usage, cb.spec(), &table).as_bytes())
}

fn align(a: AlignArgs) -> Result<()> {
    let config = PbaConfig {
        hidden: a.hidden,
        learning_rate: a.lr,
        weight_decay: a.wd,
        grad_clip: a.clip,
        batch_size: a.batch,
        accum_steps: a.accum,
        epochs: a.epochs,
        seed: a.seed,
        max_histories: a.histories,
        mode: if a.passthrough { PrefixMode::Passthrough } else { PrefixMode::Quantized },
    };
    config.validate()?;
    let decoder = ToyDecoder::new(a.vocab, a.hidden, a.decoder_seed).map_err(usage)?;
    let cb = read_codebook(&a.codebook)?;
    let (dim, records) = decode_records(&fs::read(&a.records)?)?;
    if dim != cb.spec().dim() {
        return Err(CurpError::DimMismatch {
            expected: cb.spec().dim(),
            got: dim,
        });
    }
    let run = train_pba(&records, &cb, &decoder, &config)?;
    if let Some(path) = &a.eval {
        let (_, held_out) = decode_records(&fs::read(path)?)?;
        let nll = evaluate_pba(&held_out, &cb, &decoder, &run.params, config.mode, config.max_histories)?;
        println!("eval_mean_nll\t{nll:.8e}");
    }
    if let Some(path) = &a.log {
        write_atomic(path, render_pba_log(&run.log).as_bytes())?;
    }
    write_atomic(&a.out, &encode_adapter(&run.params)?)
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let cb = read_codebook(&a.codebook)?;
    let listener = TcpListener::bind(&a.listen)?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let mut failures = 0usize;
    serve(&listener, &cb, a.sessions, |result| match result {
        Ok(r) => {
            println!(
                "session\tevents {}\tcrc {:#010x}\tcoverage {:.9}",
                r.codes.len(),
                r.crc,
                r.usage.coverage
            );
            let _ = std::io::stdout().flush();
        }
        Err(e) => {
            eprintln!("session failed: {e}");
            failures += 1;
        }
    })?;
    if failures > 0 {
        return Err(CurpError::Protocol(format!("{failures} session(s) failed")));
    }
    Ok(())
}

fn send(a: SendArgs) -> Result<()> {
    let cb = read_codebook(&a.codebook)?;
    let pool = read_pool(&a.pool)?;
    let mut stream = TcpStream::connect(&a.connect)?;
    let report = client_session(&pool, &cb, &mut stream)?;
    let text = report.render();
    print!("{text}");
    if let Some(path) = &a.report {
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}
