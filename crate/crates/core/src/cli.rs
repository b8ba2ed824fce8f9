//! Command-line front end: `train`, `eval`, `analyze`, `route-stats`, `count-params`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 checkpoint error, 4 runtime abort.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::MohdError;
use crate::layers::count_params;
use crate::model::Model;
use crate::router::RouteStats;
use crate::sparsity::{activation_flow, shared_activation_table, write_trace, SparsityReport};
use crate::training::{create, eval_ppl, held_batches, load_corpus, Checkpoint, Trainer};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

/// Environment variable that replaces `train.seed`; explicit `--set` still wins.
pub const SEED_ENV: &str = "MOHD_SEED";

#[derive(Debug, Parser)]
#[command(name = "mohd", version, about = "Mixture-of-hidden-dimensions transformer at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run-config TOML file.
    #[arg(long)]
    config: PathBuf,
    /// `section.key=value` override, applied after the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus whose held-out tail is evaluated (defaults to the training corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Activation sparsity, flow and shared-activation tables.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Config whose [analysis] section is used; its model must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write the raw probe activations.
        #[arg(long)]
        dump_trace: bool,
    },
    /// Per-domain router selection statistics.
    RouteStats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One corpus file per domain; the file stem names the domain.
        #[arg(long = "corpus", required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Total and activated parameter counts.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

struct Failure {
    code: i32,
    message: String,
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn checkpoint_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_CHECKPOINT,
        message: e.to_string(),
    }
}

/// Classifies a library error by what the user must fix.
fn classify(e: MohdError) -> Failure {
    let code = match &e {
        MohdError::Config(_) | MohdError::Io { .. } => EXIT_CONFIG,
        MohdError::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_RUNTIME,
    };
    Failure {
        code,
        message: e.to_string(),
    }
}

fn seed_override() -> CliResult<Option<String>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| config_err(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
            Ok(Some(format!("train.seed={seed}")))
        }
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let mut all: Vec<String> = seed_override()?.into_iter().collect();
    all.extend_from_slice(overrides);
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    RunConfig::parse_with_overrides(&text, &all).map_err(config_err)
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path).map_err(checkpoint_err)?;
    let model = ck.model().map_err(checkpoint_err)?;
    Ok((ck, model))
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
    let file = create(path).map_err(classify)?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| classify(MohdError::io(path, e)))
}

fn cmd_train(cfg: &ConfigArgs, resume: Option<&Path>) -> CliResult<()> {
    let config = load_config(&cfg.config, &cfg.overrides)?;
    println!("# effective config");
    print!("{}", config.render());
    let corpus = load_corpus(&config.train.corpus, &config).map_err(config_err)?;
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(checkpoint_err)?;
            if ck.config.mohd() != config.mohd() {
                return Err(checkpoint_err(format!("{}: model settings differ from the config", p.display())));
            }
            let mut ck = ck;
            ck.config.train = config.train.clone();
            Trainer::resume(&ck, &corpus).map_err(classify)?
        }
        None => Trainer::new(config.clone(), &corpus).map_err(classify)?,
    };
    let log = if config.train.metrics.as_os_str().is_empty() {
        trainer.run(None::<std::io::Sink>)
    } else {
        let append = resume.is_some() && config.train.metrics.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&config.train.metrics)
            .map_err(|e| classify(MohdError::io(&config.train.metrics, e)))?;
        trainer.run(Some(std::io::BufWriter::new(file)))
    }
    .map_err(classify)?;
    for m in log.iter().filter(|m| m.eval_ppl.is_some()) {
        eprintln!("step {} ce {:.4} balance {:.5} eval_ppl {:.4}", m.step, m.ce, m.balance, m.eval_ppl.unwrap_or(f64::NAN));
    }
    let ppl = match log.last().and_then(|m| m.eval_ppl) {
        Some(p) => p,
        None => trainer.eval_ppl().map_err(classify)?,
    };
    println!("final eval_ppl {ppl}");
    Ok(())
}

fn cmd_eval(checkpoint: &Path, corpus: Option<&Path>) -> CliResult<()> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let t = &ck.config.train;
    let path = corpus.unwrap_or(&t.corpus);
    let corpus = load_corpus(path, &ck.config).map_err(config_err)?;
    let ppl = eval_ppl(&model, &corpus.eval_batches(t.seq_len, t.batch, t.eval_windows)).map_err(classify)?;
    println!("eval_ppl {ppl}");
    Ok(())
}

/// Leading tokens of a corpus arranged as whole windows.
fn analysis_tokens(bytes: &[u8], seq_len: usize, tokens: usize) -> CliResult<Vec<usize>> {
    let windows = held_batches(bytes, seq_len, usize::MAX, tokens.div_ceil(seq_len).max(1));
    let ids: Vec<usize> = windows.into_iter().flat_map(|b| b.inputs).collect();
    if ids.is_empty() {
        return Err(config_err(format!("corpus holds no window of {seq_len} bytes")));
    }
    Ok(ids)
}

fn cmd_analyze(
    checkpoint: &Path,
    corpus: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    overrides: &[String],
    dump_trace: bool,
) -> CliResult<()> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    let analysis = match config {
        Some(p) => {
            let cfg = load_config(p, overrides)?;
            if cfg.mohd() != ck.config.mohd() {
                return Err(checkpoint_err(format!(
                    "{}: model settings do not match the checkpoint {}",
                    p.display(),
                    checkpoint.display()
                )));
            }
            cfg.analysis
        }
        None => {
            let mut cfg = ck.config.clone();
            if !overrides.is_empty() {
                cfg = RunConfig::parse_with_overrides(&cfg.render(), overrides).map_err(config_err)?;
            }
            cfg.analysis
        }
    };
    let bytes = std::fs::read(corpus).map_err(|e| config_err(format!("{}: {e}", corpus.display())))?;
    let seq_len = ck.config.train.seq_len;
    let ids = analysis_tokens(&bytes, seq_len, analysis.tokens)?;
    let traces = model.traces(&ids, seq_len).map_err(classify)?;
    let report = SparsityReport::from_traces(&traces, analysis.eps).map_err(classify)?;
    let flow = activation_flow(&traces).map_err(classify)?;
    write_file(&out_dir.join("sparsity.csv"), |w| report.write_csv(w))?;
    write_file(&out_dir.join("cumulative.csv"), |w| report.write_curves_csv(w))?;
    write_file(&out_dir.join("flow.csv"), |w| {
        writeln!(w, "layer,site,mean_magnitude,percent")?;
        for p in &flow {
            writeln!(w, "{},{},{},{}", p.layer, p.site, p.mean_magnitude, p.percent)?;
        }
        Ok(())
    })?;
    let mut shared = Vec::new();
    for t in &traces {
        let table = shared_activation_table(&t.values, analysis.top_q, analysis.max_window).map_err(classify)?;
        shared.push((t.layer, t.site, table));
    }
    write_file(&out_dir.join("shared_activation.csv"), |w| {
        writeln!(w, "layer,site,w,q,shared_count")?;
        for (layer, site, table) in &shared {
            for (win, count) in table {
                writeln!(w, "{layer},{site},{win},{},{count}", analysis.top_q)?;
            }
        }
        Ok(())
    })?;
    if dump_trace {
        write_file(&out_dir.join("trace.txt"), |w| write_trace(&traces, w))?;
    }
    println!("analyzed {} tokens over {} probe sites into {}", ids.len(), traces.len(), out_dir.display());
    Ok(())
}

fn cmd_route_stats(checkpoint: &Path, corpora: &[PathBuf], out_dir: &Path) -> CliResult<()> {
    let (ck, model) = load_checkpoint(checkpoint)?;
    if !ck.config.model.mohd {
        return Err(config_err("checkpoint is a dense model without routers"));
    }
    let seq_len = ck.config.train.seq_len;
    let mut domains: Vec<(String, RouteStats)> = Vec::new();
    for path in corpora {
        let bytes = std::fs::read(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let name = path.file_stem().map_or_else(|| "corpus".into(), |s| s.to_string_lossy().into_owned());
        if bytes.len() <= seq_len {
            eprintln!("warning: skipping {}: fewer than {} bytes", path.display(), seq_len + 1);
            continue;
        }
        let ids = analysis_tokens(&bytes, seq_len, ck.config.analysis.tokens)?;
        let mut stats = RouteStats::new();
        model.route_stats(&ids, seq_len, &mut stats).map_err(classify)?;
        write_file(&out_dir.join(format!("route_stats_{name}.csv")), |w| stats.write_csv(w))?;
        domains.push((name, stats));
    }
    for i in 0..domains.len() {
        for j in i + 1..domains.len() {
            println!("l1 {} {} {}", domains[i].0, domains[j].0, domains[i].1.l1_distance(&domains[j].1));
        }
    }
    println!("wrote {} route-statistics file(s) to {}", domains.len(), out_dir.display());
    Ok(())
}

fn cmd_count_params(cfg: &ConfigArgs) -> CliResult<()> {
    let config = load_config(&cfg.config, &cfg.overrides)?;
    let c = count_params(&config.mohd()).map_err(config_err)?;
    println!("{:<12} {:>12} {:>12}", "group", "total", "activated");
    let rows = [
        ("attention", c.attn_matrix, c.attn_matrix_active),
        ("ffn", c.ffn_matrix, c.ffn_matrix_active),
        ("router", c.router, c.router),
        ("fusion", c.fusion, c.fusion),
        ("norm", c.norm, c.norm),
        ("embedding", c.embedding, 0),
        ("head", c.head, 0),
    ];
    for (name, total, active) in rows {
        println!("{name:<12} {total:>12} {active:>12}");
    }
    println!("total_params {}", c.total());
    println!("activated_params {}", c.activated());
    println!("activated_ratio {}", c.activated() as f64 / c.total() as f64);
    println!("matrix_activation_ratio {}", c.matrix_ratio());
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train { cfg, resume } => cmd_train(cfg, resume.as_deref()),
        Command::Eval { checkpoint, corpus } => cmd_eval(checkpoint, corpus.as_deref()),
        Command::Analyze {
            checkpoint,
            corpus,
            out_dir,
            config,
            overrides,
            dump_trace,
        } => cmd_analyze(checkpoint, corpus, out_dir, config.as_deref(), overrides, *dump_trace),
        Command::RouteStats {
            checkpoint,
            corpora,
            out_dir,
        } => cmd_route_stats(checkpoint, corpora, out_dir),
        Command::CountParams { cfg } => cmd_count_params(cfg),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
