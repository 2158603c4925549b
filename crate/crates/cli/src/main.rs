//! `asars`: preprocess click logs, synthesize data, train, evaluate and
//! grid-search session-aware recommenders.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use asars::config::RunConfig;
use asars::dataprep::{
    read_corpus_file, read_events_csv, read_movielens_ratings, write_corpus_file, write_events_csv,
};
use asars::eval::MetricsReport;
use asars::model::{load_checkpoint, save_checkpoint};
use asars::pipeline;
use asars::synth::{generate, SynthConfig, SynthProfile};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "asars",
    version,
    about = "Session-aware next-item recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(&readable(p)?)?,
            None => RunConfig::default(),
        };
        run.apply_overrides(&self.overrides)?;
        Ok(run)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    /// `user_id,item_id,timestamp[,session_id]` with a header row.
    Csv,
    /// MovieLens `ratings.dat`, every rating taken as a click.
    Movielens,
}

#[derive(Subcommand)]
enum Command {
    /// Sessionize, filter, split and bin a click log into a corpus file.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: InputFormat,
        #[arg(long)]
        output: PathBuf,
        /// Also write the JSON summary here (it always goes to stdout).
        #[arg(long)]
        summary: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a seeded synthetic click log as CSV.
    Synth {
        #[arg(long, default_value = "markov")]
        profile: SynthProfile,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        events: Option<usize>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model on the corpus's training split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines epoch log; overrides `log_path` from the config.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rank every next item of the test split and report MRR@K / Recall@K.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint to score; omit to rank by training popularity.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Comma-separated cutoffs, or `all` for the whole vocabulary.
        #[arg(long)]
        ks: Option<String>,
        /// JSON report path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Append a CSV row (with a header if the file is new).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train every point of the config's `[grid]` and keep the best by
    /// validation MRR@20.
    Grid {
        #[arg(long)]
        corpus: PathBuf,
        /// Config holding the `[grid]` table.
        #[arg(long)]
        grid: PathBuf,
        /// Checkpoint of the winning point.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines log, one line per grid point.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Collect JSON reports into one CSV table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn readable(p: &Path) -> Result<PathBuf> {
    if !p.is_file() {
        bail!("{}: no such file", p.display());
    }
    Ok(p.to_path_buf())
}

fn writable(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() && !d.is_dir() => {
            bail!("{}: directory does not exist", d.display())
        }
        _ => Ok(()),
    }
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(p).with_context(|| format!("creating {}", p.display()))?,
    ))
}

fn parse_ks(s: &str, num_items: usize) -> Result<Vec<usize>> {
    if s.trim() == "all" {
        return Ok(vec![num_items]);
    }
    s.split(',')
        .map(|k| {
            k.trim()
                .parse::<usize>()
                .with_context(|| format!("cutoff {k:?} is not a positive integer"))
        })
        .collect()
}

fn write_json<T: serde::Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess {
            input,
            format,
            output,
            summary,
            config,
        } => {
            let input = readable(&input)?;
            writable(&output)?;
            if let Some(s) = &summary {
                writable(s)?;
            }
            let run = config.load()?;
            let file =
                File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let events = match format {
                InputFormat::Csv => read_events_csv(file),
                InputFormat::Movielens => read_movielens_ratings(file),
            }
            .with_context(|| format!("reading {}", input.display()))?;
            let ds = pipeline::preprocess(&events, &run)?;
            write_corpus_file(&output, &ds)?;
            let s = ds.summary();
            log::info!(
                "{} events, {} sessions -> {}",
                s.events,
                s.sessions,
                output.display()
            );
            if let Some(p) = &summary {
                write_json(&s, Some(p))?;
            }
            write_json(&s, None)
        }
        Command::Synth {
            profile,
            seed,
            items,
            users,
            events,
            output,
        } => {
            writable(&output)?;
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                profile,
                seed,
                num_items: items.unwrap_or(d.num_items),
                num_users: users.unwrap_or(d.num_users),
                num_events: events.unwrap_or(d.num_events),
                ..d
            };
            let log = generate(&cfg)?;
            let mut w = create(&output)?;
            write_events_csv(&mut w, &log.events)?;
            w.flush()?;
            log::info!("wrote {} events to {}", log.events.len(), output.display());
            Ok(())
        }
        Command::Train {
            corpus,
            out,
            log,
            config,
        } => {
            let corpus = readable(&corpus)?;
            writable(&out)?;
            let mut run = config.load()?;
            if let Some(l) = log {
                run.log_path = Some(l.to_string_lossy().into_owned());
            }
            if let Some(l) = &run.log_path {
                writable(Path::new(l))?;
            }
            run.validate()?;
            let ds = read_corpus_file(&corpus)?;
            let mut log_file = run
                .log_path
                .as_deref()
                .map(|p| create(Path::new(p)))
                .transpose()?;
            let fit = pipeline::train(&ds, &run, log_file.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(w) = log_file.as_mut() {
                w.flush()?;
            }
            save_checkpoint(&out, &fit.model)?;
            log::info!(
                "best epoch {} (val loss {:.5}, val MRR@20 {:.5}) -> {}",
                fit.best_epoch,
                fit.best_val_loss,
                fit.best_val_mrr20,
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            corpus,
            ckpt,
            ks,
            output,
            csv,
            config,
        } => {
            let corpus = readable(&corpus)?;
            let ckpt = ckpt.as_deref().map(readable).transpose()?;
            for p in output.iter().chain(&csv) {
                writable(p)?;
            }
            let mut run = config.load()?;
            let ds = read_corpus_file(&corpus)?;
            if let Some(ks) = &ks {
                run.ks = parse_ks(ks, ds.num_items())?;
            }
            run.validate()?;
            let report = match &ckpt {
                Some(p) => pipeline::evaluate_model(&ds, &load_checkpoint(p)?, &run)?,
                None => pipeline::evaluate_popularity(&ds, &run)?,
            };
            if let Some(p) = &csv {
                append_csv(p, &report)?;
            }
            write_json(&report, output.as_deref())
        }
        Command::Grid {
            corpus,
            grid,
            out,
            log,
            overrides,
        } => {
            let corpus = readable(&corpus)?;
            for p in out.iter().chain(&log) {
                writable(p)?;
            }
            let mut run = RunConfig::load(&readable(&grid)?)?;
            run.apply_overrides(&overrides)?;
            run.validate()?;
            let ds = read_corpus_file(&corpus)?;
            let mut log_file = log.as_deref().map(create).transpose()?;
            let outcome =
                pipeline::grid_search(&ds, &run, log_file.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(w) = log_file.as_mut() {
                w.flush()?;
            }
            if let Some(p) = &out {
                save_checkpoint(p, &outcome.best_model)?;
            }
            let best = &outcome.runs[outcome.best];
            log::info!(
                "best point {:?} with val MRR@20 {:.5}",
                best.point,
                best.best_val_mrr20
            );
            write_json(&outcome.runs, None)
        }
        Command::Report { reports, output } => {
            if let Some(p) = &output {
                writable(p)?;
            }
            let parsed: Vec<MetricsReport> = reports
                .iter()
                .map(|p| -> Result<MetricsReport> {
                    let text = std::fs::read_to_string(readable(p)?)?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<_>>()?;
            if parsed.windows(2).any(|w| w[0].ks != w[1].ks) {
                bail!("reports use different cutoffs");
            }
            let mut text = parsed[0].csv_header() + "\n";
            for r in &parsed {
                text += &(r.csv_row() + "\n");
            }
            match &output {
                Some(p) => {
                    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn append_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    if fresh {
        writeln!(f, "{}", report.csv_header())?;
    }
    writeln!(f, "{}", report.csv_row())?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ASARS_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
