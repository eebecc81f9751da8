//! `crossgan`: ingest corpora, train, sample, and query embedding spaces.

#[macro_use]
mod output;
mod commands;
mod flags;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crossgan::corpus::Domain;
use crossgan::embedspace::{Aggregate, Source};
use crossgan::Error;

use flags::ConfigFlags;

#[derive(Debug, Parser)]
#[command(name = "crossgan", version, about = "Cross-domain GAN training and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Scan `<root>/<dir>/<episode>/<frame>` and write a corpus manifest.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// Domain directory mapping, e.g. `simpsons=S`. Repeatable; defaults
        /// to `S=S` and `L=L`.
        #[arg(long = "map", value_name = "DIR=DOMAIN")]
        maps: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a two-palette synthetic corpus and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        episodes: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Manifest path; defaults to `<out>/manifest.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model, or continue the newest checkpoint with `--resume`.
    Train {
        #[arg(long)]
        run_dir: PathBuf,
        /// Corpus manifest written by `ingest` or `synth`.
        #[arg(long)]
        corpus: PathBuf,
        /// key=value config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Write individual generated frames as PNG files.
    Generate {
        /// A checkpoint directory, or a run directory (newest checkpoint).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator to sample from; per-domain models sample both when omitted.
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a square grid of samples from seeded z.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render both coupled generators on the same z, side by side.
    Paired {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every corpus frame and save the index.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "discriminator")]
        source: Source,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest training frames of one generated or given frame.
    KnnPanel {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index directory. Repeat to add a row group per similarity source.
        #[arg(long = "index", required = true)]
        indexes: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        z_seed: Option<u64>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Domain of the query frame.
        #[arg(long)]
        domain: Option<Domain>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the episodes of one domain against a query episode.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        domain: Domain,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long, default_value = "min")]
        aggregate: Aggregate,
        /// Matched-frame strip for the top hit.
        #[arg(long)]
        out: PathBuf,
    },
    /// Windowed loss means from a run's log, and optional diversity per checkpoint.
    Losses {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: u64,
        #[arg(long)]
        diversity: bool,
    },
}

fn run(cmd: Cmd) -> crossgan::Result<()> {
    match cmd {
        Cmd::Ingest { root, maps, out } => commands::ingest(&root, &maps, &out),
        Cmd::Synth {
            out,
            episodes,
            frames,
            resolution,
            seed,
            manifest,
        } => {
            let manifest = manifest.unwrap_or_else(|| out.join("manifest.tsv"));
            commands::synth(&out, episodes, frames, resolution, seed, &manifest)
        }
        Cmd::Train {
            run_dir,
            corpus,
            config,
            resume,
            flags,
        } => commands::train(&run_dir, &corpus, config.as_deref(), resume, &flags.0),
        Cmd::Generate {
            checkpoint,
            count,
            seed,
            domain,
            out_dir,
        } => commands::generate(&checkpoint, count, seed, domain, &out_dir),
        Cmd::Grid {
            checkpoint,
            m,
            seed,
            domain,
            out,
        } => commands::grid(&checkpoint, m, seed, domain, &out),
        Cmd::Paired { checkpoint, m, seed, out } => commands::paired(&checkpoint, m, seed, &out),
        Cmd::Index {
            checkpoint,
            corpus,
            source,
            batch,
            out,
        } => commands::index(&checkpoint, &corpus, source, batch, &out),
        Cmd::KnnPanel {
            checkpoint,
            indexes,
            corpus,
            z_seed,
            image,
            domain,
            k,
            out,
        } => {
            let query = match (z_seed, image) {
                (Some(s), _) => commands::Query::Seed(s),
                (None, Some(p)) => commands::Query::Image(p),
                (None, None) => unreachable!("clap requires one of --z-seed and --image"),
            };
            commands::knn_panel(&checkpoint, &indexes, &corpus, query, domain, k, &out)
        }
        Cmd::Retrieve {
            checkpoint,
            index,
            corpus,
            query,
            domain,
            top,
            aggregate,
            out,
        } => commands::retrieve(&checkpoint, &index, &corpus, &query, domain, top, aggregate, &out),
        Cmd::Losses {
            run_dir,
            window,
            diversity,
        } => commands::losses(&run_dir, window, diversity),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
