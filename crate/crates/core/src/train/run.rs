//! The training loop and its run directory.
//!
//! ```text
//! <run>/config.txt          effective config, written before any compute
//! <run>/fixed_z.sha256      hash of the z batch used for every sample dump
//! <run>/losses.tsv          one line per loss report
//! <run>/checkpoints/iter_N  checkpoints (see `TrainState::save`)
//! <run>/samples/*.png       sample grids from the fixed z batch
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::{Regime, TrainConfig};
use super::diagnostics::sample;
use super::state::{
    checkpoint_dir_name, fixed_z, list_checkpoints, prune_checkpoints, seeds, tensor_sha256, TrainState,
};
use super::steps::{cogan_step, dann_step, gan_step, StepOutcome};
use crate::corpus::{Corpus, Domain, FrameCache, ImageBatch, MinibatchStream};
use crate::error::{Error, Result};
use crate::nets::{derive_seed, set_parallel};
use crate::render::{grid, hconcat, save_png};
use crate::tensor::Tensor;

pub const DETERMINISTIC_ENV: &str = "CROSSGAN_DETERMINISTIC";

/// Frames are cached in memory below this many bytes of decoded data.
const CACHE_LIMIT_BYTES: usize = 512 << 20;

/// Deterministic unless the config and the environment both allow the
/// parallel mode.
pub fn deterministic(config: &TrainConfig) -> bool {
    config.deterministic || std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[derive(Debug)]
pub struct RunSummary {
    pub state: TrainState,
    pub run_dir: PathBuf,
    /// Checkpoints written by this call, oldest first (some may have been
    /// pruned since).
    pub checkpoints: Vec<PathBuf>,
    pub samples: Vec<PathBuf>,
}

impl RunSummary {
    pub fn final_checkpoint(&self) -> Option<&Path> {
        self.checkpoints.last().map(PathBuf::as_path)
    }
}

/// Checks that `corpus` has the domains `config` trains on.
pub fn check_corpus(config: &TrainConfig, corpus: &Corpus) -> Result<()> {
    let need: Vec<Domain> = match config.regime {
        Regime::Single => vec![config.domain],
        _ => Domain::ALL.to_vec(),
    };
    for d in need {
        if corpus.count(d) < config.batch_size {
            return Err(Error::Corpus(format!(
                "the {} regime needs at least batch_size={} frames of domain {d}, found {}",
                config.regime,
                config.batch_size,
                corpus.count(d)
            )));
        }
    }
    Ok(())
}

/// Data streams for a regime, in the order `TrainState::streams` records.
pub fn make_streams(config: &TrainConfig, corpus: &Corpus) -> Result<Vec<MinibatchStream>> {
    let filters: Vec<Option<Domain>> = match config.regime {
        Regime::Single => vec![Some(config.domain)],
        Regime::Combined => vec![None],
        Regime::Cogan | Regime::Dann => vec![Some(Domain::S), Some(Domain::L)],
    };
    filters
        .into_iter()
        .enumerate()
        .map(|(i, f)| MinibatchStream::new(corpus, config.batch_size, f, derive_seed(config.seed, seeds::DATA_S + i as u64)))
        .collect()
}

struct Loader {
    cache: Option<FrameCache>,
    resolution: usize,
}

impl Loader {
    fn new(corpus: &Corpus, resolution: usize) -> Self {
        let bytes = corpus.len() * 3 * resolution * resolution * 4;
        Self {
            cache: (bytes <= CACHE_LIMIT_BYTES).then(|| FrameCache::new(resolution)),
            resolution,
        }
    }

    fn load(&mut self, corpus: &Corpus, ids: &[u64]) -> Result<ImageBatch> {
        match &mut self.cache {
            Some(c) => c.load(corpus, ids),
            None => crate::corpus::load_batch_any(corpus, ids, self.resolution),
        }
    }
}

/// Runs `config.iterations` iterations from scratch in `run_dir`.
pub fn train(config: TrainConfig, corpus: &Corpus, run_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    check_corpus(&config, corpus)?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let cfg_path = run_dir.join("config.txt");
    fs::write(&cfg_path, config.to_kv().render()).map_err(|e| Error::io(&cfg_path, e))?;
    let state = TrainState::new(config)?;
    run_loop(state, corpus, run_dir)
}

/// Continues the run in `run_dir` from its newest checkpoint, optionally
/// extending the iteration count.
pub fn resume(run_dir: &Path, corpus: &Corpus, iterations: Option<u64>) -> Result<RunSummary> {
    let ckpts = list_checkpoints(&run_dir.join("checkpoints"))?;
    let last = ckpts
        .last()
        .ok_or_else(|| Error::Invalid(format!("no checkpoints under {}", run_dir.display())))?;
    let mut state = TrainState::load(last)?;
    if let Some(n) = iterations {
        state.config.iterations = n;
    }
    state.config.validate()?;
    check_corpus(&state.config, corpus)?;
    run_loop(state, corpus, run_dir)
}

fn sample_name(state: &TrainState) -> String {
    let per_epoch = state.config.checkpoint_every == 0 && state.epoch_boundary();
    if per_epoch {
        format!("epoch_{}.png", state.iteration / state.iterations_per_epoch)
    } else {
        format!("iter_{:08}.png", state.iteration)
    }
}

/// Writes the fixed-z sample grid for the current parameters.
pub fn dump_samples(state: &TrainState, path: &Path) -> Result<()> {
    let z = fixed_z(&state.config);
    let cols = (z.batch() as f64).sqrt().ceil() as usize;
    let img = if state.model.arch.per_domain() {
        let parts: Result<Vec<_>> = Domain::ALL
            .iter()
            .map(|&d| grid(&sample(&state.model, &z, Some(d))?.data, cols))
            .collect();
        hconcat(&parts?)
    } else {
        grid(&sample(&state.model, &z, None)?.data, cols)?
    };
    save_png(&img, path)
}

fn due(state: &TrainState) -> bool {
    let every = state.config.checkpoint_every;
    state.iteration == state.config.iterations
        || if every == 0 {
            state.epoch_boundary()
        } else {
            state.iteration % every == 0
        }
}

fn step(state: &mut TrainState, streams: &mut [MinibatchStream], loader: &mut Loader, corpus: &Corpus) -> Result<StepOutcome> {
    let b = state.config.batch_size;
    match state.config.regime {
        Regime::Single | Regime::Combined => {
            let real = loader.load(corpus, &streams[0].next_ids())?;
            let z = state.next_z(b);
            gan_step(state, &real.data, &z)
        }
        Regime::Cogan | Regime::Dann => {
            let real_s = loader.load(corpus, &streams[0].next_ids())?;
            let real_l = loader.load(corpus, &streams[1].next_ids())?;
            let (z_s, z_l) = (state.next_z(b), state.next_z(b));
            if state.config.regime == Regime::Cogan {
                cogan_step(state, &real_s.data, &real_l.data, &z_s, &z_l)
            } else {
                dann_step(state, &real_s.data, &real_l.data, &z_s, &z_l)
            }
        }
    }
}

fn open_log(run_dir: &Path, history: &[String]) -> Result<File> {
    let path = run_dir.join("losses.tsv");
    let mut text = history.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
}

fn run_loop(mut state: TrainState, corpus: &Corpus, run_dir: &Path) -> Result<RunSummary> {
    set_parallel(!deterministic(&state.config));
    let z_hash = tensor_sha256(&fixed_z(&state.config));
    let hash_path = run_dir.join("fixed_z.sha256");
    match fs::read_to_string(&hash_path) {
        Ok(prev) if prev.trim() != z_hash => {
            return Err(Error::Invalid("fixed sample z differs from the one recorded for this run".into()))
        }
        Ok(_) => {}
        Err(_) => fs::write(&hash_path, format!("{z_hash}\n")).map_err(|e| Error::io(&hash_path, e))?,
    }

    let mut streams = make_streams(&state.config, corpus)?;
    for (s, pos) in streams.iter_mut().zip(&state.streams) {
        s.seek(*pos)?;
    }
    state.iterations_per_epoch = streams.iter().map(|s| s.batches_per_epoch() as u64).min().unwrap_or(1);
    let mut loader = Loader::new(corpus, state.config.resolution);
    let mut log = open_log(run_dir, &state.history)?;
    let ckpt_root = run_dir.join("checkpoints");
    let mut summary_ckpts = Vec::new();
    let mut samples = Vec::new();

    while state.iteration < state.config.iterations {
        let t = state.iteration;
        let outcome = match step(&mut state, &mut streams, &mut loader, corpus) {
            Ok(o) => o,
            Err(e @ Error::NonFinite { .. }) => {
                let dir = ckpt_root.join(format!("abort_{}", checkpoint_dir_name(t)));
                state.save(&dir)?;
                log::error!("{e}; diagnostic checkpoint at {}", dir.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        for (slot, s) in state.streams.iter_mut().zip(&streams) {
            *slot = s.position();
        }
        for r in &outcome.reports {
            writeln!(log, "{}", r.log_line(t)).map_err(|e| Error::io(run_dir.join("losses.tsv"), e))?;
        }
        if due(&state) {
            let dir = ckpt_root.join(checkpoint_dir_name(state.iteration));
            state.save(&dir)?;
            let png = run_dir.join("samples").join(sample_name(&state));
            dump_samples(&state, &png)?;
            prune_checkpoints(&ckpt_root, state.config.keep_last.max(1))?;
            log::info!("iteration {}: checkpoint {}", state.iteration, dir.display());
            summary_ckpts.push(dir);
            samples.push(png);
        }
    }
    Ok(RunSummary {
        state,
        run_dir: run_dir.to_path_buf(),
        checkpoints: summary_ckpts,
        samples,
    })
}

/// Recomputes the hash a run directory should carry for its fixed z.
pub fn fixed_z_hash(config: &TrainConfig) -> String {
    tensor_sha256(&fixed_z(config))
}

/// A fresh z batch from a dedicated seed, for grids and panels.
pub fn seeded_z(seed: u64, m: usize, z_dim: usize) -> Tensor<f32> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    super::state::sample_z(&mut rng, m, z_dim)
}
