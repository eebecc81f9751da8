use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crossgan::corpus::{load_batch_any, load_image, scan_corpus, synth_corpus, Corpus, Domain, ImageBatch};
use crossgan::embedspace::{build_index, embed, knn, retrieve_episodes, Aggregate, EmbeddingIndex, Source};
use crossgan::kv::KvMap;
use crossgan::losses::parse_log_line;
use crossgan::render::{grid as tile_grid, hconcat, match_strip, neighbor_panel, save_png, square_side};
use crossgan::tensor::Tensor;
use crossgan::train::run::seeded_z;
use crossgan::train::state::{checkpoint_fingerprint, fixed_z, list_checkpoints, MANIFEST_FILE};
use crossgan::train::{self, diversity_score, sample, sample_paired, TrainConfig, TrainState};
use crossgan::{Error, Result};

/// Largest sample grid the `grid` command renders.
pub const MAX_GRID: usize = 256;

fn print_counts(corpus: &Corpus) {
    for d in corpus.domains_present() {
        out!("domain\t{d}\t{}", corpus.count(d));
    }
    for (episode, frames) in corpus.episodes() {
        out!("episode\t{episode}\t{}", frames.len());
    }
    out!("total\t{}", corpus.len());
}

fn parse_map(spec: &str) -> Result<(String, Domain)> {
    let (dir, domain) = spec
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("--map wants DIR=DOMAIN, got {spec:?}")))?;
    if dir.is_empty() {
        return Err(Error::Invalid(format!("--map {spec:?} has an empty directory")));
    }
    Ok((dir.to_string(), domain.parse()?))
}

pub fn ingest(root: &Path, maps: &[String], out: &Path) -> Result<()> {
    let map = if maps.is_empty() {
        crossgan::corpus::default_domain_map()
    } else {
        maps.iter().map(|m| parse_map(m)).collect::<Result<_>>()?
    };
    let report = scan_corpus(root, &map)?;
    if report.skipped > 0 {
        log::warn!("skipped {} unreadable images", report.skipped);
    }
    report.corpus.write_manifest(out)?;
    print_counts(&report.corpus);
    Ok(())
}

pub fn synth(out: &Path, episodes: usize, frames: usize, resolution: usize, seed: u64, manifest: &Path) -> Result<()> {
    let corpus = synth_corpus(out, episodes, frames, resolution, seed)?;
    corpus.write_manifest(manifest)?;
    print_counts(&corpus);
    Ok(())
}

fn read_kv(path: &Path) -> Result<KvMap> {
    KvMap::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn train(run_dir: &Path, corpus: &Path, config: Option<&Path>, resume: bool, flags: &KvMap) -> Result<()> {
    let corpus = Corpus::read_manifest(corpus)?;
    let summary = if resume {
        if config.is_some() {
            return Err(Error::Config("--resume takes its config from the checkpoint".into()));
        }
        if let Some(k) = flags.keys().find(|k| *k != "iterations") {
            return Err(Error::Config(format!(
                "--resume only accepts --iterations, not --{}",
                crate::flags::flag_name(k)
            )));
        }
        let iterations = flags.get("iterations").map(|_| flags.parse_value("iterations")).transpose()?;
        train::resume(run_dir, &corpus, iterations)?
    } else {
        let mut cfg = TrainConfig::default();
        if let Some(path) = config {
            cfg.apply(&read_kv(path)?)?;
        }
        cfg.apply(flags)?;
        cfg.validate()?;
        train::train(cfg, &corpus, run_dir)?
    };
    out!("iteration\t{}", summary.state.iteration);
    out!("fingerprint\t{}", summary.state.fingerprint());
    if let Some(c) = summary.final_checkpoint() {
        out!("checkpoint\t{}", c.display());
    }
    Ok(())
}

/// A checkpoint directory, or the newest checkpoint of a run directory.
fn checkpoint_path(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    list_checkpoints(&path.join("checkpoints"))?
        .pop()
        .ok_or_else(|| Error::Invalid(format!("{} is neither a checkpoint nor a run with checkpoints", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<(TrainState, PathBuf)> {
    let dir = checkpoint_path(path)?;
    Ok((TrainState::load(&dir)?, dir))
}

/// Per-domain models sample domain S unless told otherwise.
fn generator_domain(state: &TrainState, domain: Option<Domain>) -> Option<Domain> {
    domain.or(state.model.arch.per_domain().then_some(Domain::S))
}

pub fn generate(checkpoint: &Path, count: usize, seed: u64, domain: Option<Domain>, out_dir: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::Invalid("--count must be at least 1".into()));
    }
    let (state, _) = load_checkpoint(checkpoint)?;
    let z = seeded_z(seed, count, state.config.z_dim);
    let domains: Vec<Option<Domain>> = match domain {
        Some(d) => vec![Some(d)],
        None if state.model.arch.per_domain() => Domain::ALL.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    for d in domains {
        let batch = sample(&state.model, &z, d)?;
        for i in 0..count {
            let tile = Tensor::from_vec(&[1, 3, batch.resolution(), batch.resolution()], batch.data.item(i).to_vec());
            let path = out_dir.join(format!("{}_{i:04}.png", batch.domains[i]));
            save_png(&tile_grid(&tile, 1)?, &path)?;
            out!("{}", path.display());
        }
    }
    Ok(())
}

pub fn grid(checkpoint: &Path, m: usize, seed: u64, domain: Option<Domain>, out: &Path) -> Result<()> {
    let side = square_side(m)?;
    if m > MAX_GRID {
        return Err(Error::Invalid(format!("--m {m} exceeds {MAX_GRID}")));
    }
    let (state, _) = load_checkpoint(checkpoint)?;
    let z = seeded_z(seed, m, state.config.z_dim);
    let batch = sample(&state.model, &z, generator_domain(&state, domain))?;
    save_png(&tile_grid(&batch.data, side)?, out)
}

pub fn paired(checkpoint: &Path, m: usize, seed: u64, out: &Path) -> Result<()> {
    let side = square_side(m)?;
    let (state, _) = load_checkpoint(checkpoint)?;
    let z = seeded_z(seed, m, state.config.z_dim);
    let (s, l) = sample_paired(&state.model, &z)?;
    save_png(&hconcat(&[tile_grid(&s.data, side)?, tile_grid(&l.data, side)?]), out)
}

pub fn index(checkpoint: &Path, corpus: &Path, source: Source, batch: usize, out: &Path) -> Result<()> {
    let (state, _) = load_checkpoint(checkpoint)?;
    let corpus = Corpus::read_manifest(corpus)?;
    let index = build_index(
        &state.model,
        &state.fingerprint(),
        &corpus,
        source,
        state.config.resolution,
        batch,
    )?;
    index.save(out)?;
    out!("rows\t{}", index.len());
    out!("dim\t{}", index.dim());
    Ok(())
}

fn load_index(dir: &Path, checkpoint_dir: &Path) -> Result<EmbeddingIndex> {
    let index = EmbeddingIndex::load(dir)?;
    let want = checkpoint_fingerprint(checkpoint_dir)?;
    if index.fingerprint != want {
        return Err(Error::Invalid(format!(
            "index {} was built from checkpoint {} but {} has fingerprint {}",
            dir.display(),
            index.fingerprint,
            checkpoint_dir.display(),
            want
        )));
    }
    Ok(index)
}

pub enum Query {
    Seed(u64),
    Image(PathBuf),
}

#[allow(clippy::too_many_arguments)]
pub fn knn_panel(
    checkpoint: &Path,
    indexes: &[PathBuf],
    corpus: &Path,
    query: Query,
    domain: Option<Domain>,
    k: usize,
    out: &Path,
) -> Result<()> {
    let (state, dir) = load_checkpoint(checkpoint)?;
    let indexes: Vec<EmbeddingIndex> = indexes.iter().map(|p| load_index(p, &dir)).collect::<Result<_>>()?;
    let corpus = Corpus::read_manifest(corpus)?;
    let res = state.config.resolution;
    let query = match query {
        Query::Seed(seed) => {
            let z = seeded_z(seed, 1, state.config.z_dim);
            let mut batch = sample(&state.model, &z, generator_domain(&state, domain))?;
            batch.domains = vec![domain.unwrap_or(Domain::S)];
            batch
        }
        Query::Image(path) => ImageBatch {
            data: Tensor::from_vec(&[1, 3, res, res], load_image(&path, res)?),
            domains: vec![domain.unwrap_or(Domain::S)],
        },
    };
    let mut rows = Vec::new();
    out!("source\tdomain\trank\tframe_id\tdistance");
    for index in &indexes {
        let q = embed(&state.model, &query, index.source)?;
        for d in Domain::ALL {
            if !(0..index.len()).any(|i| index.domain(i) == d) {
                continue;
            }
            let hits = knn(index, q.item(0), k, Some(d))?;
            for (rank, n) in hits.iter().enumerate() {
                out!("{}\t{d}\t{}\t{}\t{}", index.source, rank + 1, n.frame_id, n.distance);
            }
            let ids: Vec<u64> = hits.iter().map(|n| n.frame_id).collect();
            let images = load_batch_any(&corpus, &ids, res)?;
            rows.push((0..ids.len()).map(|i| images.data.item(i).to_vec()).collect());
        }
    }
    save_png(&neighbor_panel(res, query.data.item(0), &rows)?.render(), out)
}

#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    checkpoint: &Path,
    index: &Path,
    corpus: &Path,
    query: &str,
    domain: Domain,
    top: usize,
    aggregate: Aggregate,
    out: &Path,
) -> Result<()> {
    let (state, dir) = load_checkpoint(checkpoint)?;
    let index = load_index(index, &dir)?;
    let corpus = Corpus::read_manifest(corpus)?;
    let query = index.episode_bag(query)?;
    let candidates = index
        .episode_ids(Some(domain))
        .iter()
        .map(|e| index.episode_bag(e))
        .collect::<Result<Vec<_>>>()?;
    let result = retrieve_episodes(&query, &candidates, top, aggregate)?;
    out!("rank\tepisode\tdistance");
    for (rank, (episode, d)) in result.ranking.iter().enumerate() {
        out!("{}\t{episode}\t{d}", rank + 1);
    }
    let res = state.config.resolution;
    let mut pairs = Vec::new();
    for &(q, c, _) in result.top_pairs.iter().take(crossgan::render::MAX_STRIP_COLUMNS) {
        let images = load_batch_any(&corpus, &[q, c], res)?;
        pairs.push((images.data.item(0).to_vec(), images.data.item(1).to_vec()));
    }
    save_png(&match_strip(res, &pairs)?.render(), out)
}

pub fn losses(run_dir: &Path, window: u64, diversity: bool) -> Result<()> {
    if window == 0 {
        return Err(Error::Invalid("--window must be at least 1".into()));
    }
    let path = run_dir.join("losses.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut sums: BTreeMap<(u64, String), (f64, usize)> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let l = parse_log_line(line)?;
        let e = sums.entry((l.iteration / window * window, l.name.to_string())).or_default();
        e.0 += l.value;
        e.1 += 1;
    }
    out!("window_start\tloss\tmean\tcount");
    for ((start, name), (sum, n)) in &sums {
        out!("{start}\t{name}\t{}\t{n}", sum / *n as f64);
    }
    if diversity {
        out!("iteration\tdomain\tdiversity");
        for dir in list_checkpoints(&run_dir.join("checkpoints"))? {
            let state = TrainState::load(&dir)?;
            let z = fixed_z(&state.config);
            let domains: Vec<Option<Domain>> = if state.model.arch.per_domain() {
                Domain::ALL.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for d in domains {
                let score = diversity_score(&sample(&state.model, &z, d)?.data)?;
                let label = d.map_or("-".to_string(), |d| d.to_string());
                out!("{}\t{label}\t{score}", state.iteration);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_maps() {
        assert_eq!(parse_map("simpsons=S").unwrap(), ("simpsons".to_string(), Domain::S));
        assert!(parse_map("a=b=L").is_err());
        assert!(parse_map("=S").is_err());
        assert!(parse_map("dir").is_err());
        assert!(parse_map("dir=X").is_err());
    }
}
