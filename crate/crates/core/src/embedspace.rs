//! Penultimate-layer embeddings, exact nearest-neighbor search, and the
//! bag-of-frames episode distance.
//!
//! An index directory holds `manifest.txt` (source, dimension, row count,
//! checkpoint fingerprint), `frames.tsv` (one `frame_id<TAB>domain<TAB>episode`
//! line per row) and `vectors.bin` (the `(N, D)` matrix as a binary array
//! record).

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::binfmt::{decode_tensor, encode_tensor};
use crate::corpus::{load_batch_any, Corpus, Domain, ImageBatch};
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nets::{role, Arch, Mode, Model};
use crate::tensor::Tensor;

pub const INDEX_FORMAT: &str = "crossgan-index-1";

/// Which penultimate layer supplies the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Discriminator,
    Classifier,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Discriminator => "discriminator",
            Source::Classifier => "classifier",
        })
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discriminator" => Ok(Source::Discriminator),
            "classifier" => Ok(Source::Classifier),
            _ => Err(Error::Invalid(format!("unknown embedding source {s:?}"))),
        }
    }
}

fn penultimate(model: &Model<f32>, role: &str, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let net = &model.net(role).net;
    let mark = net
        .mark("penultimate")
        .ok_or_else(|| Error::Invalid(format!("{role} network exposes no penultimate layer")))?;
    let mut fwd = model.forward(role, x, Mode::Eval)?;
    let act = fwd.acts.swap_remove(mark);
    let m = act.batch();
    let d = act.item_len();
    Ok(act.reshape(&[m, d]))
}

/// Inference-mode penultimate activations, one row per image. Coupled
/// models embed each image with the discriminator of its own domain.
pub fn embed(model: &Model<f32>, images: &ImageBatch, source: Source) -> Result<Tensor<f32>> {
    let x = &images.data;
    match (&model.arch, source) {
        (Arch::Gan { .. }, Source::Discriminator) => penultimate(model, role::D, x),
        (Arch::Dann(_), Source::Discriminator) => penultimate(model, role::TRUNK, x),
        (Arch::Dann(_), Source::Classifier) => {
            let a = model.forward(role::TRUNK, x, Mode::Eval)?.into_output();
            penultimate(model, role::CLASSIFIER, &a)
        }
        (Arch::Coupled(_), Source::Discriminator) => {
            if images.domains.len() != x.batch() {
                return Err(Error::Invalid("coupled embedding needs a domain per image".into()));
            }
            let mut rows: Vec<Option<Vec<f32>>> = vec![None; x.batch()];
            for (domain, d_role) in [(Domain::S, role::DS), (Domain::L, role::DL)] {
                let idx: Vec<usize> = (0..x.batch()).filter(|&i| images.domains[i] == domain).collect();
                if idx.is_empty() {
                    continue;
                }
                let parts: Vec<Tensor<f32>> = idx.iter().map(|&i| x.slice_batch(i, i + 1)).collect();
                let refs: Vec<&Tensor<f32>> = parts.iter().collect();
                let e = penultimate(model, d_role, &Tensor::concat_batch(&refs))?;
                for (k, &i) in idx.iter().enumerate() {
                    rows[i] = Some(e.item(k).to_vec());
                }
            }
            let d = rows[0].as_ref().map_or(0, Vec::len);
            let data: Vec<f32> = rows.into_iter().flat_map(|r| r.expect("every row filled")).collect();
            Ok(Tensor::from_vec(&[x.batch(), d], data))
        }
        (_, Source::Classifier) => Err(Error::Invalid(
            "the classifier embedding needs a domain-adaptation checkpoint".into(),
        )),
        (Arch::Toy(_), _) => Err(Error::Invalid("toy models have no image embedding".into())),
    }
}

/// Embeddings of a corpus, one row per frame in corpus order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub source: Source,
    /// Fingerprint of the checkpoint that produced the vectors.
    pub fingerprint: String,
    vectors: Tensor<f32>,
    frame_ids: Vec<u64>,
    domains: Vec<Domain>,
    episodes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub frame_id: u64,
    pub distance: f64,
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl EmbeddingIndex {
    pub fn new(
        source: Source,
        fingerprint: String,
        vectors: Tensor<f32>,
        rows: Vec<(u64, Domain, String)>,
    ) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.shape()[0] != rows.len() {
            return Err(Error::Invalid(format!(
                "{} row labels for a {:?} matrix",
                rows.len(),
                vectors.shape()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some((id, ..)) = rows.iter().find(|(id, ..)| !seen.insert(*id)) {
            return Err(Error::Invalid(format!("frame id {id} appears twice in the index")));
        }
        let mut frame_ids = Vec::with_capacity(rows.len());
        let mut domains = Vec::with_capacity(rows.len());
        let mut episodes = Vec::with_capacity(rows.len());
        for (id, d, e) in rows {
            frame_ids.push(id);
            domains.push(d);
            episodes.push(e);
        }
        Ok(Self {
            source,
            fingerprint,
            vectors,
            frame_ids,
            domains,
            episodes,
        })
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vectors(&self) -> &Tensor<f32> {
        &self.vectors
    }

    pub fn frame_ids(&self) -> &[u64] {
        &self.frame_ids
    }

    pub fn domain(&self, row: usize) -> Domain {
        self.domains[row]
    }

    pub fn episode(&self, row: usize) -> &str {
        &self.episodes[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        self.vectors.item(row)
    }

    pub fn row_of(&self, frame_id: u64) -> Option<usize> {
        self.frame_ids.iter().position(|&f| f == frame_id)
    }

    /// Episode ids in first-appearance order, optionally for one domain.
    pub fn episode_ids(&self, domain: Option<Domain>) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (e, d) in self.episodes.iter().zip(&self.domains) {
            if domain.is_none_or(|want| want == *d) && !out.contains(e) {
                out.push(e.clone());
            }
        }
        out
    }

    pub fn episode_bag(&self, episode_id: &str) -> Result<EpisodeBag> {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.episodes[i] == episode_id).collect();
        let Some(&first) = rows.first() else {
            return Err(Error::Invalid(format!(
                "unknown episode {episode_id:?}; available: {}",
                self.episode_ids(None).join(", ")
            )));
        };
        EpisodeBag::new(
            episode_id.to_string(),
            self.domains[first],
            rows.iter().map(|&i| self.frame_ids[i]).collect(),
            rows.iter().map(|&i| self.row(i).to_vec()).collect(),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = KvMap::new();
        m.set("format", INDEX_FORMAT);
        m.set("source", self.source);
        m.set("dim", self.dim());
        m.set("count", self.len());
        m.set("fingerprint", &self.fingerprint);
        let mut frames = String::new();
        for i in 0..self.len() {
            frames.push_str(&format!("{}\t{}\t{}\n", self.frame_ids[i], self.domains[i], self.episodes[i]));
        }
        for (name, bytes) in [
            ("manifest.txt", m.render().into_bytes()),
            ("frames.tsv", frames.into_bytes()),
            ("vectors.bin", encode_tensor(&self.vectors)),
        ] {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest = String::from_utf8(read("manifest.txt")?)
            .map_err(|_| Error::Format("index manifest is not UTF-8".into()))?;
        let frames = String::from_utf8(read("frames.tsv")?)
            .map_err(|_| Error::Format("index frame list is not UTF-8".into()))?;
        let header = parse_index_manifest(&manifest)?;
        let rows = parse_frame_rows(&frames)?;
        let vectors = decode_tensor(&read("vectors.bin")?)?;
        if vectors.shape() != [header.count, header.dim] || rows.len() != header.count {
            return Err(Error::Format(format!(
                "index declares {}x{}, found {} rows and a {:?} matrix",
                header.count,
                header.dim,
                rows.len(),
                vectors.shape()
            )));
        }
        Self::new(header.source, header.fingerprint, vectors, rows)
    }
}

/// Parsed index manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexHeader {
    pub source: Source,
    pub dim: usize,
    pub count: usize,
    pub fingerprint: String,
}

pub fn parse_index_manifest(text: &str) -> Result<IndexHeader> {
    let m = KvMap::parse(text)?;
    if m.get("format") != Some(INDEX_FORMAT) {
        return Err(Error::Format(format!("not an index manifest (format {:?})", m.get("format"))));
    }
    Ok(IndexHeader {
        source: m.parse_value("source")?,
        dim: m.parse_value("dim")?,
        count: m.parse_value("count")?,
        fingerprint: m.require("fingerprint")?.to_string(),
    })
}

/// Parses `frame_id<TAB>domain<TAB>episode` lines.
pub fn parse_frame_rows(text: &str) -> Result<Vec<(u64, Domain, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let mut f = line.split('\t');
            let (Some(id), Some(domain), Some(episode), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad("expected three tab-separated fields"));
            };
            let id = id.parse().map_err(|_| bad("bad frame id"))?;
            let domain = domain.parse().map_err(|_| bad("bad domain"))?;
            if episode.is_empty() {
                return Err(bad("empty episode id"));
            }
            Ok((id, domain, episode.to_string()))
        })
        .collect()
}

/// Embeds every frame of `corpus` in `batch`-sized chunks.
pub fn build_index(
    model: &Model<f32>,
    fingerprint: &str,
    corpus: &Corpus,
    source: Source,
    resolution: usize,
    batch: usize,
) -> Result<EmbeddingIndex> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot index an empty corpus".into()));
    }
    if batch == 0 {
        return Err(Error::Invalid("index batch size must be at least 1".into()));
    }
    let mut data = Vec::new();
    let mut dim = 0;
    let mut rows = Vec::with_capacity(corpus.len());
    for chunk in corpus.records().chunks(batch) {
        let ids: Vec<u64> = chunk.iter().map(|r| r.frame_id).collect();
        let images = load_batch_any(corpus, &ids, resolution)?;
        let e = embed(model, &images, source)?;
        dim = e.item_len();
        data.extend_from_slice(e.data());
        rows.extend(chunk.iter().map(|r| (r.frame_id, r.domain, r.episode_id.clone())));
    }
    let vectors = Tensor::from_vec(&[rows.len(), dim], data);
    EmbeddingIndex::new(source, fingerprint.to_string(), vectors, rows)
}

fn by_distance_then_id(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.frame_id.cmp(&b.frame_id))
}

/// Exact k nearest rows by Euclidean distance, ascending, ties by frame id.
/// `k` is clamped to the number of rows passing the filter.
pub fn knn(index: &EmbeddingIndex, query: &[f32], k: usize, domain: Option<Domain>) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if query.len() != index.dim() {
        return Err(Error::Invalid(format!(
            "query has {} dimensions, index has {}",
            query.len(),
            index.dim()
        )));
    }
    let mut all: Vec<Neighbor> = (0..index.len())
        .filter(|&i| domain.is_none_or(|d| index.domains[i] == d))
        .map(|i| Neighbor {
            frame_id: index.frame_ids[i],
            distance: distance(query, index.row(i)),
        })
        .collect();
    all.sort_by(by_distance_then_id);
    all.truncate(k);
    Ok(all)
}

/// One episode's frame embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBag {
    pub episode_id: String,
    pub domain: Domain,
    pub frame_ids: Vec<u64>,
    pub rows: Vec<Vec<f32>>,
}

impl EpisodeBag {
    pub fn new(episode_id: String, domain: Domain, frame_ids: Vec<u64>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid(format!("episode {episode_id:?} has no frames")));
        }
        if frame_ids.len() != rows.len() {
            return Err(Error::Invalid("frame ids and rows differ in length".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid(format!("episode {episode_id:?} mixes row widths")));
        }
        Ok(Self {
            episode_id,
            domain,
            frame_ids,
            rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }
}

/// How accepted pair distances combine into an episode distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregate {
    #[default]
    Min,
    Mean,
}

impl FromStr for Aggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Aggregate::Min),
            "mean" => Ok(Aggregate::Mean),
            _ => Err(Error::Invalid(format!("unknown aggregate {s:?} (min or mean)"))),
        }
    }
}

/// An accepted frame pairing: row positions within the query and candidate
/// bags and their distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub query: usize,
    pub candidate: usize,
    pub distance: f64,
}

/// Greedy one-to-one pairing: cross pairs in ascending distance (ties by
/// query row, then candidate row), each accepted when both frames are
/// still free, until the smaller bag is exhausted.
pub fn greedy_pairs(query: &EpisodeBag, candidate: &EpisodeBag) -> Result<Vec<Pair>> {
    if query.dim() != candidate.dim() {
        return Err(Error::Invalid(format!(
            "episode embeddings differ in width: {} vs {}",
            query.dim(),
            candidate.dim()
        )));
    }
    let mut all = Vec::with_capacity(query.rows.len() * candidate.rows.len());
    for (i, a) in query.rows.iter().enumerate() {
        for (j, b) in candidate.rows.iter().enumerate() {
            all.push(Pair {
                query: i,
                candidate: j,
                distance: distance(a, b),
            });
        }
    }
    all.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.query.cmp(&b.query))
            .then(a.candidate.cmp(&b.candidate))
    });
    let want = query.rows.len().min(candidate.rows.len());
    let mut used_q = vec![false; query.rows.len()];
    let mut used_c = vec![false; candidate.rows.len()];
    let mut accepted = Vec::with_capacity(want);
    for p in all {
        if accepted.len() == want {
            break;
        }
        if !used_q[p.query] && !used_c[p.candidate] {
            used_q[p.query] = true;
            used_c[p.candidate] = true;
            accepted.push(p);
        }
    }
    Ok(accepted)
}

pub fn episode_distance_with(query: &EpisodeBag, candidate: &EpisodeBag, aggregate: Aggregate) -> Result<f64> {
    let pairs = greedy_pairs(query, candidate)?;
    Ok(match aggregate {
        Aggregate::Min => pairs.iter().map(|p| p.distance).fold(f64::INFINITY, f64::min),
        Aggregate::Mean => pairs.iter().map(|p| p.distance).sum::<f64>() / pairs.len() as f64,
    })
}

/// Minimum distance among the greedily accepted frame pairs.
pub fn episode_distance(query: &EpisodeBag, candidate: &EpisodeBag) -> Result<f64> {
    episode_distance_with(query, candidate, Aggregate::Min)
}

/// Ranked candidates plus the accepted frame pairs of the best one, as
/// `(query frame id, candidate frame id, distance)` in acceptance order.
#[derive(Clone, Debug, PartialEq)]
pub struct Retrieval {
    pub ranking: Vec<(String, f64)>,
    pub top_pairs: Vec<(u64, u64, f64)>,
}

pub fn retrieve_episodes(
    query: &EpisodeBag,
    candidates: &[EpisodeBag],
    top: usize,
    aggregate: Aggregate,
) -> Result<Retrieval> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidate episodes".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        scored.push((episode_distance_with(query, c, aggregate)?, i));
    }
    scored.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| candidates[a.1].episode_id.cmp(&candidates[b.1].episode_id))
    });
    let best = &candidates[scored[0].1];
    let top_pairs = greedy_pairs(query, best)?
        .into_iter()
        .map(|p| (query.frame_ids[p.query], best.frame_ids[p.candidate], p.distance))
        .collect();
    let ranking = scored
        .into_iter()
        .take(top.max(1))
        .map(|(d, i)| (candidates[i].episode_id.clone(), d))
        .collect();
    Ok(Retrieval { ranking, top_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_1d(values: &[f32]) -> EmbeddingIndex {
        let rows = (0..values.len())
            .map(|i| (i as u64, Domain::S, format!("S/ep{}", i % 2)))
            .collect();
        EmbeddingIndex::new(
            Source::Discriminator,
            "fp".into(),
            Tensor::from_vec(&[values.len(), 1], values.to_vec()),
            rows,
        )
        .unwrap()
    }

    fn bag(id: &str, rows: &[&[f32]]) -> EpisodeBag {
        EpisodeBag::new(
            id.into(),
            Domain::S,
            (0..rows.len() as u64).collect(),
            rows.iter().map(|r| r.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn knn_orders_by_distance() {
        let idx = index_1d(&[0.0, 1.0, 5.0]);
        let got = knn(&idx, &[0.9], 2, None).unwrap();
        assert_eq!(got.iter().map(|n| n.frame_id).collect::<Vec<_>>(), [1, 0]);
        assert!((got[0].distance - 0.1).abs() < 1e-6);
        assert!((got[1].distance - 0.9).abs() < 1e-6);
        assert_eq!(knn(&idx, &[5.0], 1, None).unwrap()[0], Neighbor { frame_id: 2, distance: 0.0 });
        assert_eq!(knn(&idx, &[0.0], 10, None).unwrap().len(), 3);
        assert!(knn(&idx, &[0.0, 1.0], 1, None).is_err());
        assert!(knn(&idx, &[0.0], 0, None).is_err());
        assert!(knn(&idx, &[0.0], 3, Some(Domain::L)).unwrap().is_empty());
    }

    #[test]
    fn knn_breaks_ties_by_frame_id() {
        let idx = index_1d(&[1.0, -1.0, 1.0]);
        let ids: Vec<u64> = knn(&idx, &[0.0], 3, None).unwrap().iter().map(|n| n.frame_id).collect();
        assert_eq!(ids, [0, 1, 2]);
    }

    #[test]
    fn episode_distance_examples() {
        assert_eq!(episode_distance(&bag("a", &[&[2.0]]), &bag("b", &[&[2.0]])).unwrap(), 0.0);
        assert_eq!(episode_distance(&bag("a", &[&[0.0]]), &bag("b", &[&[3.0]])).unwrap(), 3.0);
        // Cross distances [[1, 4], [2, 3]].
        let q = bag("q", &[&[0.0], &[10.0]]);
        let c = bag("c", &[&[1.0], &[-4.0]]);
        let pairs = greedy_pairs(&q, &c).unwrap();
        let d: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
        assert_eq!(d, [1.0, 14.0]);
        assert_eq!(episode_distance(&q, &c).unwrap(), 1.0);
        assert_eq!(episode_distance_with(&q, &c, Aggregate::Mean).unwrap(), 7.5);
        assert!(greedy_pairs(&q, &bag("w", &[&[0.0, 1.0]])).is_err());
        assert!(EpisodeBag::new("e".into(), Domain::S, vec![], vec![]).is_err());
    }

    #[test]
    fn retrieval_ranks_self_first_and_clamps() {
        let q = bag("S/q", &[&[0.0], &[1.0]]);
        let far = bag("S/far", &[&[9.0]]);
        let near = bag("S/near", &[&[1.5]]);
        let r = retrieve_episodes(&q, &[far.clone(), q.clone(), near.clone()], 10, Aggregate::Min).unwrap();
        assert_eq!(r.ranking.len(), 3);
        assert_eq!(r.ranking[0], ("S/q".to_string(), 0.0));
        assert_eq!(r.ranking[1].0, "S/near");
        assert_eq!(r.top_pairs.len(), 2);
        assert!(retrieve_episodes(&q, &[], 1, Aggregate::Min).is_err());
    }

    #[test]
    fn index_round_trips_through_disk() {
        let tmp = tempfile::tempdir().unwrap();
        let idx = index_1d(&[0.5, -2.0, 3.25]);
        idx.save(tmp.path()).unwrap();
        assert_eq!(EmbeddingIndex::load(tmp.path()).unwrap(), idx);
        assert_eq!(idx.episode_ids(None), ["S/ep0", "S/ep1"]);
        assert_eq!(idx.episode_bag("S/ep0").unwrap().frame_ids, [0, 2]);
        assert!(idx.episode_bag("S/none").is_err());
    }

    #[test]
    fn frame_rows_reject_malformed_lines() {
        assert!(parse_frame_rows("1\tS\tS/e\n").is_ok());
        assert!(parse_frame_rows("1\tS\n").is_err());
        assert!(parse_frame_rows("x\tS\tS/e\n").is_err());
        assert!(parse_frame_rows("1\tQ\tS/e\n").is_err());
        assert!(parse_frame_rows("1\tS\tS/e\textra\n").is_err());
    }
}
