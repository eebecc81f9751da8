//! Image-directory corpora, normalized batches, seeded minibatch streams,
//! and a procedural two-style corpus for tests.
//!
//! On disk a corpus is `<root>/<domain-dir>/<episode-dir>/<frame>.png`.
//! Pixel values map from `[0, 255]` to `[-1, 1]` via `v / 127.5 - 1`, the
//! range of the generator's tanh output.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageReader, Rgb, RgbImage};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RESOLUTIONS: [usize; 3] = [64, 128, 256];

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// The two series a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    S,
    L,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::S, Domain::L];

    /// Class index used by the domain classifier.
    pub fn index(self) -> usize {
        match self {
            Domain::S => 0,
            Domain::L => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Domain::S),
            1 => Some(Domain::L),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Domain::S => Domain::L,
            Domain::L => Domain::S,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::S => "S",
            Domain::L => "L",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Domain::S),
            "L" | "l" => Ok(Domain::L),
            other => Err(Error::Invalid(format!("unknown domain {other:?} (want S or L)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub domain: Domain,
    pub episode_id: String,
    pub frame_index: u32,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<FrameRecord>,
    by_id: HashMap<u64, usize>,
    episodes: IndexMap<String, Vec<u64>>,
}

impl Corpus {
    /// Validates the record invariants and indexes episodes.
    pub fn new(records: Vec<FrameRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Corpus("corpus is empty".into()));
        }
        let mut by_id = HashMap::with_capacity(records.len());
        let mut slots = HashSet::new();
        let mut episode_domain: HashMap<&str, Domain> = HashMap::new();
        let mut grouped: BTreeMap<(Domain, &str), Vec<(u32, u64)>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.frame_id, i).is_some() {
                return Err(Error::Corpus(format!("duplicate frame id {}", r.frame_id)));
            }
            if !slots.insert((r.episode_id.as_str(), r.frame_index)) {
                return Err(Error::Corpus(format!(
                    "duplicate frame index {} in episode {}",
                    r.frame_index, r.episode_id
                )));
            }
            if let Some(d) = episode_domain.insert(&r.episode_id, r.domain) {
                if d != r.domain {
                    return Err(Error::Corpus(format!(
                        "episode {} spans both domains",
                        r.episode_id
                    )));
                }
            }
            grouped
                .entry((r.domain, &r.episode_id))
                .or_default()
                .push((r.frame_index, r.frame_id));
        }
        let episodes = grouped
            .into_iter()
            .map(|((_, ep), mut frames)| {
                frames.sort_unstable();
                (ep.to_string(), frames.into_iter().map(|(_, id)| id).collect())
            })
            .collect();
        Ok(Self {
            records,
            by_id,
            episodes,
        })
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, frame_id: u64) -> Option<&FrameRecord> {
        self.by_id.get(&frame_id).map(|&i| &self.records[i])
    }

    /// Episode id to frame ids ordered by frame index.
    pub fn episodes(&self) -> &IndexMap<String, Vec<u64>> {
        &self.episodes
    }

    pub fn domains_present(&self) -> Vec<Domain> {
        let mut d: Vec<Domain> = self.records.iter().map(|r| r.domain).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.records.iter().filter(|r| r.domain == domain).count()
    }

    pub fn ids(&self, domain: Option<Domain>) -> Vec<u64> {
        self.records
            .iter()
            .filter(|r| domain.is_none_or(|d| r.domain == d))
            .map(|r| r.frame_id)
            .collect()
    }

    /// Tab-separated manifest, one record per line:
    /// `frame_id, domain, episode_id, frame_index, path`.
    pub fn to_manifest(&self) -> Result<String> {
        let mut out = String::from("# frame_id\tdomain\tepisode_id\tframe_index\tpath\n");
        for r in &self.records {
            let path = r
                .path
                .to_str()
                .ok_or_else(|| Error::Corpus(format!("non-UTF-8 path {:?}", r.path)))?;
            for (what, s) in [("episode id", r.episode_id.as_str()), ("path", path)] {
                if s.contains(['\t', '\n', '\r']) {
                    return Err(Error::Corpus(format!("{what} {s:?} contains a tab or newline")));
                }
            }
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.frame_id, r.domain, r.episode_id, r.frame_index, path
            ));
        }
        Ok(out)
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, domain, episode, index, path] = fields[..] else {
                return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
            };
            if episode.is_empty() || path.is_empty() {
                return Err(bad("empty episode id or path".into()));
            }
            records.push(FrameRecord {
                frame_id: id.parse().map_err(|_| bad(format!("bad frame id {id:?}")))?,
                domain: domain.parse().map_err(|e: Error| bad(e.to_string()))?,
                episode_id: episode.to_string(),
                frame_index: index
                    .parse()
                    .map_err(|_| bad(format!("bad frame index {index:?}")))?,
                path: PathBuf::from(path),
            });
        }
        Corpus::new(records)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_manifest()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_manifest(&text)
    }
}

/// Outcome of a directory scan.
#[derive(Debug)]
pub struct ScanReport {
    pub corpus: Corpus,
    /// Image files that could not be read and were left out.
    pub skipped: usize,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn readable_image(path: &Path) -> bool {
    ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|_| ())
        .and_then(|r| r.into_dimensions().map_err(|_| ()))
        .is_ok()
}

/// Walks `root/<domain-dir>/<episode-dir>/<frame>` for every mapped domain
/// directory. Episode ids are `<domain-dir>/<episode-dir>` so they stay
/// unique across domains.
pub fn scan_corpus(root: &Path, domain_map: &[(String, Domain)]) -> Result<ScanReport> {
    if !root.is_dir() {
        return Err(Error::Corpus(format!("corpus root {} does not exist", root.display())));
    }
    let mut ordered: Vec<&(String, Domain)> = domain_map.iter().collect();
    ordered.sort_by(|a, b| (a.1, &a.0).cmp(&(b.1, &b.0)));

    let mut records = Vec::new();
    let mut skipped = 0;
    for (dir_name, domain) in ordered {
        let domain_dir = root.join(dir_name);
        if !domain_dir.is_dir() {
            return Err(Error::Corpus(format!(
                "domain directory {} does not exist",
                domain_dir.display()
            )));
        }
        let before = records.len();
        for episode_dir in sorted_entries(&domain_dir)? {
            if !episode_dir.is_dir() {
                continue;
            }
            let episode_name = episode_dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Corpus(format!("non-UTF-8 episode {episode_dir:?}")))?;
            let episode_id = format!("{dir_name}/{episode_name}");
            let mut frame_index = 0;
            for file in sorted_entries(&episode_dir)? {
                if !file.is_file() || !is_image(&file) {
                    continue;
                }
                if !readable_image(&file) {
                    log::warn!("skipping unreadable image {}", file.display());
                    skipped += 1;
                    continue;
                }
                records.push(FrameRecord {
                    frame_id: records.len() as u64,
                    domain: *domain,
                    episode_id: episode_id.clone(),
                    frame_index,
                    path: file,
                });
                frame_index += 1;
            }
        }
        if records.len() == before {
            return Err(Error::Corpus(format!(
                "domain directory {} holds no readable images",
                domain_dir.display()
            )));
        }
    }
    Ok(ScanReport {
        corpus: Corpus::new(records)?,
        skipped,
    })
}

/// A batch of normalized images, shape `(batch, 3, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub data: Tensor<f32>,
    pub domains: Vec<Domain>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.data.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[3]
    }
}

pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn denormalize_pixel(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Planar `(3, H, W)` values in `[-1, 1]`.
pub fn image_to_planar(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let at = (y * w + x) as usize;
        for c in 0..3 {
            out[c * plane + at] = normalize_pixel(px.0[c]);
        }
    }
    out
}

pub fn planar_to_image(values: &[f32], size: usize) -> RgbImage {
    let plane = size * size;
    assert_eq!(values.len(), 3 * plane, "planar image length");
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let at = y as usize * size + x as usize;
        Rgb([0, 1, 2].map(|c| denormalize_pixel(values[c * plane + at])))
    })
}

/// Decodes one file and resizes it (bilinear) unless it already matches.
pub fn load_image(path: &Path, resolution: usize) -> Result<Vec<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let r = resolution as u32;
    let img = if img.dimensions() == (r, r) {
        img
    } else {
        image::imageops::resize(&img, r, r, FilterType::Triangle)
    };
    Ok(image_to_planar(&img))
}

fn check_resolution(resolution: usize) -> Result<()> {
    if RESOLUTIONS.contains(&resolution) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "resolution {resolution} not in {RESOLUTIONS:?}"
        )))
    }
}

/// Loads frames in the order given. Resolution must be 64, 128 or 256;
/// use [`load_batch_any`] for the small test sizes.
pub fn load_batch(corpus: &Corpus, ids: &[u64], resolution: usize) -> Result<ImageBatch> {
    check_resolution(resolution)?;
    load_batch_any(corpus, ids, resolution)
}

pub fn load_batch_any(corpus: &Corpus, ids: &[u64], resolution: usize) -> Result<ImageBatch> {
    let mut data = Vec::with_capacity(ids.len() * 3 * resolution * resolution);
    let mut domains = Vec::with_capacity(ids.len());
    for &id in ids {
        let rec = corpus.get(id).ok_or(Error::UnknownFrame(id))?;
        data.extend(load_image(&rec.path, resolution)?);
        domains.push(rec.domain);
    }
    Ok(ImageBatch {
        data: Tensor::from_vec(&[ids.len(), 3, resolution, resolution], data),
        domains,
    })
}

/// Decoded frames kept in memory, keyed by frame id, for one resolution.
#[derive(Debug, Default)]
pub struct FrameCache {
    resolution: usize,
    frames: HashMap<u64, Vec<f32>>,
}

impl FrameCache {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            frames: HashMap::new(),
        }
    }

    pub fn load(&mut self, corpus: &Corpus, ids: &[u64]) -> Result<ImageBatch> {
        let r = self.resolution;
        let mut data = Vec::with_capacity(ids.len() * 3 * r * r);
        let mut domains = Vec::with_capacity(ids.len());
        for &id in ids {
            let rec = corpus.get(id).ok_or(Error::UnknownFrame(id))?;
            if !self.frames.contains_key(&id) {
                self.frames.insert(id, load_image(&rec.path, r)?);
            }
            data.extend_from_slice(&self.frames[&id]);
            domains.push(rec.domain);
        }
        Ok(ImageBatch {
            data: Tensor::from_vec(&[ids.len(), 3, r, r], data),
            domains,
        })
    }
}

/// Position of a stream: epoch number and offset into that epoch's order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StreamPosition {
    pub epoch: u64,
    pub cursor: usize,
}

/// Endless sequence of frame-id batches. Each epoch is a seeded permutation
/// of the filtered records; the trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct MinibatchStream {
    ids: Vec<u64>,
    batch_size: usize,
    seed: u64,
    position: StreamPosition,
    order: Vec<u64>,
}

impl MinibatchStream {
    pub fn new(
        corpus: &Corpus,
        batch_size: usize,
        domain_filter: Option<Domain>,
        seed: u64,
    ) -> Result<Self> {
        let ids = corpus.ids(domain_filter);
        if batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if ids.is_empty() {
            return Err(Error::Corpus("no records match the domain filter".into()));
        }
        if batch_size > ids.len() {
            return Err(Error::Invalid(format!(
                "batch size {batch_size} exceeds the {} available records",
                ids.len()
            )));
        }
        let mut s = Self {
            ids,
            batch_size,
            seed,
            position: StreamPosition::default(),
            order: Vec::new(),
        };
        s.order = s.epoch_order(0);
        Ok(s)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order = self.ids.clone();
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.ids.len() / self.batch_size
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn position(&self) -> StreamPosition {
        self.position
    }

    /// Moves to a previously recorded position.
    pub fn seek(&mut self, position: StreamPosition) -> Result<()> {
        if position.cursor > self.ids.len() {
            return Err(Error::Invalid(format!(
                "stream cursor {} out of range",
                position.cursor
            )));
        }
        self.position = position;
        self.order = self.epoch_order(position.epoch);
        Ok(())
    }

    pub fn next_ids(&mut self) -> Vec<u64> {
        if self.position.cursor + self.batch_size > self.order.len() {
            self.position = StreamPosition {
                epoch: self.position.epoch + 1,
                cursor: 0,
            };
            self.order = self.epoch_order(self.position.epoch);
        }
        let start = self.position.cursor;
        self.position.cursor += self.batch_size;
        self.order[start..start + self.batch_size].to_vec()
    }

    pub fn next_batch(&mut self, corpus: &Corpus, resolution: usize) -> Result<ImageBatch> {
        let ids = self.next_ids();
        load_batch_any(corpus, &ids, resolution)
    }
}

impl Iterator for MinibatchStream {
    type Item = Vec<u64>;

    fn next(&mut self) -> Option<Vec<u64>> {
        Some(self.next_ids())
    }
}

const WARM: [[u8; 3]; 5] = [
    [232, 120, 40],
    [205, 62, 35],
    [245, 200, 80],
    [190, 45, 60],
    [250, 160, 110],
];
const COOL: [[u8; 3]; 5] = [
    [40, 90, 205],
    [30, 160, 175],
    [75, 60, 190],
    [20, 120, 95],
    [60, 200, 230],
];

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v as i32 + rng.random_range(-12..=12)).clamp(0, 255) as u8))
}

fn synth_frame(rng: &mut ChaCha8Rng, palette: &[[u8; 3]], size: u32) -> RgbImage {
    let pick = palette[rng.random_range(0..palette.len())];
    let bg = jitter(rng, pick);
    let mut img = RgbImage::from_pixel(size, size, bg);
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let pick = palette[rng.random_range(0..palette.len())];
        let color = jitter(rng, pick);
        let cx = rng.random_range(0..size) as f32;
        let cy = rng.random_range(0..size) as f32;
        let rx = rng.random_range(size / 10..=size / 3).max(1) as f32;
        let ry = rng.random_range(size / 10..=size / 3).max(1) as f32;
        let ellipse = rng.random_bool(0.5);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let dx = (x as f32 - cx) / rx;
            let dy = (y as f32 - cy) / ry;
            let inside = if ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            };
            if inside {
                *px = color;
            }
        }
    }
    img
}

/// Writes a two-style corpus under `root` and scans it back.
///
/// Domain `S` frames use a warm palette and domain `L` frames a cool one,
/// so the mean red channel alone separates the domains.
pub fn synth_corpus(
    root: &Path,
    n_episodes: usize,
    frames_per_episode: usize,
    resolution: usize,
    seed: u64,
) -> Result<Corpus> {
    if n_episodes == 0 || frames_per_episode == 0 || resolution == 0 {
        return Err(Error::Invalid("synthetic corpus counts must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (domain, palette) in [(Domain::S, &WARM[..]), (Domain::L, &COOL[..])] {
        for ep in 0..n_episodes {
            let dir = root.join(domain.to_string()).join(format!("ep{ep:03}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for f in 0..frames_per_episode {
                let img = synth_frame(&mut rng, palette, resolution as u32);
                let path = dir.join(format!("frame{f:04}.png"));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            }
        }
    }
    let map = vec![("S".to_string(), Domain::S), ("L".to_string(), Domain::L)];
    Ok(scan_corpus(root, &map)?.corpus)
}

/// Maps each domain's directory name to itself (`S/`, `L/`).
pub fn default_domain_map() -> Vec<(String, Domain)> {
    Domain::ALL.iter().map(|d| (d.to_string(), *d)).collect()
}
