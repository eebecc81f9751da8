//! Training state and its on-disk checkpoint form.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{Regime, TrainConfig};
use crate::binfmt::{decode_tensor, encode_tensor};
use crate::corpus::StreamPosition;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nets::{derive_seed, role, Arch, Model, ParamSet};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "crossgan-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Sub-seeds derived from the run seed.
pub mod seeds {
    pub const INIT: u64 = 0;
    pub const Z: u64 = 1;
    pub const DATA_S: u64 = 2;
    pub const DATA_L: u64 = 3;
    pub const FIXED_Z: u64 = 4;
    pub const HOLDOUT: u64 = 5;
}

/// Uniform(-1, 1) noise of shape `(m, z_dim)`.
pub fn sample_z(rng: &mut impl Rng, m: usize, z_dim: usize) -> Tensor<f32> {
    let data = (0..m * z_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(&[m, z_dim], data)
}

/// The z batch used for every sample dump of a run.
pub fn fixed_z(config: &TrainConfig) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, seeds::FIXED_Z));
    sample_z(&mut rng, config.sample_count, config.z_dim)
}

pub fn tensor_sha256(t: &Tensor<f32>) -> String {
    hex::encode(Sha256::digest(encode_tensor(t)))
}

/// SHA-256 over every parameter's name and encoded values, in slot order.
pub fn fingerprint(params: &ParamSet<f32>) -> String {
    let mut h = Sha256::new();
    for (slot, name) in params.names().iter().enumerate() {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(encode_tensor(params.get(slot)));
    }
    hex::encode(h.finalize())
}

/// Everything needed to continue a run bitwise.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model<f32>,
    /// One optimizer per update phase, each owning its own moments.
    pub optimizers: IndexMap<String, Optimizer>,
    /// Completed iterations.
    pub iteration: u64,
    pub iterations_per_epoch: u64,
    pub z_rng: ChaCha8Rng,
    /// Data stream positions: one per domain stream of the regime.
    pub streams: Vec<StreamPosition>,
    /// Loss log lines written so far.
    pub history: Vec<String>,
}

/// Optimizer names and the roles each one updates.
pub fn optimizer_groups(regime: Regime) -> Vec<(&'static str, Vec<&'static str>)> {
    match regime {
        Regime::Single | Regime::Combined => vec![("disc", vec![role::D]), ("gen", vec![role::G])],
        Regime::Cogan => vec![
            ("disc", vec![role::DS, role::DL]),
            ("gen", vec![role::GS, role::GL]),
        ],
        Regime::Dann => vec![
            ("disc", vec![role::TRUNK, role::REALNESS]),
            ("gen_s", vec![role::GS]),
            ("gen_l", vec![role::GL]),
            ("cls", vec![role::TRUNK, role::CLASSIFIER]),
        ],
    }
}

/// Number of data streams a regime reads.
pub fn stream_count(regime: Regime) -> usize {
    match regime {
        Regime::Single | Regime::Combined => 1,
        Regime::Cogan | Regime::Dann => 2,
    }
}

impl TrainState {
    /// Fresh state: initialized networks, zeroed moments, iteration 0.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = Model::build(config.arch()?, derive_seed(config.seed, seeds::INIT))?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: Model<f32>) -> Result<Self> {
        if matches!(model.arch, Arch::Toy(_)) {
            return Err(Error::Config("toy models train through the toy module".into()));
        }
        let optimizers = optimizer_groups(config.regime)
            .into_iter()
            .map(|(name, roles)| {
                let opt = Optimizer::new(config.optimizer, &model.union(&roles), &model.params);
                (name.to_string(), opt)
            })
            .collect();
        Ok(Self {
            z_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, seeds::Z)),
            streams: vec![StreamPosition::default(); stream_count(config.regime)],
            config,
            model,
            optimizers,
            iteration: 0,
            iterations_per_epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn next_z(&mut self, m: usize) -> Tensor<f32> {
        sample_z(&mut self.z_rng, m, self.config.z_dim)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(&self.model.params)
    }

    pub fn epoch_boundary(&self) -> bool {
        self.iterations_per_epoch > 0 && self.iteration % self.iterations_per_epoch == 0
    }

    fn manifest(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("format", CHECKPOINT_FORMAT);
        for (k, v) in self.config.to_kv().iter() {
            m.set(&format!("config.{k}"), v);
        }
        m.set("iteration", self.iteration);
        m.set("iterations_per_epoch", self.iterations_per_epoch);
        m.set("epoch_boundary", self.epoch_boundary());
        let arch = &self.model.arch;
        m.set("arch.resolution", arch.resolution());
        m.set("arch.z_dim", arch.z_dim());
        match arch {
            Arch::Gan { discriminator, .. } => {
                m.set("arch.feature_width", discriminator.feature_width().unwrap_or(0));
            }
            Arch::Coupled(c) => m.set("arch.feature_width", c.disc_s.feature_width().unwrap_or(0)),
            Arch::Dann(d) => {
                m.set("arch.feature_width", d.trunk.feature_width().unwrap_or(0));
                m.set("arch.classifier_width", d.classifier_width);
            }
            Arch::Toy(_) => {}
        }
        m.set("rng.z.seed", hex::encode(self.z_rng.get_seed()));
        m.set("rng.z.stream", self.z_rng.get_stream());
        m.set("rng.z.word_pos", self.z_rng.get_word_pos());
        m.set("streams", self.streams.len());
        for (i, s) in self.streams.iter().enumerate() {
            m.set(&format!("stream.{i}.epoch"), s.epoch);
            m.set(&format!("stream.{i}.cursor"), s.cursor);
        }
        m.set("params", self.model.params.len());
        for (i, name) in self.model.params.names().iter().enumerate() {
            m.set(&format!("param.{i}"), name);
        }
        let names: Vec<&str> = self.optimizers.keys().map(String::as_str).collect();
        m.set("optimizers", names.join(","));
        for (name, opt) in &self.optimizers {
            m.set(&format!("optim.{name}.steps"), opt.steps());
        }
        m.set("fixed_z_sha256", tensor_sha256(&fixed_z(&self.config)));
        m.set("fingerprint", self.fingerprint());
        m
    }

    /// Writes the checkpoint directory `dir`, replacing any previous one.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let params_dir = tmp.join("params");
        let optim_dir = tmp.join("optim");
        for d in [&params_dir, &optim_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        write(&tmp.join(MANIFEST_FILE), self.manifest().render().as_bytes())?;
        for (slot, name) in self.model.params.names().iter().enumerate() {
            write(&params_dir.join(format!("{name}.bin")), &encode_tensor(self.model.params.get(slot)))?;
        }
        for (opt_name, opt) in &self.optimizers {
            let (first, second) = opt.moments();
            for (k, &slot) in opt.slots().iter().enumerate().take(first.len()) {
                let pname = self.model.params.name(slot);
                write(&optim_dir.join(format!("{opt_name}.m.{pname}.bin")), &encode_tensor(&first[k]))?;
                write(&optim_dir.join(format!("{opt_name}.v.{pname}.bin")), &encode_tensor(&second[k]))?;
            }
        }
        let mut log = self.history.join("\n");
        if !log.is_empty() {
            log.push('\n');
        }
        write(&tmp.join("losses.tsv"), log.as_bytes())?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        let mut config = TrainConfig::default();
        config.apply(&config_section(&m)?)?;
        let mut state = TrainState::new(config)?;
        state.iteration = m.parse_value("iteration")?;
        state.iterations_per_epoch = m.parse_value("iterations_per_epoch")?;

        let n: usize = m.parse_value("params")?;
        if n != state.model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n} parameters, the configured model has {}",
                state.model.params.len()
            )));
        }
        for slot in 0..n {
            let name = m.require(&format!("param.{slot}"))?;
            if name != state.model.params.name(slot) {
                return Err(Error::Format(format!(
                    "parameter {slot} is {name:?}, expected {:?}",
                    state.model.params.name(slot)
                )));
            }
            let t = read_tensor_file(&dir.join("params").join(format!("{name}.bin")))?;
            state.model.params.assign(slot, t)?;
        }

        let names = m.require("optimizers")?;
        let have: Vec<&str> = state.optimizers.keys().map(String::as_str).collect();
        if names != have.join(",") {
            return Err(Error::Format(format!("optimizer set {names:?} does not match {have:?}")));
        }
        for (opt_name, opt) in state.optimizers.iter_mut() {
            let steps = m.parse_value(&format!("optim.{opt_name}.steps"))?;
            let (first, second) = opt.moments();
            let count = first.len().min(second.len());
            let mut m1 = Vec::with_capacity(count);
            let mut m2 = Vec::with_capacity(count);
            for &slot in opt.slots().iter().take(count) {
                let pname = state.model.params.name(slot);
                m1.push(read_tensor_file(&dir.join("optim").join(format!("{opt_name}.m.{pname}.bin")))?);
                m2.push(read_tensor_file(&dir.join("optim").join(format!("{opt_name}.v.{pname}.bin")))?);
            }
            opt.restore(steps, m1, m2)?;
        }

        let mut seed = [0u8; 32];
        hex::decode_to_slice(m.require("rng.z.seed")?, &mut seed)
            .map_err(|e| Error::Format(format!("rng seed must be 64 hex digits: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(m.parse_value("rng.z.stream")?);
        rng.set_word_pos(m.parse_value("rng.z.word_pos")?);
        state.z_rng = rng;

        let count: usize = m.parse_value("streams")?;
        if count != state.streams.len() {
            return Err(Error::Format(format!("expected {} streams, found {count}", state.streams.len())));
        }
        for (i, s) in state.streams.iter_mut().enumerate() {
            s.epoch = m.parse_value(&format!("stream.{i}.epoch"))?;
            s.cursor = m.parse_value(&format!("stream.{i}.cursor"))?;
        }

        let log_path = dir.join("losses.tsv");
        let log = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        state.history = log.lines().map(str::to_string).collect();

        let want = m.require("fixed_z_sha256")?;
        if tensor_sha256(&fixed_z(&state.config)) != want {
            return Err(Error::Format("fixed sample z does not match the checkpoint".into()));
        }
        let want = m.require("fingerprint")?;
        let got = state.fingerprint();
        if got != want {
            return Err(Error::Format(format!("parameter fingerprint {got} does not match manifest {want}")));
        }
        Ok(state)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Parses a checkpoint manifest's text.
pub fn parse_checkpoint_manifest(text: &str) -> Result<KvMap> {
    let m = KvMap::parse(text)?;
    match m.get("format") {
        Some(CHECKPOINT_FORMAT) => {}
        other => {
            return Err(Error::Format(format!(
                "not a checkpoint manifest (format {other:?})"
            )))
        }
    }
    for key in ["iteration", "params", "optimizers", "fingerprint", "rng.z.seed"] {
        m.require(key)?;
    }
    config_section(&m)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<KvMap> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_checkpoint_manifest(&text)
}

/// The `config.*` keys with the prefix stripped.
pub fn config_section(m: &KvMap) -> Result<KvMap> {
    let mut out = KvMap::new();
    for (k, v) in m.iter() {
        if let Some(k) = k.strip_prefix("config.") {
            out.set(k, v);
        }
    }
    let mut probe = TrainConfig::default();
    probe.apply(&out)?;
    Ok(out)
}

/// Reads only the fingerprint recorded in a checkpoint.
pub fn checkpoint_fingerprint(dir: &Path) -> Result<String> {
    Ok(read_manifest(dir)?.require("fingerprint")?.to_string())
}

/// Checkpoint directories under `root`, oldest first.
pub fn list_checkpoints(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let is_ckpt = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("iter_") && !n.contains('.'));
        if is_ckpt && path.join(MANIFEST_FILE).exists() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Deletes checkpoints that are neither among the newest `keep_last` nor
/// at an epoch boundary.
pub fn prune_checkpoints(root: &Path, keep_last: usize) -> Result<Vec<PathBuf>> {
    let all = list_checkpoints(root)?;
    let cut = all.len().saturating_sub(keep_last);
    let mut removed = Vec::new();
    for dir in &all[..cut] {
        let m = read_manifest(dir)?;
        if m.parse_or("epoch_boundary", false)? {
            continue;
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        removed.push(dir.clone());
    }
    Ok(removed)
}

pub fn checkpoint_dir_name(iteration: u64) -> String {
    format!("iter_{iteration:08}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(regime: Regime) -> TrainConfig {
        TrainConfig {
            regime,
            resolution: 16,
            z_dim: 8,
            base_channels: 4,
            classifier_width: 8,
            batch_size: 4,
            sample_count: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn optimizer_groups_per_regime() {
        for regime in [Regime::Single, Regime::Cogan, Regime::Dann] {
            let s = TrainState::new(tiny(regime)).unwrap();
            let names: Vec<_> = s.optimizers.keys().cloned().collect();
            let want: Vec<_> = optimizer_groups(regime).iter().map(|(n, _)| n.to_string()).collect();
            assert_eq!(names, want);
        }
    }

    #[test]
    fn fixed_z_depends_only_on_config() {
        let c = tiny(Regime::Single);
        assert_eq!(fixed_z(&c), fixed_z(&c));
        let z = fixed_z(&c);
        assert_eq!(z.shape(), &[4, 8]);
        assert!(z.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = TrainState::new(tiny(Regime::Dann)).unwrap();
        s.next_z(3);
        s.iteration = 7;
        s.iterations_per_epoch = 7;
        s.streams[1] = StreamPosition { epoch: 2, cursor: 4 };
        s.history.push("0\tL1\t-2.5\treal_s=-1".into());
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        s.save(&a).unwrap();
        let loaded = TrainState::load(&a).unwrap();
        assert_eq!(loaded.model.params, s.model.params);
        assert_eq!(loaded.z_rng, s.z_rng);
        assert_eq!(loaded.streams, s.streams);
        loaded.save(&b).unwrap();
        for entry in walk(&a) {
            let rel = entry.strip_prefix(&a).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel:?}");
        }
        assert_eq!(walk(&a).len(), walk(&b).len());
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn load_rejects_tampered_parameters() {
        let tmp = tempfile::tempdir().unwrap();
        let s = TrainState::new(tiny(Regime::Single)).unwrap();
        let dir = tmp.path().join("c");
        s.save(&dir).unwrap();
        let p = dir.join("params").join(format!("{}.bin", s.model.params.name(0)));
        let mut t = read_tensor_file(&p).unwrap();
        t.data_mut()[0] += 1.0;
        fs::write(&p, encode_tensor(&t)).unwrap();
        assert!(TrainState::load(&dir).is_err());
    }

    #[test]
    fn pruning_keeps_recent_and_epoch_checkpoints() {
        let tmp = tempfile::tempdir().unwrap();
        let mut s = TrainState::new(tiny(Regime::Single)).unwrap();
        s.iterations_per_epoch = 3;
        for t in 1..=7 {
            s.iteration = t;
            s.save(&tmp.path().join(checkpoint_dir_name(t))).unwrap();
        }
        prune_checkpoints(tmp.path(), 2).unwrap();
        let left: Vec<String> = list_checkpoints(tmp.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(left, ["iter_00000003", "iter_00000006", "iter_00000007"]);
    }
}
