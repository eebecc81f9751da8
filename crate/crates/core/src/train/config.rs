//! Training configuration and its flat `key=value` form.

use std::fmt;
use std::str::FromStr;

use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::losses::GeneratorLoss;
use crate::nets::arch::{DEFAULT_BASE_CHANNELS, DEFAULT_CLASSIFIER_WIDTH, DEFAULT_Z_DIM};
use crate::nets::{Arch, CoupledSpec, DannSpec, DiscriminatorSpec, GeneratorSpec};
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// One domain only.
    Single,
    /// Both domains pooled into one dataset.
    Combined,
    /// Coupled generators and discriminators with tied layers.
    Cogan,
    /// Shared-trunk discriminator with a domain classifier.
    Dann,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Single => "single",
            Regime::Combined => "combined",
            Regime::Cogan => "cogan",
            Regime::Dann => "dann",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single" => Regime::Single,
            "combined" => Regime::Combined,
            "cogan" => Regime::Cogan,
            "dann" => Regime::Dann,
            _ => return Err(Error::Config(format!("unknown regime {s:?}"))),
        })
    }
}

/// When classifier training on generated images begins.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LazyStart {
    Iteration(u64),
    /// After one epoch's worth of iterations.
    Epoch,
}

impl LazyStart {
    pub fn resolve(self, iterations_per_epoch: u64) -> u64 {
        match self {
            LazyStart::Iteration(t) => t,
            LazyStart::Epoch => iterations_per_epoch,
        }
    }
}

impl fmt::Display for LazyStart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LazyStart::Iteration(t) => write!(f, "{t}"),
            LazyStart::Epoch => f.write_str("epoch"),
        }
    }
}

impl FromStr for LazyStart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "epoch" {
            return Ok(LazyStart::Epoch);
        }
        s.parse()
            .map(LazyStart::Iteration)
            .map_err(|_| Error::Config(format!("bad lazy start {s:?} (integer or 'epoch')")))
    }
}

/// The named classifier-training ablations of the domain-adaptation
/// regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    FullDomainAdaptation,
    NoClassifierTraining,
    NoFakeClassifierTraining,
    NoRealClassifierTraining,
    LazyFakeClassifierTraining,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "FullDomainAdaptation" => Variant::FullDomainAdaptation,
            "NoClassifierTraining" => Variant::NoClassifierTraining,
            "NoFakeClassifierTraining" => Variant::NoFakeClassifierTraining,
            "NoRealClassifierTraining" => Variant::NoRealClassifierTraining,
            "LazyFakeClassifierTraining" => Variant::LazyFakeClassifierTraining,
            _ => return Err(Error::Config(format!("unknown variant {s:?}"))),
        })
    }
}

/// Classifier step switches: real-image step, fake-image step, and the
/// first iteration at which the fake-image step may run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantFlags {
    pub train_classifier_real: bool,
    pub train_classifier_fake: bool,
    pub lazy_fake_start: LazyStart,
}

impl VariantFlags {
    pub fn triple(&self, iterations_per_epoch: u64) -> (bool, bool, u64) {
        (
            self.train_classifier_real,
            self.train_classifier_fake,
            self.lazy_fake_start.resolve(iterations_per_epoch),
        )
    }
}

/// Flag triple for a named variant. The lazy variant's warmup defaults to
/// one epoch.
pub fn variant_of(variant: Variant) -> VariantFlags {
    let (real, fake, start) = match variant {
        Variant::FullDomainAdaptation => (true, true, LazyStart::Iteration(0)),
        Variant::NoClassifierTraining => (false, false, LazyStart::Iteration(0)),
        Variant::NoFakeClassifierTraining => (true, false, LazyStart::Iteration(0)),
        Variant::NoRealClassifierTraining => (false, true, LazyStart::Iteration(0)),
        Variant::LazyFakeClassifierTraining => (true, true, LazyStart::Epoch),
    };
    VariantFlags {
        train_classifier_real: real,
        train_classifier_fake: fake,
        lazy_fake_start: start,
    }
}

/// Looks a variant up by name.
pub fn variant_by_name(name: &str) -> Result<VariantFlags> {
    Ok(variant_of(name.parse()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Domain used by the single-domain regime.
    pub domain: Domain,
    pub resolution: usize,
    pub z_dim: usize,
    pub base_channels: usize,
    pub classifier_width: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    pub optimizer: OptimizerKind,
    pub generator_loss: GeneratorLoss,
    pub variant: VariantFlags,
    /// Coupled regime: generator / discriminator blocks to tie. `None`
    /// uses the default split.
    pub gen_tie: Option<Vec<String>>,
    pub disc_tie: Option<Vec<String>>,
    pub seed: u64,
    /// Iterations between checkpoints and sample grids; 0 means once per
    /// epoch. The last iteration always checkpoints.
    pub checkpoint_every: u64,
    pub keep_last: usize,
    pub sample_count: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Single,
            domain: Domain::S,
            resolution: 64,
            z_dim: DEFAULT_Z_DIM,
            base_channels: DEFAULT_BASE_CHANNELS,
            classifier_width: DEFAULT_CLASSIFIER_WIDTH,
            batch_size: 64,
            learning_rate: 2e-4,
            iterations: 1000,
            optimizer: OptimizerKind::Adam {
                beta1: 0.5,
                beta2: 0.999,
            },
            generator_loss: GeneratorLoss::NonSaturating,
            variant: variant_of(Variant::FullDomainAdaptation),
            gen_tie: None,
            disc_tie: None,
            seed: 0,
            checkpoint_every: 0,
            keep_last: 5,
            sample_count: 64,
            deterministic: true,
        }
    }
}

/// Every config key, in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "regime",
    "domain",
    "resolution",
    "z_dim",
    "base_channels",
    "classifier_width",
    "batch_size",
    "learning_rate",
    "iterations",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "generator_loss",
    "train_classifier_real",
    "train_classifier_fake",
    "lazy_fake_start_iteration",
    "gen_tie",
    "disc_tie",
    "seed",
    "checkpoint_every",
    "keep_last",
    "sample_count",
    "deterministic",
];

fn tie_to_string(t: &Option<Vec<String>>) -> String {
    match t {
        None => "default".into(),
        Some(v) if v.is_empty() => "none".into(),
        Some(v) => v.join(","),
    }
}

fn tie_from_str(s: &str) -> Option<Vec<String>> {
    match s {
        "default" => None,
        "none" => Some(Vec::new()),
        _ => Some(s.split(',').map(|b| b.trim().to_string()).collect()),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.sample_count == 0 || self.sample_count > 256 {
            return Err(Error::Config("sample_count must be in 1..=256".into()));
        }
        if let OptimizerKind::Adam { beta1, beta2 } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::Config("adam betas must be in [0, 1)".into()));
            }
        }
        self.arch()?;
        Ok(())
    }

    pub fn arch(&self) -> Result<Arch> {
        let generator = GeneratorSpec::new(self.z_dim, self.resolution).with_base_channels(self.base_channels);
        let discriminator = DiscriminatorSpec::new(self.resolution).with_base_channels(self.base_channels);
        // Validates the ladder.
        generator.net()?;
        discriminator.net()?;
        Ok(match self.regime {
            Regime::Single | Regime::Combined => Arch::Gan {
                generator,
                discriminator,
            },
            Regime::Cogan => {
                let mut spec = CoupledSpec::symmetric(generator, discriminator)?;
                if let Some(t) = &self.gen_tie {
                    spec.gen_tie = t.clone();
                }
                if let Some(t) = &self.disc_tie {
                    spec.disc_tie = t.clone();
                }
                for (blocks, known) in [
                    (&spec.gen_tie, spec.gen_s.blocks()?),
                    (&spec.disc_tie, spec.disc_s.blocks()?),
                ] {
                    if let Some(b) = blocks.iter().find(|b| !known.contains(b)) {
                        return Err(Error::Config(format!("unknown block {b:?} in tie list (have {known:?})")));
                    }
                }
                Arch::Coupled(spec)
            }
            Regime::Dann => Arch::Dann(DannSpec {
                gen_s: generator.clone(),
                gen_l: generator,
                trunk: discriminator,
                classifier_width: self.classifier_width,
            }),
        })
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("regime", self.regime);
        m.set("domain", self.domain);
        m.set("resolution", self.resolution);
        m.set("z_dim", self.z_dim);
        m.set("base_channels", self.base_channels);
        m.set("classifier_width", self.classifier_width);
        m.set("batch_size", self.batch_size);
        m.set("learning_rate", self.learning_rate);
        m.set("iterations", self.iterations);
        m.set("optimizer", self.optimizer);
        let (b1, b2) = match self.optimizer {
            OptimizerKind::Adam { beta1, beta2 } => (beta1, beta2),
            OptimizerKind::Sgd => (0.5, 0.999),
        };
        m.set("adam_beta1", b1);
        m.set("adam_beta2", b2);
        m.set("generator_loss", self.generator_loss);
        m.set("train_classifier_real", self.variant.train_classifier_real);
        m.set("train_classifier_fake", self.variant.train_classifier_fake);
        m.set("lazy_fake_start_iteration", self.variant.lazy_fake_start);
        m.set("gen_tie", tie_to_string(&self.gen_tie));
        m.set("disc_tie", tie_to_string(&self.disc_tie));
        m.set("seed", self.seed);
        m.set("checkpoint_every", self.checkpoint_every);
        m.set("keep_last", self.keep_last);
        m.set("sample_count", self.sample_count);
        m.set("deterministic", self.deterministic);
        m
    }

    /// Applies the keys present in `m` on top of `self`. Unknown keys are
    /// rejected.
    pub fn apply(&mut self, m: &KvMap) -> Result<()> {
        if let Some(k) = m.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let c = self;
        c.regime = m.parse_or("regime", c.regime)?;
        c.domain = m.parse_or("domain", c.domain)?;
        c.resolution = m.parse_or("resolution", c.resolution)?;
        c.z_dim = m.parse_or("z_dim", c.z_dim)?;
        c.base_channels = m.parse_or("base_channels", c.base_channels)?;
        c.classifier_width = m.parse_or("classifier_width", c.classifier_width)?;
        c.batch_size = m.parse_or("batch_size", c.batch_size)?;
        c.learning_rate = m.parse_or("learning_rate", c.learning_rate)?;
        c.iterations = m.parse_or("iterations", c.iterations)?;
        let (mut b1, mut b2) = match c.optimizer {
            OptimizerKind::Adam { beta1, beta2 } => (beta1, beta2),
            OptimizerKind::Sgd => (0.5, 0.999),
        };
        b1 = m.parse_or("adam_beta1", b1)?;
        b2 = m.parse_or("adam_beta2", b2)?;
        let kind = m.get("optimizer").unwrap_or(match c.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        });
        c.optimizer = match kind {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam { beta1: b1, beta2: b2 },
            other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
        };
        c.generator_loss = m.parse_or("generator_loss", c.generator_loss)?;
        c.variant.train_classifier_real = m.parse_or("train_classifier_real", c.variant.train_classifier_real)?;
        c.variant.train_classifier_fake = m.parse_or("train_classifier_fake", c.variant.train_classifier_fake)?;
        c.variant.lazy_fake_start = m.parse_or("lazy_fake_start_iteration", c.variant.lazy_fake_start)?;
        if let Some(t) = m.get("gen_tie") {
            c.gen_tie = tie_from_str(t);
        }
        if let Some(t) = m.get("disc_tie") {
            c.disc_tie = tie_from_str(t);
        }
        c.seed = m.parse_or("seed", c.seed)?;
        c.checkpoint_every = m.parse_or("checkpoint_every", c.checkpoint_every)?;
        c.keep_last = m.parse_or("keep_last", c.keep_last)?;
        c.sample_count = m.parse_or("sample_count", c.sample_count)?;
        c.deterministic = m.parse_or("deterministic", c.deterministic)?;
        Ok(())
    }

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        c.apply(m)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_triples() {
        let t = |v| variant_of(v).triple(37);
        assert_eq!(t(Variant::FullDomainAdaptation), (true, true, 0));
        assert_eq!(t(Variant::NoClassifierTraining), (false, false, 0));
        assert_eq!(t(Variant::NoFakeClassifierTraining), (true, false, 0));
        assert_eq!(t(Variant::NoRealClassifierTraining), (false, true, 0));
        assert_eq!(t(Variant::LazyFakeClassifierTraining), (true, true, 37));
        assert!(variant_by_name("SomethingElse").is_err());
        assert_eq!(variant_by_name("NoClassifierTraining").unwrap().triple(1), (false, false, 0));
    }

    #[test]
    fn kv_round_trip_preserves_every_field() {
        let c = TrainConfig {
            regime: Regime::Cogan,
            domain: Domain::L,
            resolution: 16,
            z_dim: 8,
            base_channels: 4,
            learning_rate: 1.5e-3,
            optimizer: OptimizerKind::Sgd,
            generator_loss: GeneratorLoss::Saturating,
            gen_tie: Some(vec!["seed".into()]),
            disc_tie: Some(vec![]),
            variant: VariantFlags {
                train_classifier_real: false,
                train_classifier_fake: true,
                lazy_fake_start: LazyStart::Epoch,
            },
            ..TrainConfig::default()
        };
        let text = c.to_kv().render();
        let back = TrainConfig::from_kv(&KvMap::parse(&text).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_kv().len(), CONFIG_KEYS.len());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_kv(&KvMap::parse("colour=red").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvMap::parse("batch_size=1").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvMap::parse("resolution=100").unwrap()).is_err());
        assert!(TrainConfig::from_kv(&KvMap::parse("regime=cogan\nresolution=16\ngen_tie=up9").unwrap()).is_err());
    }
}
