//! Network specifications and the DCGAN-style layer ladders they expand to.
//!
//! Generators start from a 4x4 seed map and double the resolution in every
//! upsampling block (fractional-strided convolution, batch norm, ReLU),
//! ending in a convolution with tanh. Discriminators mirror them with
//! strided convolutions, batch norm and LeakyReLU (no batch norm on the
//! first block), flatten to the penultimate feature vector, and score
//! realness with a sigmoid unit.

use super::layers::{Layer, Net};
use super::params::{tie_parameters, CoupledParams, NetworkParams, ParamSet};
use crate::error::{Error, Result};

pub const DEFAULT_Z_DIM: usize = 1024;
pub const DEFAULT_BASE_CHANNELS: usize = 128;
pub const DEFAULT_CLASSIFIER_WIDTH: usize = 128;
/// Domain classes (S, L).
pub const DOMAIN_CLASSES: usize = 2;

/// Number of 2x resampling blocks between a 4x4 map and `resolution`.
pub fn ladder_depth(resolution: usize) -> Result<usize> {
    if resolution < 8 || resolution % 4 != 0 || !(resolution / 4).is_power_of_two() {
        return Err(Error::Spec(format!(
            "resolution {resolution} is not a power-of-two multiple of 4 (at least 8)"
        )));
    }
    Ok((resolution / 4).trailing_zeros() as usize)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub z_dim: usize,
    pub resolution: usize,
    pub base_channels: usize,
}

impl GeneratorSpec {
    pub fn new(z_dim: usize, resolution: usize) -> Self {
        Self {
            z_dim,
            resolution,
            base_channels: DEFAULT_BASE_CHANNELS,
        }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn upsampling_blocks(&self) -> Result<usize> {
        ladder_depth(self.resolution)
    }

    /// Block names in order: `seed`, `up1` .. `up{n-1}`, `out`.
    pub fn blocks(&self) -> Result<Vec<String>> {
        let n = self.upsampling_blocks()?;
        let mut b = vec!["seed".to_string()];
        b.extend((1..n).map(|i| format!("up{i}")));
        b.push("out".to_string());
        Ok(b)
    }

    pub fn net(&self) -> Result<Net> {
        let n = self.upsampling_blocks()?;
        if self.z_dim == 0 || self.base_channels == 0 {
            return Err(Error::Spec("z_dim and base_channels must be positive".into()));
        }
        let ch = |i: usize| self.base_channels << (n - 1 - i);
        let c0 = ch(0);
        let mut layers = vec![
            Layer::Linear {
                name: "seed".into(),
                inputs: self.z_dim,
                outputs: c0 * 16,
                bias: false,
            },
            Layer::Reshape {
                shape: vec![c0, 4, 4],
            },
            Layer::BatchNorm {
                name: "seed.bn".into(),
                channels: c0,
            },
            Layer::Relu,
        ];
        let mut marks = vec![("seed".to_string(), layers.len())];
        let mut size = 4;
        for i in 1..n {
            let name = format!("up{i}");
            layers.push(Layer::ConvT {
                name: name.clone(),
                in_ch: ch(i - 1),
                out_ch: ch(i),
                in_size: size,
                bias: false,
            });
            layers.push(Layer::BatchNorm {
                name: format!("{name}.bn"),
                channels: ch(i),
            });
            layers.push(Layer::Relu);
            size *= 2;
            marks.push((name, layers.len()));
        }
        layers.push(Layer::ConvT {
            name: "out".into(),
            in_ch: ch(n - 1),
            out_ch: 3,
            in_size: size,
            bias: true,
        });
        layers.push(Layer::Tanh);
        marks.push(("out".to_string(), layers.len()));
        let mut net = Net::new(vec![self.z_dim], layers)?;
        for (m, at) in marks {
            net = net.with_mark(&m, at);
        }
        Ok(net)
    }

    /// Every generator block except the final two.
    pub fn default_tie_blocks(&self) -> Result<Vec<String>> {
        let blocks = self.blocks()?;
        let keep = blocks.len().saturating_sub(2);
        Ok(blocks[..keep].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorSpec {
    pub resolution: usize,
    pub base_channels: usize,
}

impl DiscriminatorSpec {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            base_channels: DEFAULT_BASE_CHANNELS,
        }
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.base_channels = base;
        self
    }

    pub fn downsampling_blocks(&self) -> Result<usize> {
        ladder_depth(self.resolution)
    }

    /// Width of the penultimate (flattened trunk) feature vector.
    pub fn feature_width(&self) -> Result<usize> {
        let n = self.downsampling_blocks()?;
        Ok((self.base_channels << (n - 1)) * 16)
    }

    /// Convolution blocks `down1` .. `down{n}` followed by `head`.
    pub fn blocks(&self) -> Result<Vec<String>> {
        let n = self.downsampling_blocks()?;
        let mut b: Vec<String> = (1..=n).map(|i| format!("down{i}")).collect();
        b.push("head".into());
        Ok(b)
    }

    /// The convolutional stack up to the flattened penultimate features.
    pub fn trunk_layers(&self) -> Result<Vec<Layer>> {
        let n = self.downsampling_blocks()?;
        if self.base_channels == 0 {
            return Err(Error::Spec("base_channels must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut size = self.resolution;
        let mut in_ch = 3;
        for i in 1..=n {
            let out_ch = self.base_channels << (i - 1);
            let name = format!("down{i}");
            layers.push(Layer::Conv {
                name: name.clone(),
                in_ch,
                out_ch,
                in_size: size,
                bias: i == 1,
            });
            if i > 1 {
                layers.push(Layer::BatchNorm {
                    name: format!("{name}.bn"),
                    channels: out_ch,
                });
            }
            layers.push(Layer::LeakyRelu);
            in_ch = out_ch;
            size /= 2;
        }
        layers.push(Layer::Reshape {
            shape: vec![self.feature_width()?],
        });
        Ok(layers)
    }

    pub fn trunk_net(&self) -> Result<Net> {
        let layers = self.trunk_layers()?;
        let len = layers.len();
        Ok(Net::new(vec![3, self.resolution, self.resolution], layers)?.with_mark("penultimate", len))
    }

    /// Trunk plus realness head; marks `penultimate` and `realness`.
    pub fn net(&self) -> Result<Net> {
        let mut layers = self.trunk_layers()?;
        let features = layers.len();
        layers.extend(realness_head_layers(self.feature_width()?));
        let len = layers.len();
        Ok(Net::new(vec![3, self.resolution, self.resolution], layers)?
            .with_mark("penultimate", features)
            .with_mark("realness", len))
    }

    /// The last convolution block plus the realness head.
    pub fn default_tie_blocks(&self) -> Result<Vec<String>> {
        let blocks = self.blocks()?;
        Ok(blocks[blocks.len() - 2..].to_vec())
    }
}

fn realness_head_layers(features: usize) -> Vec<Layer> {
    vec![
        Layer::Linear {
            name: "head".into(),
            inputs: features,
            outputs: 1,
            bias: true,
        },
        Layer::Sigmoid,
    ]
}

pub fn realness_head_net(features: usize) -> Result<Net> {
    Net::new(vec![features], realness_head_layers(features))
}

/// Domain classifier on trunk features: hidden layer of `width` (the
/// classifier's penultimate features) then two-way logits.
pub fn classifier_net(features: usize, width: usize) -> Result<Net> {
    if width == 0 {
        return Err(Error::Spec("classifier width must be positive".into()));
    }
    Ok(Net::new(
        vec![features],
        vec![
            Layer::Linear {
                name: "hidden".into(),
                inputs: features,
                outputs: width,
                bias: true,
            },
            Layer::LeakyRelu,
            Layer::Linear {
                name: "out".into(),
                inputs: width,
                outputs: DOMAIN_CLASSES,
                bias: true,
            },
        ],
    )?
    .with_mark("penultimate", 2))
}

/// Expands block names to the parameter names that live in them.
pub fn block_params(net: &Net, blocks: &[String]) -> Vec<String> {
    net.param_decls()
        .into_iter()
        .map(|d| d.name)
        .filter(|n| {
            let block = n.split('.').next().unwrap_or("");
            blocks.iter().any(|b| b == block)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoupledSpec {
    pub gen_s: GeneratorSpec,
    pub gen_l: GeneratorSpec,
    /// Generator blocks that share storage across domains.
    pub gen_tie: Vec<String>,
    pub disc_s: DiscriminatorSpec,
    pub disc_l: DiscriminatorSpec,
    pub disc_tie: Vec<String>,
}

impl CoupledSpec {
    /// Identical towers per domain with the default tie lists.
    pub fn symmetric(generator: GeneratorSpec, discriminator: DiscriminatorSpec) -> Result<Self> {
        Ok(Self {
            gen_tie: generator.default_tie_blocks()?,
            disc_tie: discriminator.default_tie_blocks()?,
            gen_s: generator.clone(),
            gen_l: generator,
            disc_s: discriminator.clone(),
            disc_l: discriminator,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DannSpec {
    pub gen_s: GeneratorSpec,
    pub gen_l: GeneratorSpec,
    /// Shared discriminator trunk.
    pub trunk: DiscriminatorSpec,
    /// Classifier penultimate width.
    pub classifier_width: usize,
}

/// Two-layer MLPs for the 2-D toy regime.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToySpec {
    pub z_dim: usize,
    pub hidden: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self { z_dim: 2, hidden: 128 }
    }
}

impl ToySpec {
    pub fn generator_net(&self) -> Result<Net> {
        let h = self.hidden;
        Net::new(
            vec![self.z_dim],
            vec![
                Layer::Linear { name: "l1".into(), inputs: self.z_dim, outputs: h, bias: true },
                Layer::Relu,
                Layer::Linear { name: "l2".into(), inputs: h, outputs: h, bias: true },
                Layer::Relu,
                Layer::Linear { name: "l3".into(), inputs: h, outputs: 2, bias: true },
            ],
        )
    }

    pub fn discriminator_net(&self) -> Result<Net> {
        let h = self.hidden;
        Net::new(
            vec![2],
            vec![
                Layer::Linear { name: "l1".into(), inputs: 2, outputs: h, bias: true },
                Layer::LeakyRelu,
                Layer::Linear { name: "l2".into(), inputs: h, outputs: h, bias: true },
                Layer::LeakyRelu,
                Layer::Linear { name: "l3".into(), inputs: h, outputs: 1, bias: true },
                Layer::Sigmoid,
            ],
        )
    }
}

fn build(net: &Net, seed: u64) -> NetworkParams {
    NetworkParams {
        params: ParamSet::from_decls(&net.param_decls(), seed),
        seed,
    }
}

/// Gaussian(0, 0.02) convolution and linear weights, zero biases, unit
/// batch-norm scale.
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<NetworkParams> {
    Ok(build(&spec.net()?, seed))
}

pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<NetworkParams> {
    Ok(build(&spec.net()?, seed))
}

/// Parameter groups of a domain-adaptation model, each with local names.
#[derive(Clone, Debug, PartialEq)]
pub struct DannParams {
    pub gen_s: NetworkParams,
    pub gen_l: NetworkParams,
    /// θ_a, the shared trunk.
    pub trunk: NetworkParams,
    /// θ_f, the realness head.
    pub realness: NetworkParams,
    /// θ_c, the domain-classifier head.
    pub classifier: NetworkParams,
}

pub fn build_dann(spec: &DannSpec, seed: u64) -> Result<DannParams> {
    let f = spec.trunk.feature_width()?;
    Ok(DannParams {
        gen_s: build(&spec.gen_s.net()?, derive_seed(seed, 0)),
        gen_l: build(&spec.gen_l.net()?, derive_seed(seed, 1)),
        trunk: build(&spec.trunk.trunk_net()?, derive_seed(seed, 2)),
        realness: build(&realness_head_net(f)?, derive_seed(seed, 3)),
        classifier: build(&classifier_net(f, spec.classifier_width)?, derive_seed(seed, 4)),
    })
}

/// Both coupled generators and discriminators with their tie lists applied.
pub fn build_coupled(spec: &CoupledSpec, seed: u64) -> Result<(CoupledParams, CoupledParams)> {
    let gs = build(&spec.gen_s.net()?, derive_seed(seed, 0));
    let gl = build(&spec.gen_l.net()?, derive_seed(seed, 1));
    let ds = build(&spec.disc_s.net()?, derive_seed(seed, 2));
    let dl = build(&spec.disc_l.net()?, derive_seed(seed, 3));
    let g_tie = block_params(&spec.gen_s.net()?, &spec.gen_tie);
    let d_tie = block_params(&spec.disc_s.net()?, &spec.disc_tie);
    Ok((
        tie_parameters(&gs, &gl, &g_tie, ["gs", "gl", "g_tied"])?,
        tie_parameters(&ds, &dl, &d_tie, ["ds", "dl", "d_tied"])?,
    ))
}

/// Independent sub-seed `k` of `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_depths() {
        assert_eq!(ladder_depth(16).unwrap(), 2);
        assert_eq!(ladder_depth(64).unwrap(), 4);
        assert_eq!(ladder_depth(256).unwrap(), 6);
        for bad in [0, 4, 12, 48, 100] {
            assert!(ladder_depth(bad).is_err(), "{bad}");
        }
        assert!(build_generator(&GeneratorSpec::new(8, 96), 0).is_err());
    }

    #[test]
    fn block_counts_satisfy_ladder_identity() {
        for res in [16, 64, 128, 256] {
            let g = GeneratorSpec::new(8, res).with_base_channels(2);
            let d = DiscriminatorSpec::new(res).with_base_channels(2);
            let up = g.upsampling_blocks().unwrap();
            let down = d.downsampling_blocks().unwrap();
            assert_eq!(4 << up, res);
            assert_eq!(up, down);
            assert_eq!(g.net().unwrap().output_shape(), vec![3, res, res]);
            // One 4x4 fractional-strided convolution per upsampling block.
            let convts = g
                .net()
                .unwrap()
                .layers
                .iter()
                .filter(|l| matches!(l, Layer::ConvT { .. }))
                .count();
            assert_eq!(convts, up);
        }
    }

    #[test]
    fn canonical_ladder_channels_at_64() {
        let g = GeneratorSpec::new(DEFAULT_Z_DIM, 64);
        assert_eq!(g.blocks().unwrap(), ["seed", "up1", "up2", "up3", "out"]);
        let net = g.net().unwrap();
        let widths: Vec<usize> = net
            .layers
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { channels, .. } => Some(*channels),
                _ => None,
            })
            .collect();
        assert_eq!(widths, [1024, 512, 256, 128]);
        assert_eq!(g.default_tie_blocks().unwrap(), ["seed", "up1", "up2"]);
        let d = DiscriminatorSpec::new(64);
        assert_eq!(d.feature_width().unwrap(), 1024 * 16);
        assert_eq!(d.default_tie_blocks().unwrap(), ["down4", "head"]);
    }

    #[test]
    fn coupled_tie_lists_alias_expected_blocks() {
        let spec = CoupledSpec::symmetric(
            GeneratorSpec::new(4, 16).with_base_channels(2),
            DiscriminatorSpec::new(16).with_base_channels(2),
        )
        .unwrap();
        let (g, d) = build_coupled(&spec, 1).unwrap();
        assert_eq!(g.view_a["seed.w"], g.view_b["seed.w"]);
        assert_eq!(g.view_a["seed.bn.mean"], g.view_b["seed.bn.mean"]);
        assert_ne!(g.view_a["out.w"], g.view_b["out.w"]);
        assert_eq!(d.view_a["head.w"], d.view_b["head.w"]);
        assert_eq!(d.view_a["down2.w"], d.view_b["down2.w"]);
        assert_ne!(d.view_a["down1.w"], d.view_b["down1.w"]);
    }

    #[test]
    fn dann_groups_have_disjoint_names() {
        let spec = DannSpec {
            gen_s: GeneratorSpec::new(4, 16).with_base_channels(2),
            gen_l: GeneratorSpec::new(4, 16).with_base_channels(2),
            trunk: DiscriminatorSpec::new(16).with_base_channels(2),
            classifier_width: 5,
        };
        let p = build_dann(&spec, 0).unwrap();
        let trunk: Vec<&String> = p.trunk.params.names().iter().collect();
        for other in [&p.realness, &p.classifier] {
            for n in other.params.names() {
                assert!(!trunk.contains(&n));
            }
        }
        assert!(p.realness.params.names().iter().all(|n| n.starts_with("head.")));
    }

    #[test]
    fn same_seed_same_parameters() {
        let d = DiscriminatorSpec::new(16).with_base_channels(4);
        assert_eq!(build_discriminator(&d, 7).unwrap(), build_discriminator(&d, 7).unwrap());
        assert_ne!(build_discriminator(&d, 7).unwrap(), build_discriminator(&d, 8).unwrap());
    }
}
