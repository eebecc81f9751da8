//! A whole regime's networks over one parameter store.

use indexmap::IndexMap;

use super::arch::{
    build_coupled, build_dann, classifier_net, derive_seed, realness_head_net, CoupledSpec,
    DannSpec, DiscriminatorSpec, GeneratorSpec, ToySpec,
};
use super::layers::{Forward, Mode, Net};
use super::params::{Binding, Grads, NetworkParams, ParamSet, ParamView};
use crate::corpus::Domain;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named outputs of the domain-adaptation discriminator for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DannOutputs<T> {
    /// Realness probability per image, `(b,)`.
    pub realness: Tensor<T>,
    /// Domain logits, `(b, 2)`.
    pub logits: Tensor<T>,
    /// Trunk features, `(b, F)`.
    pub features: Tensor<T>,
    /// Classifier penultimate features, `(b, C)`.
    pub classifier_features: Tensor<T>,
}

/// Which networks a model holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    /// One generator and one discriminator (single-domain and combined
    /// training).
    Gan {
        generator: GeneratorSpec,
        discriminator: DiscriminatorSpec,
    },
    Coupled(CoupledSpec),
    Dann(DannSpec),
    Toy(ToySpec),
}

impl Arch {
    pub fn z_dim(&self) -> usize {
        match self {
            Arch::Gan { generator, .. } => generator.z_dim,
            Arch::Coupled(c) => c.gen_s.z_dim,
            Arch::Dann(d) => d.gen_s.z_dim,
            Arch::Toy(t) => t.z_dim,
        }
    }

    /// Image side length; 0 for the toy regime.
    pub fn resolution(&self) -> usize {
        match self {
            Arch::Gan { generator, .. } => generator.resolution,
            Arch::Coupled(c) => c.gen_s.resolution,
            Arch::Dann(d) => d.gen_s.resolution,
            Arch::Toy(_) => 0,
        }
    }

    /// True when sampling needs a domain to pick a generator.
    pub fn per_domain(&self) -> bool {
        matches!(self, Arch::Coupled(_) | Arch::Dann(_))
    }
}

pub mod role {
    pub const G: &str = "g";
    pub const D: &str = "d";
    pub const GS: &str = "gs";
    pub const GL: &str = "gl";
    pub const DS: &str = "ds";
    pub const DL: &str = "dl";
    /// θ_a
    pub const TRUNK: &str = "a";
    /// θ_f
    pub const REALNESS: &str = "f";
    /// θ_c
    pub const CLASSIFIER: &str = "c";
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundNet {
    pub net: Net,
    pub binding: Binding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub arch: Arch,
    pub params: ParamSet<T>,
    nets: IndexMap<String, BoundNet>,
    groups: IndexMap<String, Vec<usize>>,
}

fn merge(
    params: &mut ParamSet<f32>,
    prefix: &str,
    src: &NetworkParams,
) -> Binding {
    let mut binding = Binding::new();
    for (slot, name) in src.params.names().iter().enumerate() {
        let s = params.push(
            format!("{prefix}.{name}"),
            src.params.get(slot).clone(),
            src.params.is_trainable(slot),
        );
        binding.insert(name.clone(), s);
    }
    binding
}

fn slots(binding: &Binding) -> Vec<usize> {
    let mut s: Vec<usize> = binding.values().copied().collect();
    s.sort_unstable();
    s.dedup();
    s
}

impl Model<f32> {
    /// Freshly initialized networks for `arch`.
    pub fn build(arch: Arch, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut nets = IndexMap::new();
        let mut groups = IndexMap::new();
        let mut add = |params: &mut ParamSet<f32>, role: &str, net: Net, seed: u64| {
            let np = NetworkParams {
                params: ParamSet::from_decls(&net.param_decls(), seed),
                seed,
            };
            let binding = merge(params, role, &np);
            groups.insert(role.to_string(), slots(&binding));
            nets.insert(role.to_string(), BoundNet { net, binding });
        };
        match &arch {
            Arch::Gan {
                generator,
                discriminator,
            } => {
                add(&mut params, role::G, generator.net()?, derive_seed(seed, 0));
                add(&mut params, role::D, discriminator.net()?, derive_seed(seed, 1));
            }
            Arch::Toy(spec) => {
                add(&mut params, role::G, spec.generator_net()?, derive_seed(seed, 0));
                add(&mut params, role::D, spec.discriminator_net()?, derive_seed(seed, 1));
            }
            Arch::Dann(spec) => {
                let built = build_dann(spec, seed)?;
                let f = spec.trunk.feature_width()?;
                let parts = [
                    (role::GS, spec.gen_s.net()?, &built.gen_s),
                    (role::GL, spec.gen_l.net()?, &built.gen_l),
                    (role::TRUNK, spec.trunk.trunk_net()?, &built.trunk),
                    (role::REALNESS, realness_head_net(f)?, &built.realness),
                    (
                        role::CLASSIFIER,
                        classifier_net(f, spec.classifier_width)?,
                        &built.classifier,
                    ),
                ];
                for (r, net, np) in parts {
                    let binding = merge(&mut params, r, np);
                    groups.insert(r.to_string(), slots(&binding));
                    nets.insert(r.to_string(), BoundNet { net, binding });
                }
            }
            Arch::Coupled(spec) => {
                let (g, d) = build_coupled(spec, seed)?;
                // Concatenate the two coupled stores, shifting the second.
                let offset = g.params.len();
                let mut merged = g.params.clone();
                for (slot, name) in d.params.names().iter().enumerate() {
                    merged.push(name.clone(), d.params.get(slot).clone(), d.params.is_trainable(slot));
                }
                params = merged;
                let shift = |b: &Binding| -> Binding { b.iter().map(|(k, v)| (k.clone(), v + offset)).collect() };
                let entries = [
                    (role::GS, spec.gen_s.net()?, g.view_a.clone()),
                    (role::GL, spec.gen_l.net()?, g.view_b.clone()),
                    (role::DS, spec.disc_s.net()?, shift(&d.view_a)),
                    (role::DL, spec.disc_l.net()?, shift(&d.view_b)),
                ];
                for (r, net, binding) in entries {
                    groups.insert(r.to_string(), slots(&binding));
                    nets.insert(r.to_string(), BoundNet { net, binding });
                }
            }
        }
        Ok(Self {
            arch,
            params,
            nets,
            groups,
        })
    }
}

impl<T: Real> Model<T> {
    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.nets.keys().map(String::as_str)
    }

    pub fn net(&self, role: &str) -> &BoundNet {
        self.nets
            .get(role)
            .unwrap_or_else(|| panic!("model has no {role} network"))
    }

    pub fn has(&self, role: &str) -> bool {
        self.nets.contains_key(role)
    }

    pub fn view(&self, role: &str) -> ParamView<'_, T> {
        ParamView::new(&self.params, &self.net(role).binding)
    }

    /// Slots read by the network in `role`.
    pub fn group(&self, role: &str) -> &[usize] {
        &self.groups[role]
    }

    /// Union of several groups, in slot order.
    pub fn union(&self, roles: &[&str]) -> Vec<usize> {
        let mut s: Vec<usize> = roles.iter().flat_map(|r| self.group(r).iter().copied()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn forward(&self, role: &str, x: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        let b = self.net(role);
        b.net.forward(ParamView::new(&self.params, &b.binding), x, mode)
    }

    pub fn backward(
        &self,
        role: &str,
        fwd: &Forward<T>,
        grad_out: Tensor<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let b = self.net(role);
        b.net.backward(
            ParamView::new(&self.params, &b.binding),
            fwd,
            grad_out,
            grads,
            need_input_grad,
        )
    }

    pub fn commit_running_stats(&mut self, role: &str, fwd: &Forward<T>) {
        let b = &self.nets[role];
        b.net.commit_running_stats(&mut self.params, &b.binding, fwd);
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
            nets: self.nets.clone(),
            groups: self.groups.clone(),
        }
    }

    /// Generator role for a domain.
    pub fn generator_role(&self, domain: Option<Domain>) -> Result<&'static str> {
        match (&self.arch, domain) {
            (Arch::Gan { .. } | Arch::Toy(_), _) => Ok(role::G),
            (Arch::Coupled(_) | Arch::Dann(_), Some(Domain::S)) => Ok(role::GS),
            (Arch::Coupled(_) | Arch::Dann(_), Some(Domain::L)) => Ok(role::GL),
            (_, None) => Err(Error::Invalid(
                "this model has one generator per domain; a domain is required".into(),
            )),
        }
    }

    /// Inference-mode generator output for a batch of z vectors.
    pub fn generate(&self, z: &Tensor<T>, domain: Option<Domain>) -> Result<Tensor<T>> {
        let role = self.generator_role(domain)?;
        let want = self.net(role).net.input_shape()[0];
        if z.shape().len() != 2 || z.shape()[1] != want {
            return Err(Error::Invalid(format!(
                "z batch shape {:?} does not match z_dim {want}",
                z.shape()
            )));
        }
        Ok(self.forward(role, z, Mode::Eval)?.into_output())
    }

    /// All four outputs of a domain-adaptation model on one batch.
    pub fn dann_outputs(&self, x: &Tensor<T>, mode: Mode) -> Result<DannOutputs<T>> {
        if !matches!(self.arch, Arch::Dann(_)) {
            return Err(Error::Invalid("only domain-adaptation models have a classifier".into()));
        }
        let a = self.forward(role::TRUNK, x, mode)?;
        let features = a.output().clone();
        let realness = self.forward(role::REALNESS, &features, mode)?.into_output();
        let c = self.forward(role::CLASSIFIER, &features, mode)?;
        let mark = self.net(role::CLASSIFIER).net.mark("penultimate").expect("classifier marks its penultimate layer");
        let m = features.batch();
        let width = c.acts[mark].item_len();
        let classifier_features = c.acts[mark].clone().reshape(&[m, width]);
        Ok(DannOutputs {
            realness: realness.reshape(&[m]),
            logits: c.into_output(),
            features,
            classifier_features,
        })
    }

    /// Binds the group of `role` to fresh zeroed gradients.
    pub fn grads_for(&self, roles: &[&str]) -> Grads<T> {
        Grads::new(&self.params, &self.union(roles))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_gan() -> Arch {
        Arch::Gan {
            generator: GeneratorSpec::new(8, 16).with_base_channels(4),
            discriminator: DiscriminatorSpec::new(16).with_base_channels(4),
        }
    }

    #[test]
    fn groups_cover_disjoint_slots_for_gan() {
        let m = Model::build(tiny_gan(), 0).unwrap();
        let g = m.group(role::G);
        let d = m.group(role::D);
        assert!(g.iter().all(|s| !d.contains(s)));
        assert_eq!(g.len() + d.len(), m.params.len());
        assert!(m.params.names().iter().all(|n| n.starts_with("g.") || n.starts_with("d.")));
    }

    #[test]
    fn coupled_model_shares_tied_slots() {
        let spec = CoupledSpec::symmetric(
            GeneratorSpec::new(8, 16).with_base_channels(4),
            DiscriminatorSpec::new(16).with_base_channels(4),
        )
        .unwrap();
        let m = Model::build(Arch::Coupled(spec), 3).unwrap();
        let gs = &m.net(role::GS).binding;
        let gl = &m.net(role::GL).binding;
        assert_eq!(gs["seed.w"], gl["seed.w"]);
        assert_ne!(gs["out.w"], gl["out.w"]);
        let ds = &m.net(role::DS).binding;
        let dl = &m.net(role::DL).binding;
        assert_eq!(ds["head.w"], dl["head.w"]);
        assert!(m.params.name(ds["head.w"]).starts_with("d_tied."));
    }

    fn tiny_dann() -> Model<f32> {
        let spec = DannSpec {
            gen_s: GeneratorSpec::new(8, 16).with_base_channels(4),
            gen_l: GeneratorSpec::new(8, 16).with_base_channels(4),
            trunk: DiscriminatorSpec::new(16).with_base_channels(4),
            classifier_width: 6,
        };
        Model::build(Arch::Dann(spec), 2).unwrap()
    }

    fn images(n: usize) -> Tensor<f32> {
        Tensor::from_vec(&[n, 3, 16, 16], (0..n * 768).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect())
    }

    fn perturb(m: &mut Model<f32>, role: &str, local: &str) {
        let slot = m.net(role).binding[local];
        m.params.get_mut(slot).data_mut().iter_mut().for_each(|v| *v += 0.05);
    }

    #[test]
    fn dann_outputs_have_declared_shapes() {
        let m = tiny_dann();
        let out = m.dann_outputs(&images(5), Mode::Train).unwrap();
        assert_eq!(out.realness.shape(), &[5]);
        assert_eq!(out.logits.shape(), &[5, 2]);
        assert_eq!(out.features.shape(), &[5, 128]);
        assert_eq!(out.classifier_features.shape(), &[5, 6]);
        assert!(out.realness.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(Model::build(tiny_gan(), 0).unwrap().dann_outputs(&images(2), Mode::Eval).is_err());
    }

    #[test]
    fn trunk_feeds_both_heads_and_classifier_only_the_logits() {
        let base = tiny_dann();
        let x = images(4);
        let before = base.dann_outputs(&x, Mode::Eval).unwrap();

        let mut m = base.clone();
        perturb(&mut m, role::TRUNK, "down1.w");
        let after = m.dann_outputs(&x, Mode::Eval).unwrap();
        assert_ne!(after.realness, before.realness);
        assert_ne!(after.logits, before.logits);

        let mut m = base.clone();
        perturb(&mut m, role::CLASSIFIER, "hidden.w");
        let after = m.dann_outputs(&x, Mode::Eval).unwrap();
        assert_eq!(after.realness, before.realness);
        assert_eq!(after.features, before.features);
        assert_ne!(after.logits, before.logits);
    }

    #[test]
    fn generate_checks_z_dim_and_domain() {
        let m = Model::build(tiny_gan(), 0).unwrap();
        assert!(m.generate(&Tensor::zeros(&[2, 7]), None).is_err());
        let out = m.generate(&Tensor::zeros(&[2, 8]), None).unwrap();
        assert_eq!(out.shape(), &[2, 3, 16, 16]);
    }
}
