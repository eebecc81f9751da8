//! Generators, discriminators, the shared-trunk domain-adaptation model,
//! coupled weight tying, and gradient reversal.

pub mod arch;
pub mod grl;
pub mod layers;
pub mod model;
pub mod params;

pub use arch::{
    block_params, build_coupled, build_dann, build_discriminator, build_generator,
    classifier_net, derive_seed, realness_head_net, CoupledSpec, DannParams, DannSpec,
    DiscriminatorSpec, GeneratorSpec, ToySpec,
};
pub use grl::{gradient_reversal, GradientReversal};
pub use layers::{set_parallel, Forward, Layer, Mode, Net};
pub use model::{role, Arch, BoundNet, DannOutputs, Model};
pub use params::{
    tie_parameters, Binding, CoupledParams, Grads, NetworkParams, ParamSet, ParamView,
};
