//! The three-branch network: shared backbone, BLSTM part branch, global
//! identification branch and the pooled ranking descriptor.

mod backbone;
mod config;
mod features;
mod global;
mod network;
mod part;

pub use backbone::{Backbone, ConvBackbone, ConvBackboneCache};
pub use config::{Branches, ModelConfig};
pub use features::{
    global_average_pool_backward, row_average_pool_backward, FeatureMap, PartSequence,
};
pub use global::GlobalBranch;
pub use network::{DeepPerson, Descriptor, ForwardCache, HeadCache, ModelOutputs, OutputGrads};
pub use part::{PartBranch, PartCache, PartEncoder};
