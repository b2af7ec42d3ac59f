//! Network specifications, parameterised networks, reference builders and
//! checkpoint persistence.

mod builders;
mod checkpoint;
mod network;
mod spec;

pub use builders::{build_dcgan_pair, build_lenet_split, lenet_classifier_spec, lenet_extractor_spec, SplitModel};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{BoundParams, ForwardCtx, Network, RunningStats};
pub use spec::{specs_hash, LayerSpec, NetworkSpec, ParamInfo, ParamInit, ParamSlot};
