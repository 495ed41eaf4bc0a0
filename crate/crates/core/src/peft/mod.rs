//! Tuning paradigms and the parameter registry they act on.

pub mod adapters;
pub mod highway;
pub mod hooks;
pub mod lowrank;
pub mod method;
pub mod model;
pub mod policy;
pub mod registry;

pub use adapters::{
    adaptformer_forward, e3va_adapter_forward, lora_linear_forward, standard_adapter_forward,
    AdaptFormerAdapter, DenseAdapter, E3vaAdapter, LoraParams,
};
pub use highway::{e3va_highway_step, highway_merge, stage_fuse, HighwayState};
pub use lowrank::{dual_lowrank_apply, DualLowRank};
pub use method::{FpnNormTraining, Fusion, MethodConfig, MethodName};
pub use model::{build_model, ForwardOutput, Inserted, Model};
pub use policy::apply_tuning_policy;
pub use registry::{Bound, Group, ParamEntry, ParamId, ParamRegistry, ParamRole, ParamStore, Site};
