//! Fire-module backbone, pooling heads and exit branches.

mod graph;
mod network;
mod params;
mod spec;

pub use graph::{BnUpdate, EagerGraph, Graph, TapeGraph};
pub use network::{build_network, conv_bn_relu, fire_forward, head_forward, ForwardPlan, HeadRequest, Network};
pub use params::{declare, declare_conv, declare_fire, declare_head, scope_of, Param, ParamDecl, ParamKind, Parameters, BACKBONE};
pub use spec::{
    BranchSpec, FeatureShape, FireSpec, HeadKind, HeadSpec, LayerSpec, NetworkSpec, FINAL_HEAD, MID_A, MID_B,
};
