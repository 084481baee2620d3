//! Tensor-demand routing environment.

mod instance;
mod state;

pub use instance::{mds_embedding, DemandKind, DemandSpec, DemandTensor, Instance, NodeSpec, TruckSpec};
pub use state::{myopic_dense, EnvState, MyopicVectors, OffKey, OnKey, RouteLogRow, TruckState, VOLUME_EPS};
