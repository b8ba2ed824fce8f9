//! MoHD attention and FFN, grouped fusion, the residual block, the dense
//! baseline block and parameter accounting.

mod block;
mod count;
mod fusion;
mod params;
mod sparse;

pub use block::{
    attention, ffn, forced_route, route, AttnIds, AttnOut, Block, BlockIds, BlockRecord, BlockSpec, FfnIds, FfnOut,
    RouteRecord, RouteSpec, Routed, RouterIds,
};
pub use count::{count_params, ParamCount};
pub use fusion::FusionParams;
pub use params::{Bound, ParamId, ParamKind, ParamStore};
pub use sparse::{mohd_project_in, mohd_project_out, scatter_scale_fuse};
