//! Mamba1/Mamba2 blocks: float reference and quantized forwards.

mod block;
mod conv;
mod quantized;
mod scan;
mod weights;

pub use block::{
    block_forward_float, block_forward_float_with, mamba1_projections, project_inputs, scan_shape,
    split_projection, NoHook, ProjectedInputs, ScanMode, Site, SiteHook, SsmState,
};
pub use conv::causal_conv1d;
pub use quantized::{block_forward_quantized, ActScales, Profile, QuantBlock, ACT_BITS};
pub use scan::{decay, discretize, selective_scan, ssd_chunked, ScanInputs, ScanShape};
pub use weights::{BlockDims, SsmBlockWeights, Variant, REWRITE_HADAMARD, REWRITE_REORDER};
