//! Selective state-space machinery: the scan kernels and the Mamba block.

mod block;
pub(crate) mod scan;

pub use block::{BiMamba, MambaBlock, MambaBlockConfig, MambaBlockParams, DT_INIT_RANGE};
pub use scan::{
    discretize, selective_scan_parallel, selective_scan_sequential, zoh_factor, SsmDiscretization, ZOH_LIMIT,
};
