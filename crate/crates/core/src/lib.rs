//! Diffusion tensor estimation, DTI scalar maps, a 3D encoder-decoder CNN
//! for white-matter tract segmentation, and the evaluation and statistics
//! used to assess it.

pub mod dtimetrics;
pub mod eval;
pub mod io_util;
pub mod netbuilder;
pub mod nn3d;
pub mod stats;
pub mod synth;
pub mod tensorfit;
pub mod volume;
