//! Anti-forensic image inpainting: a two-stage generator with region-wise
//! separated attention and a domain-distance objective, alongside classical
//! diffusion and exemplar inpainting and the statistical probes used to score
//! how detectable each fill is.

pub mod autograd;
pub mod classical;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod losses;
pub mod masks;
pub mod models;
pub mod nn;
pub mod probes;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
pub use masks::{Mask, MaskBucket};
pub use raster::{Heatmap, Image};
