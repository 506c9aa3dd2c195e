//! Text-guided signed-distance field optimization, mesh extraction and
//! multi-view texture refinement.

pub mod diffengine;
pub mod field;
pub mod guidance;
pub mod image;
pub mod meshing;
pub mod optim;
pub mod render;
pub mod sds;
pub mod pipeline;
pub mod retexture;
pub mod texrast;
