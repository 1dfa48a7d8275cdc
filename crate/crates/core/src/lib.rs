//! FlexLoG: flexible guidance and a local grasp model for 6-DoF grasp
//! detection from depth scenes.

pub mod cloud;
pub mod datagen;
pub mod eval;
pub mod geometry;
pub mod guidance;
pub mod model;
pub mod pipeline;
pub mod postproc;
pub mod scene;
pub mod shapes;
