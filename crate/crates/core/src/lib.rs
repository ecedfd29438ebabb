pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod grid;
pub mod heads;
pub mod map;
pub mod model;
pub mod nn;
pub mod pec;
pub mod render;
pub mod scene;
pub mod sgc;
pub mod tensor;
pub mod train;
