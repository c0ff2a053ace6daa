pub mod checkpoint;
pub mod engine;
pub mod grid;
pub mod hier_embedding;
pub mod model;
pub mod probe;
pub mod stats;
pub mod synth;
pub mod training;
pub mod trajectories;
