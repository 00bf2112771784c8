//! Gated multi-objective reward for spatially grounded VQA responses, the
//! group-relative policy optimization loss, and the scene-graph dataset
//! pipeline that feeds them.

pub mod assignment;
pub mod dataset;
pub mod geometry;
pub mod grpo;
pub mod harness;
pub mod matcher;
pub mod response;
pub mod reward;
pub mod scene_graph;
pub mod text;
