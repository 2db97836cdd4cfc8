//! Point-based human-object interaction detection with relation reasoning.

pub mod geometry;
pub mod cpm;
pub mod decoder;
pub mod evaluator;
pub mod frame;
pub mod gradcheck;
pub mod iim;
pub mod loss;
pub mod netops;
pub mod par;
pub mod pipeline;
pub mod synthdata;
pub mod trainer;
