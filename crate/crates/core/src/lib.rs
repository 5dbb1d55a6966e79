//! Writing-style trajectories of individual scholars, estimated from
//! co-authored bibliographic corpora.

pub mod attribution;
pub mod collab;
pub mod dynamics;
pub mod embedder;
pub mod gbt;
pub mod emergence;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod synth;
