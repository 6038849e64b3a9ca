//! File codecs: PFM float maps, PLY point clouds, PNG masks.

pub mod pfm;
pub mod ply;
pub mod png;
