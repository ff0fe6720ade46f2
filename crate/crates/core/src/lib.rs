//! Bird's-eye-view semantic mapping from multiple monocular cameras.

pub mod autodiff;
pub mod bevgrid;
pub mod cli;
pub mod geometry;
pub mod synthworld;
pub mod metrics;
pub mod model;
pub mod losses;
pub mod trainer;
