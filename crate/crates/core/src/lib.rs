pub mod annotation;
pub mod assignment;
pub mod container;
pub mod decoder;
pub mod disjoint_set;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
