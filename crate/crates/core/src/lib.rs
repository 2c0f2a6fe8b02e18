pub mod artifact;
pub mod dynamics;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod pfm;
pub mod ptm;
pub mod skeleton;
pub mod synthgen;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;
