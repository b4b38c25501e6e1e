//! Dense linear algebra and deterministic randomness used by every other
//! module.

mod matrix;
mod rng;

pub use matrix::{
    dirichlet, dot, matmul, norm, orthonormal_rows, outer_accumulate, solve_spd, Matrix,
    SpdSolution,
};
pub use rng::Rng;
