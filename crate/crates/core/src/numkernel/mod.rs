//! Dense linear algebra, elementary NN math, PCA and seeded randomness.

mod linalg;
mod matrix;
mod rng;

pub use linalg::{
    default_jitter, definiteness, inverse_spd, log_softmax, pca_top2, softmax, solve_general,
    solve_spd, sym_eigen, Cholesky, Definiteness, Pca2, SymEigen,
};
pub use matrix::{argmax, axpy, dot, max_abs_diff, mean, norm, std_dev, sub, Matrix};
pub use rng::RngState;
