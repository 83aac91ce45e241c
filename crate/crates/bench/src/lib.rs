//! Shared fixtures for the benchmarks.

use genrel_core::simgen::{SimDesign, SimModel};
use genrel_core::{PairedStudy, SigmaKind};

/// Block-Toeplitz Gaussian design with 25 active coordinates per trait.
pub fn block_design(n: usize, p: usize) -> SimDesign {
    SimDesign::gaussian(n, p, SigmaKind::BlockToeplitz { blocks: 10 })
}

/// One study drawn from `design` at `seed`.
pub fn study(design: &SimDesign, seed: u64) -> PairedStudy {
    SimModel::new(design).and_then(|m| m.sample(seed)).expect("valid design").0
}
