//! Distributed Nash equilibrium seeking for monotone stochastic aggregative
//! games over time-varying networks.
//!
//! The crate is organised around the pieces of the simulator:
//!
//! * [`game`] holds the game model: strategy sets, proximal terms, player
//!   oracles and the concatenated gradient map.
//! * [`network`] generates doubly stochastic weight sequences and checks
//!   their mixing behaviour.
//! * [`schedules`] builds steplength / regularization / smoothing sequences
//!   and checks their admissibility.
//! * [`solver`] runs the regularized distributed scheme and its smoothed
//!   hierarchical extension.
//! * [`metrics`] evaluates gap functions, residuals and consensus errors.
//! * [`cournot`] generates networked Nash-Cournot benchmark instances.
//! * [`harness`] wires everything into reproducible replicated experiments.

pub mod cournot;
pub mod error;
pub mod game;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod schedules;
pub mod solver;

pub use error::{Error, Result};

/// Dense column vector used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
/// Dense matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;

/// Stack per-player blocks into one joint vector.
pub fn stack(blocks: &[Vector]) -> Vector {
    let total = blocks.iter().map(|b| b.len()).sum();
    let mut out = Vector::zeros(total);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.len()).copy_from(b);
        off += b.len();
    }
    out
}

/// Split a joint vector into blocks of the given sizes.
pub fn split(joint: &Vector, dims: &[usize]) -> Result<Vec<Vector>> {
    let total: usize = dims.iter().sum();
    if joint.len() != total {
        return Err(Error::Dimension(format!(
            "joint vector has length {} but blocks sum to {}",
            joint.len(),
            total
        )));
    }
    let mut off = 0;
    Ok(dims
        .iter()
        .map(|&d| {
            let b = joint.rows(off, d).into_owned();
            off += d;
            b
        })
        .collect())
}
