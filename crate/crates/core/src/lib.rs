//! Numerical laboratory for localised multilinear restriction estimates and
//! their Kakeya / Brascamp-Lieb counterparts.
//!
//! The crate is organised bottom-up: [`linalg`] holds the subspace toolkit,
//! [`bl`] the Brascamp-Lieb data and their finiteness tests, [`manifold`]
//! nested polynomial-graph families, [`extension`] the extension operator and
//! its slice decomposition, [`wavepacket`] covers and packet decompositions,
//! [`kakeya`] slab integrals, and [`harness`] the experiment runner.

pub mod bl;
pub mod bump;
pub mod catalog;
pub mod error;
pub mod extension;
pub mod harness;
pub mod kakeya;
pub mod linalg;
pub mod manifold;
pub mod poly;
pub mod quad;
pub mod wavepacket;

mod par;
mod rng;

pub use error::{Error, Result};
