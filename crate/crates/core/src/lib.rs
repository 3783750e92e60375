//! Learning optimal transport maps between sampled planar distributions with
//! small neural networks.
//!
//! Four strategy families are provided, each training a map network that
//! starts at the identity:
//!
//! * [`flow`]: gradient flows on feature-matching or nearest-neighbour
//!   Lagrangians, optionally regularised by the transport cost;
//! * [`adversarial`]: a min-max game between the map and a critic;
//! * [`dual`]: stochastic optimisation of the entropic or L2 regularised dual
//!   with potential networks, followed by a barycentric map fit;
//! * [`supervised`]: per-batch Sinkhorn solutions used as regression labels.
//!
//! [`eval`] measures every run against a fixed Sinkhorn ground truth and
//! [`runner`] ties it together behind a named experiment registry.

pub mod adversarial;
pub mod dual;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod sinkhorn;
pub mod supervised;
#[doc(hidden)]
pub mod testing;
pub mod train;

pub use error::{Error, Result};
