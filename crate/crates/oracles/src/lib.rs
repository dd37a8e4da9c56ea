//! Slow, independent reference implementations for cross-checking invmark.
//!
//! Nothing here shares code with the library beyond reading checkpoints:
//! the binomial tail is exact rational arithmetic and the forward pass is a
//! straight-line loop nest over plain vectors.

pub mod binomial;
pub mod forward;
