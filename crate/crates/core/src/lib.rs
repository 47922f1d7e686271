//! Floating-point semantics of randomized smoothing: attack classifiers that
//! fool the standard certification procedure, and a sound certification
//! pipeline that samples the discretized normal distribution exactly from
//! uniform integers.
//!
//! The crate is organized around six pieces:
//!
//! * [`minifloat`] — a bit-exact 8-bit float emulator (1/3/4 split) used to
//!   study rounding behavior exhaustively.
//! * [`attacks`] — reachability-predicate classifiers that exploit host
//!   floating-point rounding to produce false certificates.
//! * [`stats`] — normal quantiles and binomial confidence lower bounds.
//! * [`tables`] — arbitrary-precision construction of breaking-point tables
//!   for the discretized normal, with rigorous interval enclosures.
//! * [`sampler`] — exact sampling from the discretized normal by thresholding
//!   uniform integers against a breaking-point table.
//! * [`pipeline`] — end-to-end certification runners (standard and sound),
//!   dataset I/O and CSV emission.

pub mod attacks;
pub mod bigfx;
pub mod minifloat;
pub mod pipeline;
pub mod sampler;
pub mod stats;
pub mod tables;
