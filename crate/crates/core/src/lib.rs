//! Differentiable architecture search for skeleton-sequence action
//! classifiers.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`tape`]), the candidate operator zoo ([`ops`]), the relaxed search
//! network ([`supernet`]), the bilevel architecture optimizer
//! ([`bilevel`]), genotype derivation and the discrete network built from
//! it ([`genotype`], [`network`]), and skeleton data handling ([`data`]).

pub mod bilevel;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod shape;
pub mod supernet;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use ops::{OpKind, OpOptions, Session};
pub use params::{Group, ParamStore};
pub use real::Real;
pub use shape::Shape;
pub use tape::{Tape, Var};
