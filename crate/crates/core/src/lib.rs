//! Second-order contrastive image/text alignment.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`numcore`]), the
//! Brownian distance covariance pooling heads ([`bdc`], [`mbdc`]), the
//! contrastive objective ([`objective`]), a synthetic paired dataset
//! ([`synthdata`]), a twin-tower trainer ([`twintower`]) and the
//! exponential data mixing law ([`mixlaw`]).

pub mod bdc;
pub mod counterparts;
pub mod error;
pub mod mbdc;
pub mod mixlaw;
pub mod numcore;
pub mod objective;
pub mod rng;
pub mod synthdata;
pub mod twintower;

pub use error::{Error, Result};
