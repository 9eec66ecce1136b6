//! Social recommendation with causally disentangled embeddings.
//!
//! The model encodes users and items from a rating graph and a trust graph,
//! splits each representation into an interest part and a social-influence
//! part trained toward mutual independence, and regulates — per user–item
//! pair — whether the social part participates in prediction, based on how
//! similar the candidate item is to the user's own history.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod disentangle;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod regulate;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
