//! Client/server realization of the split pipeline: a TCP service hosting
//! the classifier half and a synchronous client that extracts, reduces,
//! noises and transmits features.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{client_infer, client_infer_with_timeout, Inference, DEFAULT_TIMEOUT};
pub use server::{serve, ServerHandle};
