//! Multi-channel, speaker-conditioned speech extraction at desk scale.
//!
//! The crate covers the whole pipeline: synthetic reverberant mixtures
//! ([`mixsim`]), the encoder/separator/decoder network ([`model`]) on a
//! small reverse-mode tape ([`autodiff`]), SI-SNR objectives with
//! permutation search ([`objectives`]), speaker embeddings ([`speakers`]),
//! training ([`training`]) and evaluation ([`eval`]).

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod mixsim;
pub mod model;
pub mod objectives;
pub mod signals;
pub mod speakers;
pub mod training;

pub use error::{Error, Result};
