//! Entanglement-based quantum key distribution with CHSH-monitored security.
//!
//! The crate covers the full post-processing chain of a time-tagged,
//! polarization-entangled QKD link: a photon-pair and detector simulator
//! ([`physics`]), time-tag synchronization and coincidence matching
//! ([`timetag`]), basis sifting and Bell estimation ([`sifting`]), CASCADE
//! error correction ([`cascade`]), privacy amplification ([`privamp`]) and
//! the two-party classical session ([`protocol`]).

pub mod bits;
pub mod cascade;
pub mod experiment;
pub mod physics;
pub mod privamp;
pub mod protocol;
pub mod sifting;
pub mod timetag;
