//! Two-party additive secret sharing and a privacy-preserving image
//! retrieval engine built on it.

pub mod cli;
pub mod dealer;
pub mod error;
pub mod numeric;
pub mod oracle;
pub mod parallel;
pub mod party;
pub mod pipeline;
pub mod protocols;
pub mod secindex;
pub mod secpca;
pub mod securenn;
pub mod sharefile;
pub mod sharing;
pub mod testing;
pub mod transport;

pub use error::{Error, Result};
