pub mod config;
pub mod correct;
pub mod dump;
pub mod error;
pub mod identify;
pub mod judge;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod router;
pub mod sae;
pub mod steering;
pub mod toylm;

pub use error::{Error, Result};
