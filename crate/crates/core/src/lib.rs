pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod knowledge_prompter;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod prompting;
pub mod tensor;
pub mod transformer;
pub mod type_prompter;
pub mod unified_prompter;
pub mod vocab;

pub use error::{Error, Result};
