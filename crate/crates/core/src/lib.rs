pub mod container;
pub mod error;
pub mod evalkit;
pub mod ilrma_solver;
pub mod mixsim;
pub mod mnmf_solver;
pub mod neural;
pub mod signal_io;
pub mod source_models;
pub mod tensorlab;

pub use error::{Error, Result};
