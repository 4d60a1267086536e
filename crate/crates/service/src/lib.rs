//! Command-line tool and HTTP service around the `vprm-core` scoring engine.

pub mod cli;
pub mod http;

pub use cli::{run, Cli, CliError};
pub use http::router;
