//! File formats, reports and the command-line front end for `splitcache-core`.
//!
//! - [`tracefile`]: JSON-Lines activation traces with line-numbered errors.
//! - [`config`]: run configuration files and model/device spec resolution.
//! - [`output`]: versioned JSON reports and stable-column CSV extracts.
//! - [`cli`]: the `gen`, `run`, `compare`, `sweep-theta` and `configure` commands.

pub mod cli;
pub mod config;
pub mod output;
pub mod tracefile;
