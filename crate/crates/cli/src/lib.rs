//! File formats and subcommands behind the `qmoe` binary.

pub mod archive;
pub mod commands;
pub mod convert;
pub mod report;
