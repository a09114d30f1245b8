//! Operator surface over `absa-core`: layered configuration, subcommands
//! and the multi-seed experiment drivers.

pub mod commands;
pub mod config;
pub mod experiments;
