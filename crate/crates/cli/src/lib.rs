//! Library surface of the satengel binary, exposed so integration tests can
//! drive the same stage functions the subcommands use.

pub mod commands;
pub mod config;
pub mod figures;
pub mod manifest;
pub mod pipeline;
