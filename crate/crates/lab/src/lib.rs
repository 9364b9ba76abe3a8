//! Session service, wire protocol, session logs and command-line tools for
//! the virtual planar trap.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod log;
pub mod protocol;
pub mod server;
pub mod session;
