//! Experiment harness, file formats and command-line front end for
//! [`xlris_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod harness;
pub mod io;
pub mod par;
