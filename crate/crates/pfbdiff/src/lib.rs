//! File formats, command-line tool and HTTP job service around
//! [`pfbdiff_core`].

pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod image_io;
pub mod selftest;
pub mod service;
pub mod weights_file;
