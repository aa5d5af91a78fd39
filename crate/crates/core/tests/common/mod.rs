//! Test-only oracles and data generators, written independently of the
//! library's training path.

#![allow(dead_code)]

pub mod oracle;
pub mod synth;
