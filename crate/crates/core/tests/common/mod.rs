//! Helpers shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

pub mod fd;
pub mod oracle;
pub mod props;
