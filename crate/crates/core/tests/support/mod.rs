//! Checks shared by the focused test targets and the acceptance runner.
#![allow(dead_code)]

pub mod fd;
pub mod optim;
