//! Oracles and criterion checks shared by the integration tests and the
//! acceptance runner. Every check returns a one-line summary on success.
#![allow(dead_code)]

pub mod attention;
pub mod benchmark;
pub mod conformance;
pub mod determinism;
pub mod eval_oracle;
pub mod gradients;
pub mod matching_oracle;
pub mod warp;

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Panics with the failure message; for use inside `#[test]` functions.
pub fn pass(c: Check) {
    if let Err(e) = c {
        panic!("{e}");
    }
}
