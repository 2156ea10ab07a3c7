#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;

use mvm::instrument::instrument_program;
use mvm::isa::{parse_assembly, Program};

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub fn source(name: &str) -> String {
    fs::read_to_string(corpus_dir().join(format!("{name}.s")))
        .unwrap_or_else(|e| panic!("corpus/{name}.s: {e}"))
}

pub fn original(name: &str) -> Program {
    parse_assembly(&source(name)).unwrap_or_else(|d| panic!("{name}: {d:?}"))
}

pub fn instrumented(name: &str) -> Program {
    instrument_program(&original(name)).unwrap().0
}

/// Every positive corpus program, by file stem.
pub fn all() -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(corpus_dir())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "s").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    names.sort();
    names
}

/// Programs whose output does not depend on the interleaving, so a migration (which
/// restarts scheduling) must reproduce it exactly.
pub fn migratable() -> Vec<String> {
    all()
        .into_iter()
        .filter(|n| !source(n).starts_with("# interleaving-dependent"))
        .collect()
}
