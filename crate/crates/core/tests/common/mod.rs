#![allow(dead_code)]

use rvm_core::candidate::{enumerate_candidates, Budget, Candidate};
use rvm_core::litmus::Prepared;
use rvm_core::runner;
use std::path::PathBuf;
use std::sync::OnceLock;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

pub struct Loaded {
    pub path: PathBuf,
    pub prep: Prepared,
    pub candidates: Vec<Candidate>,
}

/// Every corpus test with its enumerated candidates.
pub fn corpus() -> &'static [Loaded] {
    static CORPUS: OnceLock<Vec<Loaded>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        runner::discover(&[corpus_dir()])
            .unwrap()
            .into_iter()
            .map(|path| {
                let prep = runner::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                let candidates = enumerate_candidates(&prep, Budget::default()).unwrap();
                Loaded { path, prep, candidates }
            })
            .collect()
    })
}

pub fn load(rel: &str) -> Prepared {
    runner::load(&corpus_dir().join(rel)).unwrap()
}
