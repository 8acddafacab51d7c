//! Candidate enumeration against a brute-force enumerator on random micro-tests.

mod oracle;

#[test]
fn enumeration_matches_brute_force() {
    let nontrivial = oracle::compare(0x5eed, 20).unwrap_or_else(|e| panic!("{e}"));
    assert!(nontrivial >= 10, "generator produced too few interesting tests");
}
