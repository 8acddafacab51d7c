//! Model entry points on specific corpus tests.

mod common;

use rvm_core::candidate::{enumerate_candidates, relations, Budget};
use rvm_core::event::EventKind;
use rvm_core::litmus::check_final;
use rvm_core::model::{
    check_base, check_strong, detect_bbm, erase, erased_relations, export_smt, strong_ob, ModelOptions,
};
use rvm_core::runner::{evaluate, Variant};
use rvm_core::Error;

const STRONG: ModelOptions = ModelOptions { ets: false, mutate: false };

#[test]
fn cotw1_has_two_candidates_both_forbidden() {
    let prep = common::load("mapping/CoTW1.inv.vmtest");
    let cands = enumerate_candidates(&prep, Budget::default()).unwrap();
    assert_eq!(cands.len(), 2);
    for c in &cands {
        let e = relations(&prep, c);
        if check_final(&prep.final_state, &c.outcome) {
            assert!(!check_strong(c, &e, STRONG).consistent);
        }
    }
}

#[test]
fn erasure_rejects_page_table_writes() {
    let prep = common::load("mapping/CoTW1.inv.vmtest");
    let cands = enumerate_candidates(&prep, Budget::default()).unwrap();
    let c = cands.iter().find(|c| c.events.iter().any(|e| e.kind == EventKind::W && !e.is_iw)).unwrap();
    let e = relations(&prep, c);
    assert!(matches!(erase(c, &e), Err(Error::Precondition(_))));
}

#[test]
fn erasure_keeps_only_user_events() {
    for (test, forbidden) in [("classic/MP.vmtest", false), ("classic/MP+dmbs.vmtest", true)] {
        let prep = common::load(test);
        let cands = enumerate_candidates(&prep, Budget::default()).unwrap();
        let mut allowed = false;
        for c in &cands {
            let e = relations(&prep, c);
            let erased = erase(c, &e).unwrap();
            assert!(erased.events.iter().all(|x| matches!(x.kind, EventKind::R | EventKind::W | EventKind::Dmb)));
            let data: usize =
                c.events.iter().filter(|x| matches!(x.kind, EventKind::R | EventKind::W) && !x.is_iw).count();
            let kept: usize = erased.events.iter().filter(|x| !x.is_iw).filter(|x| x.kind != EventKind::Dmb).count();
            assert_eq!(data, kept);
            let base = check_base(&erased, &erased_relations(&erased)).unwrap();
            if base.consistent && check_final(&prep.final_state, &c.outcome) {
                allowed = true;
            }
        }
        assert_eq!(allowed, !forbidden, "{test}");
    }
}

#[test]
fn base_check_refuses_unerased_candidates() {
    let prep = common::load("classic/MP.vmtest");
    let c = &enumerate_candidates(&prep, Budget::default()).unwrap()[0];
    assert!(matches!(check_base(c, &relations(&prep, c)), Err(Error::Precondition(_))));
}

#[test]
fn bbm_flags_missing_break_only() {
    let cases = [
        ("bbm/BBM+po.vmtest", true),
        ("bbm/BBM+dsb-tlbiis-dsb.vmtest", false),
        ("bbm/BBM.Tf+dsb-tlbiis-dsb.vmtest", false),
    ];
    for (test, flagged) in cases {
        let prep = common::load(test);
        let cands = enumerate_candidates(&prep, Budget::default()).unwrap();
        let eval = evaluate(&prep, &cands, Variant::STRONG, false).unwrap();
        assert_eq!(eval.bbm, flagged, "{test}");
    }
}

#[test]
fn smt_export_describes_the_candidate() {
    let prep = common::load("bbm/BBM+po.vmtest");
    let cands = enumerate_candidates(&prep, Budget::default()).unwrap();
    let eval = evaluate(&prep, &cands, Variant::STRONG, false).unwrap();
    let k = eval.first_allowed().unwrap();
    let e = relations(&prep, &cands[k]);
    let order = eval.checks[k].0.wco.clone().unwrap();
    let ob = strong_ob(&e, STRONG, &order).union(e.n).plus();
    assert!(detect_bbm(&cands[k], &e, &ob, &prep.image));
    let smt = export_smt("BBM+po", &cands[k], &e, &ob, &prep.image);
    assert!(smt.contains("(declare-datatypes"));
    assert!(smt.contains("(check-sat)"));
    let opens = smt.matches('(').count();
    assert_eq!(opens, smt.matches(')').count());
}
