//! Axiomatic models over candidate executions: the strong model (optionally
//! with ETS), the weak model, the translation-free base model, erasure of
//! translation events, break-before-make detection and SMT-LIB export.

use crate::candidate::{derive_relations, Candidate, RelEnv};
use crate::descriptor::{self, Stage};
use crate::error::{Error, Result};
use crate::event::EventKind;
use crate::rel::{EventSet, Relation};
use crate::setup::PageTableImage;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    Strong,
    Weak,
    Base,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Strong => "strong",
            Model::Weak => "weak",
            Model::Base => "base",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModelOptions {
    pub ets: bool,
    /// Drop translation ordering from the strong model (harness self-test).
    pub mutate: bool,
}

/// One edge of a reported cycle, with the clause that contributes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleEdge {
    pub from: usize,
    pub to: usize,
    pub clause: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub consistent: bool,
    /// Name of the first failing axiom.
    pub failing: Option<String>,
    pub cycle: Vec<CycleEdge>,
    /// Witness order over table writes and TLBIs, when one was needed.
    pub wco: Option<Vec<usize>>,
}

impl Check {
    fn ok(wco: Option<Vec<usize>>) -> Self {
        Check { consistent: true, failing: None, cycle: Vec::new(), wco }
    }

    fn fail(axiom: &str, cycle: Vec<CycleEdge>) -> Self {
        Check { consistent: false, failing: Some(axiom.to_string()), cycle, wco: None }
    }
}

/// A union of named relations; remembers which clause supplies each edge.
#[derive(Debug, Clone)]
pub struct Clauses {
    pub parts: Vec<(String, Relation)>,
}

impl Clauses {
    fn new() -> Self {
        Clauses { parts: Vec::new() }
    }

    fn add(&mut self, name: &str, r: Relation) {
        self.parts.push((name.to_string(), r));
    }

    pub fn union(&self, n: usize) -> Relation {
        let mut u = Relation::empty(n);
        for (_, r) in &self.parts {
            u.union_in_place(r);
        }
        u
    }

    pub fn clause_of(&self, a: usize, b: usize) -> String {
        self.parts.iter().find(|(_, r)| r.contains(a, b)).map_or_else(|| "?".to_string(), |(n, _)| n.clone())
    }

    fn annotate(&self, cycle: &[usize]) -> Vec<CycleEdge> {
        (0..cycle.len())
            .map(|i| {
                let (a, b) = (cycle[i], cycle[(i + 1) % cycle.len()]);
                CycleEdge { from: a, to: b, clause: self.clause_of(a, b) }
            })
            .collect()
    }
}

fn acyclic_or(clauses: &Clauses, n: usize, axiom: &str) -> Option<Check> {
    clauses.union(n).find_cycle().map(|c| Check::fail(axiom, clauses.annotate(&c)))
}

fn id(s: &EventSet) -> Relation {
    s.id()
}

fn internal_clauses(e: &RelEnv) -> Clauses {
    let mut c = Clauses::new();
    c.add("po-loc", e.po_loc.clone());
    c.add("fr", e.fr.clone());
    c.add("co", e.co.clone());
    c.add("rf", e.rf.clone());
    c
}

fn translation_internal_clauses(e: &RelEnv) -> Clauses {
    let mut c = Clauses::new();
    c.add("po-pa", e.po_pa.clone());
    c.add("trfi", e.internal(&e.trf));
    c
}

pub fn obs(e: &RelEnv) -> Relation {
    let rfe = e.external(&e.rf);
    let fre = e.external(&e.fr);
    let coe = e.external(&e.co);
    let trfe = e.external(&e.trf);
    &(&(&rfe | &fre) | &coe) | &trfe
}

pub fn dob(e: &RelEnv) -> Relation {
    let w = id(&e.w);
    let r = id(&e.r);
    let isb = id(&e.isb);
    let addr_po = e.addr.seq(&e.po);
    let ad = &e.addr | &e.data;
    let rfi = e.internal(&e.rf);
    let trfi = e.internal(&e.trf);
    let mut out = &e.addr | &e.data;
    out.union_in_place(&e.ctrl.seq(&w));
    out.union_in_place(&(&e.ctrl | &addr_po).seq(&isb).seq(&e.po).seq(&r));
    out.union_in_place(&addr_po.seq(&w));
    out.union_in_place(&ad.seq(&rfi));
    out.union_in_place(&ad.seq(&trfi));
    out
}

pub fn bob(e: &RelEnv) -> Relation {
    let po = &e.po;
    let full = id(&e.dmb_full);
    let mut out = po.seq(&full);
    out.union_in_place(&full.seq(po));
    out.union_in_place(&id(&e.rel_l).seq(po).seq(&id(&e.acq_a)));
    out.union_in_place(&id(&e.r).seq(po).seq(&id(&e.dmb_ld)).seq(po));
    out.union_in_place(&id(&(&e.acq_a | &e.acq_q)).seq(po));
    out.union_in_place(&id(&e.w).seq(po).seq(&id(&e.dmb_st)).seq(po).seq(&id(&(&e.w | &e.tlbi))));
    out.union_in_place(&po.seq(&id(&e.rel_l)));
    out
}

pub fn tob(e: &RelEnv) -> Relation {
    let tf = id(&e.t_f);
    let tfri = e.internal(&e.tfr);
    let dsb_io = e.po.seq(&id(&e.dsb_sy)).seq(&e.io);
    let mut out = tf.seq(&e.tfr);
    out.union_in_place(&(&tf.seq(&tfri) & &dsb_io.inverse()));
    out.union_in_place(&e.speculative.seq(&e.internal(&e.trf)));
    out.union_in_place(&id(&e.t).seq(&e.iio).seq(&id(&(&e.r | &e.w))).seq(&e.po).seq(&id(&e.w)));
    out
}

pub fn ctxob(e: &RelEnv) -> Relation {
    let mut out = e.speculative.seq(&id(&e.msr));
    out.union_in_place(&id(&e.cse).seq(&e.io));
    out.union_in_place(&id(&e.context_change).seq(&e.po).seq(&id(&e.cse)));
    out.union_in_place(&e.speculative.seq(&id(&e.isb)));
    out.union_in_place(&e.po.seq(&id(&e.eret)).seq(&e.io).seq(&id(&e.t)));
    out
}

pub fn obfault(e: &RelEnv) -> Relation {
    let po = &e.po;
    let fw = id(&e.fault_w);
    let f = id(&e.fault);
    let mut out = e.data.seq(&fw);
    out.union_in_place(&e.speculative.seq(&fw));
    out.union_in_place(&e.ctrl.seq(&id(&e.fault_r)));
    out.union_in_place(&id(&e.dmb_full).seq(po).seq(&f));
    out.union_in_place(&id(&e.r).seq(po).seq(&id(&e.dmb_ld)).seq(po).seq(&f));
    out.union_in_place(&id(&e.w).seq(po).seq(&id(&e.dmb_st)).seq(po).seq(&fw));
    out.union_in_place(&id(&(&e.acq_a | &e.acq_q)).seq(po).seq(&f));
    out.union_in_place(&id(&(&e.r | &e.w)).seq(po).seq(&id(&e.fault_l)));
    out.union_in_place(&id(&e.rel_l).seq(po).seq(&id(&e.fault_a)));
    out.union_in_place(&e.addr.seq(po).seq(&fw));
    out
}

pub fn ob_ets(e: &RelEnv) -> Relation {
    let first = obfault(e).seq(&id(&e.fault)).seq(&e.iio.inverse()).seq(&id(&e.t_f));
    let second = &id(&e.tlbi).seq(&e.po).seq(&id(&e.dsb_sy)).seq(&e.io).seq(&id(&e.t)) & &e.tlb_affects;
    &first | &second
}

/// Clauses of the strong model's ordered-before that do not depend on wco.
pub fn strong_static_clauses(e: &RelEnv, opts: ModelOptions) -> Clauses {
    let mut c = Clauses::new();
    if opts.mutate {
        c.add("obs", &(&e.external(&e.rf) | &e.external(&e.fr)) | &e.external(&e.co));
    } else {
        c.add("obs", obs(e));
    }
    c.add("dob", dob(e));
    c.add("bob", bob(e));
    c.add("iio", e.iio.clone());
    if !opts.mutate {
        c.add("tob", tob(e));
    }
    c.add("ctxob", ctxob(e));
    c.add("obfault", obfault(e));
    if opts.ets {
        c.add("obETS", ob_ets(e));
    }
    c
}

/// `obtlbi` under a given wco, plus the wco pairs involving TLBIs.
pub fn wco_clauses(e: &RelEnv, wco: &Relation) -> Clauses {
    let t1 = id(&(&e.t & &e.stage1));
    let t2 = id(&(&e.t & &e.stage2));
    let tlbi = id(&e.tlbi);
    let aff_inv = e.tlb_affects.inverse();
    let tcache1 = &t1.seq(&e.tfr).seq(wco).seq(&tlbi) & &aff_inv;
    let tcache2 = &t2.seq(&e.tfr).seq(wco).seq(&id(&e.tlbi_s2)) & &aff_inv;
    let maybe_cached = &id(&e.t).seq(&e.trf.inverse()).seq(wco).seq(&id(&e.tlbi_s1)) & &aff_inv;
    let newer_s1 = e.same_trans.seq(&t1).seq(&e.trf.inverse()).seq(&wco.inverse());
    let cached_s1 = e.same_trans.seq(&t1).seq(&maybe_cached);
    // The later stage-1 invalidation is the one that can remove a cached
    // combined entry, so the third clause targets TLBI-S1.
    let third = &tcache2.seq(&wco.optional()).seq(&id(&e.tlbi_s1)) & &cached_s1;
    let translate = &(&tcache1 | &(&tcache2 & &newer_s1)) | &third;
    let lifted = id(&(&(&e.r | &e.w) | &e.fault)).seq(&e.iio.inverse()).seq(&e.external(&translate));
    let mut c = Clauses::new();
    c.add("obtlbi", &translate | &lifted);
    let tlbi_set = &e.tlbi;
    let pairs = Relation::from_pred(e.n, |a, b| wco.contains(a, b) && (tlbi_set.contains(a) || tlbi_set.contains(b)));
    c.add("wco", pairs);
    c
}

/// Candidate wco orders: TLBI permutations with nested per-location cuts.
struct WcoSearch<'a> {
    e: &'a RelEnv,
    iw: Vec<usize>,
    chains: Vec<Vec<usize>>,
    tlbis: Vec<usize>,
}

impl<'a> WcoSearch<'a> {
    fn new(e: &'a RelEnv, c: &Candidate) -> Self {
        let mut iw = Vec::new();
        let mut chains = Vec::new();
        for ws in c.co.values() {
            if !e.w_table.contains(ws[0]) {
                continue;
            }
            iw.push(ws[0]);
            chains.push(ws[1..].to_vec());
        }
        let tlbis = e.tlbi.iter().collect();
        WcoSearch { e, iw, chains, tlbis }
    }

    fn order(&self, perm: &[usize], cuts: &[Vec<usize>]) -> Vec<usize> {
        let mut out = self.iw.clone();
        let mut taken = vec![0; self.chains.len()];
        for (k, &t) in perm.iter().enumerate() {
            for (p, chain) in self.chains.iter().enumerate() {
                out.extend_from_slice(&chain[taken[p]..cuts[k][p]]);
                taken[p] = cuts[k][p];
            }
            out.push(t);
        }
        for (p, chain) in self.chains.iter().enumerate() {
            out.extend_from_slice(&chain[taken[p]..]);
        }
        out
    }

    /// Visit each order until `f` returns true.
    fn find(&self, mut f: impl FnMut(&[usize]) -> bool) -> Option<Vec<usize>> {
        let mut perm_idx: Vec<usize> = (0..self.tlbis.len()).collect();
        loop {
            let perm: Vec<usize> = perm_idx.iter().map(|&i| self.tlbis[i]).collect();
            let mut cuts: Vec<Vec<usize>> = Vec::new();
            if let Some(o) = self.cuts(&perm, &mut cuts, &mut f) {
                return Some(o);
            }
            if !next_permutation(&mut perm_idx) {
                return None;
            }
        }
    }

    fn cuts(
        &self,
        perm: &[usize],
        cuts: &mut Vec<Vec<usize>>,
        f: &mut impl FnMut(&[usize]) -> bool,
    ) -> Option<Vec<usize>> {
        if cuts.len() == perm.len() {
            let o = self.order(perm, cuts);
            return f(&o).then_some(o);
        }
        let lower: Vec<usize> = cuts.last().cloned().unwrap_or_else(|| vec![0; self.chains.len()]);
        let mut cur = lower.clone();
        loop {
            cuts.push(cur.clone());
            if let Some(o) = self.cuts(perm, cuts, f) {
                return Some(o);
            }
            cuts.pop();
            // Advance `cur` as an odometer bounded below by `lower`.
            let mut p = self.chains.len();
            loop {
                if p == 0 {
                    return None;
                }
                p -= 1;
                if cur[p] < self.chains[p].len() {
                    cur[p] += 1;
                    break;
                }
                cur[p] = lower[p];
            }
        }
    }

    fn relation(&self, order: &[usize]) -> Relation {
        let mut r = Relation::empty(self.e.n);
        for (i, &a) in order.iter().enumerate() {
            for &b in &order[i + 1..] {
                r.insert(a, b);
            }
        }
        r
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn local_axioms(e: &RelEnv) -> Option<Check> {
    acyclic_or(&internal_clauses(e), e.n, "internal")
        .or_else(|| acyclic_or(&translation_internal_clauses(e), e.n, "translation-internal"))
}

/// Full strong-model ob for one wco order.
pub fn strong_ob(e: &RelEnv, opts: ModelOptions, wco_order: &[usize]) -> Clauses {
    let mut c = strong_static_clauses(e, opts);
    let s = WcoSearch { e, iw: Vec::new(), chains: Vec::new(), tlbis: Vec::new() };
    let wco = s.relation(wco_order);
    if !opts.mutate {
        c.parts.extend(wco_clauses(e, &wco).parts);
    }
    c
}

/// Strong model with the given wco order, without searching.
pub fn check_strong_with(e: &RelEnv, opts: ModelOptions, wco_order: &[usize]) -> Check {
    if let Some(f) = local_axioms(e) {
        return f;
    }
    let c = strong_ob(e, opts, wco_order);
    acyclic_or(&c, e.n, "external").unwrap_or_else(|| Check::ok(Some(wco_order.to_vec())))
}

pub fn check_strong(c: &Candidate, e: &RelEnv, opts: ModelOptions) -> Check {
    if let Some(f) = local_axioms(e) {
        return f;
    }
    let statics = strong_static_clauses(e, opts);
    let base = statics.union(e.n);
    if let Some(cy) = base.find_cycle() {
        return Check::fail("external", statics.annotate(&cy));
    }
    let search = WcoSearch::new(e, c);
    let mut first_cycle: Option<Vec<CycleEdge>> = None;
    let found = search.find(|order| {
        if opts.mutate {
            return true;
        }
        let wco = search.relation(order);
        let extra = wco_clauses(e, &wco);
        let mut all = base.clone();
        all.union_in_place(&extra.union(e.n));
        match all.find_cycle() {
            None => true,
            Some(cy) => {
                if first_cycle.is_none() {
                    let mut named = statics.clone();
                    named.parts.extend(extra.parts);
                    first_cycle = Some(named.annotate(&cy));
                }
                false
            }
        }
    });
    match found {
        Some(order) => Check::ok(Some(order)),
        None => Check::fail("external", first_cycle.unwrap_or_default()),
    }
}

// ---------------------------------------------------------------------------
// Weak model

pub fn weak_clauses(e: &RelEnv) -> Clauses {
    let mut c = Clauses::new();
    c.add("obs", obs(e));
    c.add("dob", dob(e));
    c.add("bob", bob(e));
    c.add("iio", e.iio.clone());
    c.add("tob", tob(e));
    c.add("ctxob", ctxob(e));
    c.add("obfault", obfault(e));
    c
}

/// The emptiness axioms of the weak model, by name.
pub fn weak_emptiness(e: &RelEnv, ob: &Relation) -> Vec<(&'static str, Relation)> {
    let po = &e.po;
    let io = &e.io;
    let dsb = id(&e.dsb_sy);
    let cse = id(&e.cse);
    let trf_loc = &e.trf & &e.loc;
    let aff = &e.tlb_affects;
    let iw_or_w = id(&(&e.iw | &e.w));
    let iw_or_inv = id(&(&e.iw | &e.w_inv));
    let w_inv = id(&e.w_inv);
    let w_valid = id(&e.w_valid);
    let tf_s1 = id(&(&e.t_f & &e.stage1));
    let tf_s2 = id(&(&e.t_f & &e.stage2));
    let t = id(&e.t);
    let t_s1 = id(&(&e.t & &e.stage1));
    let t_s2 = id(&(&e.t & &e.stage2));
    let mem = id(&(&e.r | &e.w));
    let s1 = id(&e.tlbi_s1);
    let s2 = id(&e.tlbi_s2);
    let ext = &e.ext;

    // Break then invalidate: entry, later TLBI-S1 sequence.
    let broken = iw_or_w.seq(&e.co).seq(&w_inv).seq(ob).seq(&dsb).seq(po);
    let brk1_tail = &(&s1.seq(po).seq(&dsb).seq(ob).seq(&mem).seq(&e.iio.inverse()).seq(&t) & aff) & ext;
    let brk1 = &broken.seq(&brk1_tail) & &trf_loc;
    let brk2_tail = &s1.seq(po).seq(&dsb).seq(ob).seq(&cse).seq(io).seq(&t) & aff;
    let brk2 = &broken.seq(&brk2_tail) & &trf_loc;

    let made = iw_or_inv.seq(&e.co).seq(&w_valid).seq(ob).seq(&cse).seq(io);
    let bbm_seq = ob.seq(&dsb).seq(po).seq(&(&s1.seq(po).seq(&dsb).seq(ob).seq(&cse).seq(io) & aff));
    let bbm = &(&made.seq(&tf_s1) & &bbm_seq) & &trf_loc;

    let s1_seq_cse = &s1.seq(po).seq(&dsb).seq(ob).seq(&cse).seq(io).seq(&t) & aff;
    let s2_then = &s2.seq(po).seq(&dsb).seq(po).seq(&s1_seq_cse).seq(&e.iio) & aff;
    let bbms2 = &(&made.seq(&tf_s2) & &ob.seq(&dsb).seq(po).seq(&s2_then)) & &trf_loc;

    let s1_seq_mem = &(&s1.seq(po).seq(&dsb).seq(ob).seq(&mem).seq(&e.iio.inverse()).seq(&t_s1) & aff) & ext;
    let brk1s2_tail = &(&s2.seq(po).seq(&dsb).seq(po).seq(&s1_seq_mem).seq(&e.iio).seq(&t_s2) & aff) & ext;
    let brk1s2 = &broken.seq(&brk1s2_tail) & &trf_loc;

    let s1_seq_cse1 = &s1.seq(po).seq(&dsb).seq(ob).seq(&cse).seq(io).seq(&t_s1) & aff;
    let brk2s2_tail = &s2.seq(po).seq(&dsb).seq(po).seq(&s1_seq_cse1).seq(&e.iio).seq(&t_s2) & aff;
    let brk2s2 = &broken.seq(&brk2s2_tail) & &trf_loc;

    vec![("bbm", bbm), ("brk1", brk1), ("brk2", brk2), ("bbms2", bbms2), ("brk1s2", brk1s2), ("brk2s2", brk2s2)]
}

pub fn check_weak(e: &RelEnv) -> Check {
    if let Some(f) = local_axioms(e) {
        return f;
    }
    let c = weak_clauses(e);
    if let Some(f) = acyclic_or(&c, e.n, "external") {
        return f;
    }
    let ob = c.union(e.n).plus();
    for (name, r) in weak_emptiness(e, &ob) {
        if let Some((a, b)) = r.pairs().next() {
            return Check::fail(name, vec![CycleEdge { from: a, to: b, clause: name.to_string() }]);
        }
    }
    Check::ok(None)
}

// ---------------------------------------------------------------------------
// Base model and erasure

pub fn base_clauses(e: &RelEnv) -> Clauses {
    let mut c = Clauses::new();
    c.add("obs", &(&e.external(&e.rf) | &e.external(&e.fr)) | &e.external(&e.co));
    c.add("dob", dob(e));
    c.add("bob", bob(e));
    c
}

fn is_erased_kind(k: EventKind) -> bool {
    matches!(k, EventKind::T | EventKind::Tlbi | EventKind::Msr | EventKind::Te | EventKind::Eret | EventKind::Fault)
}

pub fn check_base(c: &Candidate, e: &RelEnv) -> Result<Check> {
    if let Some(ev) = c.events.iter().find(|ev| is_erased_kind(ev.kind)) {
        return Err(Error::Precondition(format!("base model given a non-erased event {}", ev.label())));
    }
    if let Some(f) = acyclic_or(&internal_clauses(e), e.n, "internal") {
        return Ok(f);
    }
    Ok(acyclic_or(&base_clauses(e), e.n, "external").unwrap_or_else(|| Check::ok(None)))
}

/// Remove translation, maintenance, context and fault events.
pub fn erase(c: &Candidate, e: &RelEnv) -> Result<Candidate> {
    if !e.w_table.is_empty() && e.w_table.iter().any(|w| !e.iw.contains(w)) {
        return Err(Error::Precondition("candidate writes translation-table memory".into()));
    }
    if !e.fault.is_empty() {
        return Err(Error::Precondition("candidate contains a fault".into()));
    }
    if !e.context_change.is_empty() {
        return Err(Error::Precondition("candidate changes translation context".into()));
    }
    let keep: Vec<usize> = c
        .events
        .iter()
        .filter(|ev| !is_erased_kind(ev.kind) && !(ev.is_iw && e.w_table.contains(ev.id) && !data_touched(c, ev.id)))
        .map(|ev| ev.id)
        .collect();
    let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let map_set = |s: &std::collections::BTreeSet<usize>| s.iter().filter_map(|x| remap.get(x).copied()).collect();
    let events = keep
        .iter()
        .map(|&old| {
            let mut ev = c.events[old].clone();
            ev.id = remap[&old];
            ev.deps.addr = map_set(&ev.deps.addr);
            ev.deps.data = map_set(&ev.deps.data);
            ev.deps.ctrl = map_set(&ev.deps.ctrl);
            ev
        })
        .collect();
    let rf = c.rf.iter().filter_map(|&(w, r)| Some((*remap.get(&w)?, *remap.get(&r)?))).collect();
    let co =
        c.co.iter()
            .filter_map(|(pa, ws)| {
                let ws: Vec<usize> = ws.iter().filter_map(|w| remap.get(w).copied()).collect();
                (!ws.is_empty() && keep.contains(&c.co[pa][0])).then_some((*pa, ws))
            })
            .collect();
    Ok(Candidate { events, rf, co, outcome: c.outcome.clone() })
}

/// Whether an explicit access touches the location of initial write `iw`.
fn data_touched(c: &Candidate, iw: usize) -> bool {
    let pa = c.events[iw].pa;
    c.events.iter().any(|ev| ev.is_mem() && !ev.is_iw && ev.pa == pa)
}

pub fn erased_relations(c: &Candidate) -> RelEnv {
    derive_relations(c, |_| false)
}

// ---------------------------------------------------------------------------
// Break-before-make detection

/// Whether two valid descriptors differ in anything other than permissions.
fn conflicting(a: u64, b: u64, level: u8) -> bool {
    let (Ok(da), Ok(db)) = (descriptor::decode(a, level), descriptor::decode(b, level)) else {
        return true;
    };
    let strip_ap = |mut at: descriptor::Attrs| {
        at.ap = 0;
        at
    };
    da.kind != db.kind || da.addr != db.addr || strip_ap(da.attrs) != strip_ap(db.attrs)
}

/// A TLBI that can remove translations built from a cell's region.
fn tlbi_covers_cell(c: &Candidate, tlbi: usize, image: &PageTableImage, pa: u64) -> bool {
    let Some(cell) = image.cells.get(&pa) else {
        return true;
    };
    let op = c.events[tlbi].tlbi.expect("TLBI event");
    let lo = cell.ia;
    let hi = cell.ia + descriptor::region_size(cell.level);
    let in_region = |page: u64| page >= lo && page < hi;
    let threads: std::collections::BTreeSet<_> = c.events.iter().filter_map(|ev| ev.thread).collect();
    if !op.kind.broadcast() && threads.len() > 1 {
        return false;
    }
    match cell.stage {
        Stage::S1 => op.kind.affects_stage1() && op.va_page.is_none_or(in_region),
        Stage::S2 => op.kind.affects_stage2() && op.ipa_page.is_none_or(in_region),
    }
}

/// Conflicting valid writes to one descriptor without a break sequence.
/// `ob` is the transitively closed ordered-before relation.
pub fn detect_bbm(c: &Candidate, e: &RelEnv, ob: &Relation, image: &PageTableImage) -> bool {
    bbm_violations(c, e, ob, image).next().is_some()
}

pub fn bbm_violations<'a>(
    c: &'a Candidate,
    e: &'a RelEnv,
    ob: &'a Relation,
    image: &'a PageTableImage,
) -> impl Iterator<Item = (usize, usize)> + 'a {
    c.co.iter().filter(|(pa, _)| image.is_table_memory(**pa)).flat_map(move |(pa, ws)| {
        let level = image.cells.get(pa).map_or(3, |ci| ci.level);
        let mut out = Vec::new();
        for (i, &a) in ws.iter().enumerate() {
            for &b in &ws[i + 1..] {
                let (va, vb) = (c.events[a].value, c.events[b].value);
                if !descriptor::is_valid_bits(va) || !descriptor::is_valid_bits(vb) || !conflicting(va, vb, level) {
                    continue;
                }
                let between = &ws[i + 1..ws.iter().position(|&x| x == b).expect("b in chain")];
                let broken = between.iter().any(|&inv| {
                    e.w_inv.contains(inv)
                        && e.dsb_sy.iter().any(|d1| {
                            ob.contains(inv, d1)
                                && e.tlbi.iter().any(|t| {
                                    e.po.contains(d1, t)
                                        && tlbi_covers_cell(c, t, image, *pa)
                                        && e.dsb_sy.iter().any(|d2| e.po.contains(t, d2) && ob.contains(d2, b))
                                })
                        })
                });
                if !broken {
                    out.push((a, b));
                }
            }
        }
        out
    })
}

/// Self-contained SMT-LIB script asserting a BBM violation exists in the
/// candidate; `sat` means violation.
pub fn export_smt(name: &str, c: &Candidate, e: &RelEnv, ob: &Relation, image: &PageTableImage) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "; break-before-make check for {name}");
    s.push_str("(set-logic ALL)\n");
    let n = c.events.len();
    s.push_str("(declare-datatypes () ((Event");
    for i in 0..n {
        let _ = write!(s, " e{i}");
    }
    s.push_str(")))\n");
    let rel = |s: &mut String, name: &str, r: &Relation| {
        let _ = write!(s, "(define-fun {name} ((a Event) (b Event)) Bool (or false");
        for (a, b) in r.pairs() {
            let _ = write!(s, " (and (= a e{a}) (= b e{b}))");
        }
        s.push_str("))\n");
    };
    let set = |s: &mut String, name: &str, x: &EventSet| {
        let _ = write!(s, "(define-fun {name} ((a Event)) Bool (or false");
        for i in x.iter() {
            let _ = write!(s, " (= a e{i})");
        }
        s.push_str("))\n");
    };
    let mut co = Relation::empty(n);
    let mut conflict = Relation::empty(n);
    let mut covers = Relation::empty(n);
    for (pa, ws) in &c.co {
        if !image.is_table_memory(*pa) {
            continue;
        }
        let level = image.cells.get(pa).map_or(3, |ci| ci.level);
        for (i, &a) in ws.iter().enumerate() {
            for &b in &ws[i + 1..] {
                co.insert(a, b);
                let (va, vb) = (c.events[a].value, c.events[b].value);
                if descriptor::is_valid_bits(va) && descriptor::is_valid_bits(vb) && conflicting(va, vb, level) {
                    conflict.insert(a, b);
                }
            }
            for t in e.tlbi.iter() {
                if tlbi_covers_cell(c, t, image, *pa) {
                    covers.insert(t, ws[i]);
                }
            }
        }
    }
    rel(&mut s, "co", &co);
    rel(&mut s, "ob", ob);
    rel(&mut s, "po", &e.po);
    rel(&mut s, "conflict", &conflict);
    rel(&mut s, "covers", &covers);
    set(&mut s, "W_invalid", &e.w_inv);
    set(&mut s, "DSB", &e.dsb_sy);
    set(&mut s, "TLBI", &e.tlbi);
    s.push_str(
        "(assert (exists ((a Event) (b Event)) (and (conflict a b)\n  \
         (not (exists ((i Event) (d1 Event) (t Event) (d2 Event))\n    \
         (and (co a i) (co i b) (W_invalid i) (DSB d1) (TLBI t) (DSB d2) (covers t i)\n         \
         (ob i d1) (po d1 t) (po t d2) (ob d2 b)))))))\n",
    );
    s.push_str("(check-sat)\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clause_annotation_names_cycle_edges() {
        let mut c = Clauses::new();
        c.add("x", Relation::from_pairs(2, [(0, 1)]));
        c.add("y", Relation::from_pairs(2, [(1, 0)]));
        let f = acyclic_or(&c, 2, "external").unwrap();
        assert!(!f.consistent);
        let names: Vec<&str> = f.cycle.iter().map(|e| e.clause.as_str()).collect();
        assert!(names.contains(&"x") && names.contains(&"y"));
    }

    #[test]
    fn permutations_step() {
        let mut v = vec![0, 1, 2];
        let mut n = 1;
        while next_permutation(&mut v) {
            n += 1;
        }
        assert_eq!(n, 6);
    }
}
