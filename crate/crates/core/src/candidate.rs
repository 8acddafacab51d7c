//! Candidate-execution enumeration and the derived relation environment.

use crate::descriptor::{self, Stage};
use crate::error::{Error, Result};
use crate::event::{Acquire, BarrierClass, Domain, Event, EventKind};
use crate::isa::{Executor, ThreadRun, ValueOracle};
use crate::litmus::{Outcome, Prepared};
use crate::rel::{EventSet, Relation};
use std::collections::{BTreeMap, BTreeSet};

const DOMAIN_FIXPOINT_LIMIT: usize = 16;
/// Cap on distinct control/value paths explored for one thread.
const THREAD_PATH_LIMIT: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_candidates: usize,
    /// Restrict read values to those some write can supply.
    pub reduction: bool,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_candidates: 1_000_000, reduction: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub events: Vec<Event>,
    /// `(write, read)` for every R and T event.
    pub rf: Vec<(usize, usize)>,
    /// Per PA, writes in coherence order; the initial write comes first.
    pub co: BTreeMap<u64, Vec<usize>>,
    pub outcome: Outcome,
}

impl Candidate {
    /// Text key invariant under renumbering of events.
    pub fn canonical_key(&self) -> String {
        let key = |i: usize| {
            let e = &self.events[i];
            match e.thread {
                Some(t) => format!("{t}.{}.{}:{:?}@{:x?}={:x}", e.instr, e.iio, e.kind, e.pa, e.value),
                None => format!("IW@{:x?}={:x}", e.pa, e.value),
            }
        };
        let mut evs: Vec<String> = (0..self.events.len()).map(key).collect();
        evs.sort();
        let mut rf: Vec<String> = self.rf.iter().map(|&(w, r)| format!("{}->{}", key(w), key(r))).collect();
        rf.sort();
        let co: Vec<String> = self
            .co
            .iter()
            .map(|(pa, ws)| format!("{pa:x}:{}", ws.iter().map(|&w| key(w)).collect::<Vec<_>>().join(",")))
            .collect();
        format!("{}|{}|{}", evs.join(";"), rf.join(";"), co.join(";"))
    }

    pub fn source_of(&self, read: usize) -> Option<usize> {
        self.rf.iter().find(|&&(_, r)| r == read).map(|&(w, _)| w)
    }
}

/// Values each PA may hold at some point of some execution.
type Domains = BTreeMap<u64, Vec<u64>>;

struct ChoiceOracle<'a> {
    domains: &'a Domains,
    initial: &'a dyn Fn(u64) -> u64,
    choices: &'a [usize],
    widths: Vec<usize>,
}

impl ValueOracle for ChoiceOracle<'_> {
    fn read(&mut self, pa: u64, _trans: Option<(Stage, u8)>) -> Result<u64> {
        let init = (self.initial)(pa);
        let single = [init];
        let dom: &[u64] = self.domains.get(&pa).map_or(&single, |d| d.as_slice());
        let i = self.widths.len();
        let pick = self.choices.get(i).copied().unwrap_or(0);
        self.widths.push(dom.len());
        Ok(dom[pick])
    }
}

/// Every non-divergent path of one thread under the given value domains.
fn explore_thread(prep: &Prepared, idx: usize, domains: &Domains) -> Result<Vec<ThreadRun>> {
    let (thread, ctx) = &prep.contexts[idx];
    let initial = |pa: u64| prep.image.initial(pa);
    let mut out = Vec::new();
    let mut choices: Vec<usize> = Vec::new();
    loop {
        let mut oracle = ChoiceOracle { domains, initial: &initial, choices: &choices, widths: Vec::new() };
        let run = Executor::new(&prep.program, *thread, ctx.clone()).run(&mut oracle)?;
        let widths = oracle.widths;
        if !run.divergent {
            out.push(run);
        }
        if out.len() > THREAD_PATH_LIMIT {
            return Err(Error::Enumerate(format!("thread {thread} has more than {THREAD_PATH_LIMIT} paths")));
        }
        let full: Vec<usize> = (0..widths.len()).map(|i| choices.get(i).copied().unwrap_or(0)).collect();
        match (0..widths.len()).rev().find(|&i| full[i] + 1 < widths[i]) {
            Some(i) => {
                choices = full[..i].to_vec();
                choices.push(full[i] + 1);
            }
            None => break,
        }
    }
    Ok(out)
}

fn writes_of(runs: &[Vec<ThreadRun>]) -> impl Iterator<Item = (u64, u64)> + '_ {
    runs.iter()
        .flatten()
        .flat_map(|r| r.events.iter())
        .filter(|e| e.is_write())
        .map(|e| (e.pa.expect("write has a PA"), e.value))
}

fn compute_domains(prep: &Prepared, reduction: bool) -> Result<(Domains, Vec<Vec<ThreadRun>>)> {
    let mut domains: Domains = BTreeMap::new();
    if !reduction {
        for (pa, cs) in &prep.image.memory {
            domains.insert(*pa, cs.members().collect());
        }
    }
    for _ in 0..DOMAIN_FIXPOINT_LIMIT {
        let runs = (0..prep.contexts.len()).map(|i| explore_thread(prep, i, &domains)).collect::<Result<Vec<_>>>()?;
        let mut next = domains.clone();
        for (pa, v) in writes_of(&runs) {
            if prep.image.is_table_memory(pa) {
                let allowed = prep.image.memory.get(&pa).map_or(v == 0, |cs| cs.contains(v));
                if !allowed {
                    return Err(Error::Enumerate(format!(
                        "write of {v:#x} to descriptor at {pa:#x} is outside its declared alternatives"
                    )));
                }
            }
            let d = next.entry(pa).or_insert_with(|| vec![prep.image.initial(pa)]);
            if !d.contains(&v) {
                d.push(v);
                d.sort_unstable();
            }
        }
        for d in next.values_mut() {
            d.sort_unstable();
            d.dedup();
        }
        if next == domains {
            return Ok((domains, runs));
        }
        domains = next;
    }
    Err(Error::Enumerate("value domains did not stabilise".into()))
}

struct Odometer {
    widths: Vec<usize>,
    pos: Vec<usize>,
    done: bool,
}

impl Odometer {
    fn new(widths: Vec<usize>) -> Self {
        let done = widths.contains(&0);
        Odometer { pos: vec![0; widths.len()], widths, done }
    }

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let cur = self.pos.clone();
        let mut i = self.widths.len();
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            self.pos[i] += 1;
            if self.pos[i] < self.widths[i] {
                break;
            }
            self.pos[i] = 0;
        }
        Some(cur)
    }
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let x = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, x);
            out.push(p);
        }
    }
    out
}

/// Assemble the events of one choice of per-thread paths.
fn assemble(prep: &Prepared, runs: &[&ThreadRun]) -> (Vec<Event>, Outcome) {
    let mut pas = BTreeSet::new();
    for r in runs {
        for e in &r.events {
            if matches!(e.kind, EventKind::R | EventKind::W | EventKind::T) {
                pas.insert(e.pa.expect("memory event has a PA"));
            }
        }
    }
    let mut events = Vec::new();
    for pa in pas {
        let mut e = Event::new(EventKind::W);
        e.pa = Some(pa);
        e.value = prep.image.initial(pa);
        e.is_iw = true;
        e.id = events.len();
        events.push(e);
    }
    let mut outcome = Outcome::default();
    for (k, r) in runs.iter().enumerate() {
        let offset = events.len();
        let thread = prep.contexts[k].0;
        for e in &r.events {
            let mut e = e.clone();
            e.id = events.len();
            let shift = |s: &BTreeSet<usize>| s.iter().map(|p| p + offset).collect();
            e.deps.addr = shift(&e.deps.addr);
            e.deps.data = shift(&e.deps.data);
            e.deps.ctrl = shift(&e.deps.ctrl);
            events.push(e);
        }
        outcome.threads.insert(thread, r.ctx.clone());
        outcome.faults.insert(thread, r.faults.iter().map(|f| (f.pc, f.fault.va, f.fault.kind)).collect());
    }
    (events, outcome)
}

/// Enumerate every candidate execution, calling `visit` on each.
/// Returns the number of candidates visited.
pub fn for_each_candidate(
    prep: &Prepared,
    budget: Budget,
    mut visit: impl FnMut(&Candidate) -> Result<()>,
) -> Result<usize> {
    let (_, runs) = compute_domains(prep, budget.reduction)?;
    let mut count = 0;
    let mut paths = Odometer::new(runs.iter().map(Vec::len).collect());
    while let Some(pick) = paths.next() {
        let chosen: Vec<&ThreadRun> = pick.iter().enumerate().map(|(k, &i)| &runs[k][i]).collect();
        let (events, outcome) = assemble(prep, &chosen);
        // Read-from options per R/T event.
        let reads: Vec<usize> =
            events.iter().filter(|e| matches!(e.kind, EventKind::R | EventKind::T)).map(|e| e.id).collect();
        let sources: Vec<Vec<usize>> = reads
            .iter()
            .map(|&r| {
                let re = &events[r];
                events
                    .iter()
                    .filter(|w| {
                        w.is_write()
                            && w.pa == re.pa
                            && w.value == re.value
                            && !(w.thread == re.thread && w.instr == re.instr && !w.is_iw)
                    })
                    .map(|w| w.id)
                    .collect()
            })
            .collect();
        if sources.iter().any(Vec::is_empty) {
            continue;
        }
        let mut by_pa: BTreeMap<u64, (usize, Vec<usize>)> = BTreeMap::new();
        for e in &events {
            if e.is_write() {
                let entry = by_pa.entry(e.pa.expect("write has a PA")).or_insert((usize::MAX, Vec::new()));
                if e.is_iw {
                    entry.0 = e.id;
                } else {
                    entry.1.push(e.id);
                }
            }
        }
        let co_options: Vec<(u64, Vec<Vec<usize>>)> = by_pa
            .into_iter()
            .map(|(pa, (iw, ws))| {
                let perms = permutations(&ws).into_iter().map(|p| std::iter::once(iw).chain(p).collect()).collect();
                (pa, perms)
            })
            .collect();
        let mut rf_choice = Odometer::new(sources.iter().map(Vec::len).collect());
        while let Some(rc) = rf_choice.next() {
            let rf: Vec<(usize, usize)> =
                reads.iter().zip(&rc).enumerate().map(|(k, (&r, &i))| (sources[k][i], r)).collect();
            let mut co_choice = Odometer::new(co_options.iter().map(|(_, o)| o.len()).collect());
            while let Some(cc) = co_choice.next() {
                let co: BTreeMap<u64, Vec<usize>> =
                    co_options.iter().zip(&cc).map(|((pa, opts), &i)| (*pa, opts[i].clone())).collect();
                let mut outcome = outcome.clone();
                for (pa, ws) in &co {
                    outcome.memory.insert(*pa, events[*ws.last().expect("non-empty co")].value);
                }
                let cand = Candidate { events: events.clone(), rf: rf.clone(), co, outcome };
                count += 1;
                if count > budget.max_candidates {
                    return Err(Error::Budget(count - 1));
                }
                visit(&cand)?;
            }
        }
    }
    Ok(count)
}

pub fn enumerate_candidates(prep: &Prepared, budget: Budget) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for_each_candidate(prep, budget, |c| {
        out.push(c.clone());
        Ok(())
    })?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Derived relations

/// Event classes and primitive relations of one candidate.
#[derive(Debug, Clone)]
pub struct RelEnv {
    pub n: usize,
    pub all: EventSet,
    pub r: EventSet,
    pub w: EventSet,
    pub t: EventSet,
    pub t_f: EventSet,
    pub iw: EventSet,
    pub fault: EventSet,
    pub fault_r: EventSet,
    pub fault_w: EventSet,
    /// Faults of release stores and acquire loads.
    pub fault_l: EventSet,
    pub fault_a: EventSet,
    pub tlbi: EventSet,
    pub tlbi_s1: EventSet,
    pub tlbi_s2: EventSet,
    pub isb: EventSet,
    pub te: EventSet,
    pub eret: EventSet,
    pub msr: EventSet,
    pub cse: EventSet,
    pub context_change: EventSet,
    pub dmb_full: EventSet,
    pub dmb_ld: EventSet,
    pub dmb_st: EventSet,
    pub dsb_sy: EventSet,
    pub acq_a: EventSet,
    pub acq_q: EventSet,
    pub rel_l: EventSet,
    pub w_inv: EventSet,
    pub w_valid: EventSet,
    /// Writes to translation-table memory.
    pub w_table: EventSet,
    pub stage1: EventSet,
    pub stage2: EventSet,
    /// Program order at instruction granularity, over all events.
    pub io: Relation,
    pub iio: Relation,
    pub po: Relation,
    pub po_loc: Relation,
    pub po_pa: Relation,
    pub loc: Relation,
    pub ext: Relation,
    pub int: Relation,
    /// Same-instruction translation reads.
    pub same_trans: Relation,
    pub rf: Relation,
    pub trf: Relation,
    pub co: Relation,
    pub fr: Relation,
    pub tfr: Relation,
    pub addr: Relation,
    pub data: Relation,
    pub ctrl: Relation,
    pub tdata: Relation,
    pub tlb_affects: Relation,
    pub speculative: Relation,
}

impl RelEnv {
    pub fn internal(&self, r: &Relation) -> Relation {
        r & &self.int
    }

    pub fn external(&self, r: &Relation) -> Relation {
        r & &self.ext
    }
}

fn tlbi_affects(tlbi: &Event, t: &Event) -> bool {
    let op = tlbi.tlbi.expect("TLBI event");
    let tr = t.trans.expect("translation event");
    if !op.kind.broadcast() && tlbi.thread != t.thread {
        return false;
    }
    if op.kind.el2_regime() != t.ctx.el2_regime {
        return false;
    }
    let page = |a: u64| a & descriptor::ADDR_MASK & !(descriptor::PAGE_SIZE - 1);
    match tr.stage {
        Stage::S1 => {
            if !op.kind.affects_stage1() {
                return false;
            }
            if op.va_page.is_some_and(|p| p != page(tr.va)) {
                return false;
            }
            if op.asid.is_some_and(|a| a != t.ctx.asid) {
                return false;
            }
        }
        Stage::S2 => {
            if !op.kind.affects_stage2() {
                return false;
            }
            if op.ipa_page.is_some_and(|p| Some(p) != tr.ipa.map(page)) {
                return false;
            }
        }
    }
    !(op.kind.by_vmid() && !op.kind.el2_regime() && op.vmid != t.ctx.vmid)
}

pub fn derive_relations(c: &Candidate, image_is_table: impl Fn(u64) -> bool) -> RelEnv {
    let ev = &c.events;
    let n = ev.len();
    let set = |p: &dyn Fn(&Event) -> bool| EventSet::from_pred(n, |i| p(&ev[i]));
    let kind = |k: EventKind| set(&|e: &Event| e.kind == k);
    let r = kind(EventKind::R);
    let w = kind(EventKind::W);
    let t = kind(EventKind::T);
    let t_f = set(&|e| e.kind == EventKind::T && !descriptor::is_valid_bits(e.value));
    let iw = set(&|e| e.is_iw);
    let fault = kind(EventKind::Fault);
    let fault_r = set(&|e| e.kind == EventKind::Fault && e.from_r);
    let fault_w = set(&|e| e.kind == EventKind::Fault && e.from_w);
    let fault_l = set(&|e| e.kind == EventKind::Fault && e.release);
    let fault_a = set(&|e| e.kind == EventKind::Fault && e.acquire.is_some());
    let tlbi = kind(EventKind::Tlbi);
    let tlbi_s1 = set(&|e| e.tlbi.is_some_and(|o| o.kind.affects_stage1()));
    let tlbi_s2 = set(&|e| e.tlbi.is_some_and(|o| o.kind.affects_stage2()));
    let isb = kind(EventKind::Isb);
    let te = kind(EventKind::Te);
    let eret = kind(EventKind::Eret);
    let msr = kind(EventKind::Msr);
    let cse = &(&isb | &te) | &eret;
    let barrier = |class: BarrierClass| {
        set(&|e| matches!(e.kind, EventKind::Dmb | EventKind::Dsb) && e.barrier.is_some_and(|b| b.class == class))
    };
    let dmb_full = barrier(BarrierClass::Full);
    let dmb_ld = barrier(BarrierClass::Ld);
    let dmb_st = barrier(BarrierClass::St);
    let dsb_sy = set(&|e| {
        e.kind == EventKind::Dsb && e.barrier.is_some_and(|b| b.class == BarrierClass::Full && b.domain != Domain::Nsh)
    });
    let acq_a = set(&|e| e.kind == EventKind::R && e.acquire == Some(Acquire::A));
    let acq_q = set(&|e| e.kind == EventKind::R && e.acquire == Some(Acquire::Q));
    let rel_l = set(&|e| e.kind == EventKind::W && e.release);
    let w_table = set(&|e| e.is_write() && e.pa.is_some_and(&image_is_table));
    let w_inv = set(&|e| e.is_write() && e.pa.is_some_and(&image_is_table) && !descriptor::is_valid_bits(e.value));
    let w_valid = &w_table - &w_inv;
    let stage1 = set(&|e| e.trans.is_some_and(|tr| tr.stage == Stage::S1));
    let stage2 = set(&|e| e.trans.is_some_and(|tr| tr.stage == Stage::S2));

    let same_thread = |a: &Event, b: &Event| a.thread.is_some() && a.thread == b.thread;
    let io = Relation::from_pred(n, |a, b| same_thread(&ev[a], &ev[b]) && ev[a].instr < ev[b].instr);
    let iio = Relation::from_pred(n, |a, b| {
        same_thread(&ev[a], &ev[b]) && ev[a].instr == ev[b].instr && ev[a].iio < ev[b].iio
    });
    let non_t = t.complement();
    let po = io.restrict(&non_t, &non_t);
    let loc = Relation::from_pred(n, |a, b| ev[a].pa.is_some() && ev[a].pa == ev[b].pa);
    let rw = &r | &w;
    let po_loc = (&po & &loc).restrict(&rw, &rw);
    let po_pa = &io & &loc;
    let int = Relation::from_pred(n, |a, b| same_thread(&ev[a], &ev[b]));
    let ext = &Relation::from_pred(n, |a, b| a != b) - &int;
    let same_trans = Relation::from_pred(n, |a, b| {
        ev[a].kind == EventKind::T
            && ev[b].kind == EventKind::T
            && same_thread(&ev[a], &ev[b])
            && ev[a].instr == ev[b].instr
    });

    let mut rf = Relation::empty(n);
    let mut trf = Relation::empty(n);
    for &(src, dst) in &c.rf {
        if ev[dst].kind == EventKind::T {
            trf.insert(src, dst);
        } else {
            rf.insert(src, dst);
        }
    }
    let mut co = Relation::empty(n);
    for ws in c.co.values() {
        for (i, &a) in ws.iter().enumerate() {
            for &b in &ws[i + 1..] {
                co.insert(a, b);
            }
        }
    }
    let fr = rf.inverse().seq(&co);
    let tfr = trf.inverse().seq(&co);

    let mut addr = Relation::empty(n);
    let mut data = Relation::empty(n);
    let mut ctrl = Relation::empty(n);
    let mut tdata = Relation::empty(n);
    for e in ev {
        for &s in &e.deps.addr {
            match e.kind {
                EventKind::T => tdata.insert(s, e.id),
                EventKind::R | EventKind::W | EventKind::Fault => addr.insert(s, e.id),
                _ => {}
            }
        }
        if matches!(e.kind, EventKind::W | EventKind::Msr) || (e.kind == EventKind::Fault && e.from_w) {
            for &s in &e.deps.data {
                data.insert(s, e.id);
            }
        }
        for &s in &e.deps.ctrl {
            ctrl.insert(s, e.id);
        }
    }
    addr.union_in_place(&tdata.to_set(&t_f));

    let tlb_affects = Relation::from_pred(n, |a, b| {
        ev[a].kind == EventKind::Tlbi && ev[b].kind == EventKind::T && tlbi_affects(&ev[a], &ev[b])
    });
    let speculative = &(&ctrl | &addr.seq(&po)) | &io.from_set(&t);

    RelEnv {
        n,
        all: EventSet::full(n),
        r,
        w,
        t,
        t_f,
        iw,
        fault,
        fault_r,
        fault_w,
        fault_l,
        fault_a,
        tlbi,
        tlbi_s1,
        tlbi_s2,
        isb,
        te,
        eret,
        msr: msr.clone(),
        cse,
        context_change: msr,
        dmb_full,
        dmb_ld,
        dmb_st,
        dsb_sy,
        acq_a,
        acq_q,
        rel_l,
        w_inv,
        w_valid,
        w_table,
        stage1,
        stage2,
        io,
        iio,
        po,
        po_loc,
        po_pa,
        loc,
        ext,
        int,
        same_trans,
        rf,
        trf,
        co,
        fr,
        tfr,
        addr,
        data,
        ctrl,
        tdata,
        tlb_affects,
        speculative,
    }
}

pub fn relations(prep: &Prepared, c: &Candidate) -> RelEnv {
    derive_relations(c, |pa| prep.image.is_table_memory(pa))
}
