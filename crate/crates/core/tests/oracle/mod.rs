//! Brute-force candidate enumerator for random micro-tests.
//!
//! Each micro-test has at most two threads and six memory events. Location `x`
//! has at most two descriptor alternatives and may be remapped by a thread;
//! `y` is fixed. The oracle works from the abstract program: it walks through
//! the L3 descriptor of each access, picks every value a read could return,
//! and keeps the assignments for which some write supplies each read.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rvm_core::candidate::{enumerate_candidates, Budget, Candidate};
use rvm_core::descriptor::{self, Attrs, DescKind, Stage};
use rvm_core::event::EventKind;
use rvm_core::litmus::{parse_test, prepare, Prepared};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    X,
    Y,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Load(Var),
    Store(Var, u64),
    /// Write the initial (false) or alternative (true) descriptor of `x`.
    Remap(bool),
}

#[derive(Debug, Clone)]
struct Micro {
    /// Physical page of `x` initially and alternatively; `None` is invalid.
    x_init: Option<usize>,
    x_alt: Option<Option<usize>>,
    threads: Vec<Vec<Op>>,
}

fn gen(rng: &mut StdRng) -> Micro {
    let target = |rng: &mut StdRng| if rng.gen_bool(0.3) { None } else { Some(rng.gen_range(0..2) * 2) };
    let x_init = target(rng);
    let x_alt = if rng.gen_bool(0.7) {
        let mut alt = target(rng);
        while alt == x_init {
            alt = target(rng);
        }
        Some(alt)
    } else {
        None
    };
    let nthreads = rng.gen_range(1..=2);
    let budget = 6;
    let mut total = 0;
    let mut threads = Vec::new();
    for _ in 0..nthreads {
        let mut ops = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            if total == budget {
                break;
            }
            let var = if rng.gen_bool(0.6) { Var::X } else { Var::Y };
            let op = match rng.gen_range(0..3) {
                0 => Op::Load(var),
                1 => Op::Store(var, rng.gen_range(1..=2)),
                _ if x_alt.is_some() => Op::Remap(rng.gen_bool(0.7)),
                _ => Op::Load(var),
            };
            ops.push(op);
            total += 1;
        }
        threads.push(ops);
    }
    Micro { x_init, x_alt, threads }
}

fn render(m: &Micro) -> String {
    let target = |t: Option<usize>| t.map_or("invalid".to_string(), |p| format!("p{}", p + 1));
    let mut s = String::from("[name]\nmicro\n[page_table_setup]\nvirtual x y;\nphysical p1 p2 p3;\n");
    s += &format!("x |-> {};\n", target(m.x_init));
    if let Some(alt) = m.x_alt {
        s += &format!("x ?-> {};\n", target(alt));
    }
    s += "y |-> p2;\nidentity 0x1000 with code;\n[init]\n";
    let desc = |t: Option<usize>| t.map_or("0".to_string(), |p| format!("mkdesc3(oa=p{})", p + 1));
    for (t, ops) in m.threads.iter().enumerate() {
        s += &format!("{t}:PSTATE.EL = 1\n{t}:VBAR_EL1 = 0x1000\n");
        for (k, op) in ops.iter().enumerate() {
            let name = |v: Var| if v == Var::X { "x" } else { "y" };
            match op {
                Op::Load(v) => s += &format!("{t}:X{} = {}\n", 10 + k, name(*v)),
                Op::Store(v, c) => s += &format!("{t}:X{} = {}\n{t}:X{} = {c}\n", 10 + k, name(*v), 13 + k),
                Op::Remap(alt) => {
                    let value = if *alt { m.x_alt.unwrap() } else { m.x_init };
                    s += &format!("{t}:X{} = pte3(x)\n{t}:X{} = {}\n", 10 + k, 13 + k, desc(value));
                }
            }
        }
    }
    for (t, ops) in m.threads.iter().enumerate() {
        s += &format!("[thread {t}]\n");
        for (k, op) in ops.iter().enumerate() {
            match op {
                Op::Load(_) => s += &format!("LDR X{k},[X{}]\n", 10 + k),
                Op::Store(..) | Op::Remap(_) => s += &format!("STR X{},[X{}]\n", 13 + k, 10 + k),
            }
        }
        s += &format!("[handler {t} at 0x1000]\nMRS X20,ELR_EL1\nADD X20,X20,#4\nMSR ELR_EL1,X20\nERET\n");
    }
    s += "[final]\n*y=0\n";
    s
}

/// Addresses and descriptor values the oracle needs.
struct Layout {
    pte_x: u64,
    pte_y: u64,
    page: [u64; 3],
    x_init: u64,
    x_values: Vec<u64>,
}

fn page_desc(pa: u64) -> u64 {
    descriptor::encode(DescKind::Page, pa, 3, Attrs::default_for(Stage::S1)).unwrap()
}

fn layout(m: &Micro, prep: &Prepared) -> Layout {
    let img = &prep.image;
    let root = img.default_root();
    let page = [img.env["p1"].value, img.env["p2"].value, img.env["p3"].value];
    let desc = |t: Option<usize>| t.map_or(0, |p| page_desc(page[p]));
    let pte_x = img.pte(img.env["x"].value, root, 3).unwrap();
    let pte_y = img.pte(img.env["y"].value, root, 3).unwrap();
    assert_eq!(img.initial(pte_x), desc(m.x_init));
    assert_eq!(img.initial(pte_y), page_desc(page[1]));
    let mut x_values = vec![desc(m.x_init)];
    if let Some(alt) = m.x_alt {
        x_values.push(desc(alt));
    }
    Layout { pte_x, pte_y, page, x_init: desc(m.x_init), x_values }
}

#[derive(Debug, Clone)]
struct OEvent {
    thread: usize,
    op: usize,
    kind: EventKind,
    pa: u64,
    value: u64,
}

fn label(events: &[OEvent], i: usize) -> String {
    let e = &events[i];
    let rank = (0..i).filter(|&j| events[j].thread == e.thread).count();
    format!("{}.{}", e.thread, rank)
}

fn signature(events: &[OEvent], rf: &[Option<usize>], co: &BTreeMap<u64, Vec<usize>>) -> String {
    let mut evs: Vec<String> = (0..events.len())
        .map(|i| format!("{}:{:?}@{:x}={:x}", label(events, i), events[i].kind, events[i].pa, events[i].value))
        .collect();
    evs.sort();
    let mut rfs: Vec<String> = (0..events.len())
        .filter(|&i| events[i].kind != EventKind::W)
        .map(|i| format!("{}<-{}", label(events, i), rf[i].map_or("init".to_string(), |w| label(events, w))))
        .collect();
    rfs.sort();
    let cos: Vec<String> = co
        .iter()
        .filter(|(_, ws)| !ws.is_empty())
        .map(|(pa, ws)| format!("{pa:x}:{}", ws.iter().map(|&w| label(events, w)).collect::<Vec<_>>().join(",")))
        .collect();
    format!("{}|{}|{}", evs.join(";"), rfs.join(";"), cos.join(";"))
}

/// Events of one thread given the values its reads return, in order.
fn thread_events(
    lay: &Layout,
    t: usize,
    ops: &[Op],
    remaps: &[u64],
    pte_choice: &mut dyn Iterator<Item = u64>,
    value_choice: &mut dyn Iterator<Item = u64>,
) -> Vec<OEvent> {
    let mut out = Vec::new();
    for (k, op) in ops.iter().enumerate() {
        let ev = |kind, pa, value| OEvent { thread: t, op: k, kind, pa, value };
        let access = |out: &mut Vec<OEvent>, var: Var, pte: &mut dyn Iterator<Item = u64>| -> Option<u64> {
            let (cell, desc) = match var {
                Var::X => (lay.pte_x, pte.next().unwrap()),
                Var::Y => (lay.pte_y, page_desc(lay.page[1])),
            };
            out.push(ev(EventKind::T, cell, desc));
            descriptor::is_valid_bits(desc).then_some(desc & descriptor::ADDR_MASK)
        };
        match *op {
            Op::Load(var) => {
                if let Some(pa) = access(&mut out, var, pte_choice) {
                    out.push(ev(EventKind::R, pa, value_choice.next().unwrap()));
                }
            }
            Op::Store(var, c) => {
                if let Some(pa) = access(&mut out, var, pte_choice) {
                    out.push(ev(EventKind::W, pa, c));
                }
            }
            Op::Remap(alt) => out.push(ev(EventKind::W, lay.pte_x, remaps[alt as usize])),
        }
    }
    out
}

fn count_reads(ops: &[Op], var: Option<Var>) -> usize {
    ops.iter().filter(|op| matches!(op, Op::Load(v) | Op::Store(v, _) if var.is_none_or(|x| x == *v))).count()
}

fn product(widths: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for &w in widths {
        out = out.into_iter().flat_map(|p| (0..w).map(move |i| [p.clone(), vec![i]].concat())).collect();
    }
    out
}

fn permutations(v: &[usize]) -> Vec<Vec<usize>> {
    if v.len() <= 1 {
        return vec![v.to_vec()];
    }
    (0..v.len())
        .flat_map(|i| {
            let mut rest = v.to_vec();
            let x = rest.remove(i);
            permutations(&rest).into_iter().map(move |mut p| {
                p.insert(0, x);
                p
            })
        })
        .collect()
}

fn oracle(m: &Micro, lay: &Layout) -> Vec<String> {
    let remaps = [lay.x_init, *lay.x_values.last().unwrap()];
    let data_values: Vec<u64> = vec![0, 1, 2];
    // Per thread: every sequence of (descriptor values, data values) choices.
    let mut per_thread: Vec<Vec<Vec<OEvent>>> = Vec::new();
    for (t, ops) in m.threads.iter().enumerate() {
        let mut runs = Vec::new();
        let xs = count_reads(ops, Some(Var::X));
        let all = count_reads(ops, None);
        for pte in product(&vec![lay.x_values.len(); xs]) {
            for vals in product(&vec![data_values.len(); all]) {
                let mut p = pte.iter().map(|&i| lay.x_values[i]);
                let mut v = vals.iter().map(|&i| data_values[i]);
                let evs = thread_events(lay, t, ops, &remaps, &mut p, &mut v);
                // The unused tail of a choice vector would duplicate a run.
                let used_x = evs.iter().filter(|e| e.kind == EventKind::T && e.pa == lay.pte_x).count();
                let used_r = evs.iter().filter(|e| e.kind == EventKind::R).count();
                if pte[used_x..].iter().all(|&i| i == 0) && vals[used_r..].iter().all(|&i| i == 0) {
                    runs.push(evs);
                }
            }
        }
        per_thread.push(runs);
    }
    let mut out = Vec::new();
    for pick in product(&per_thread.iter().map(Vec::len).collect::<Vec<_>>()) {
        let events: Vec<OEvent> = pick.iter().enumerate().flat_map(|(t, &i)| per_thread[t][i].clone()).collect();
        let initial = |pa: u64| {
            if pa == lay.pte_x {
                lay.x_init
            } else if pa == lay.pte_y {
                page_desc(lay.page[1])
            } else {
                0
            }
        };
        let reads: Vec<usize> = (0..events.len()).filter(|&i| events[i].kind != EventKind::W).collect();
        let mut options: Vec<Vec<Option<usize>>> = Vec::new();
        for &r in &reads {
            let e = &events[r];
            let mut srcs: Vec<Option<usize>> = Vec::new();
            if initial(e.pa) == e.value {
                srcs.push(None);
            }
            for (w, we) in events.iter().enumerate() {
                let same_instr = we.thread == e.thread && we.op == e.op;
                if we.kind == EventKind::W && we.pa == e.pa && we.value == e.value && !same_instr {
                    srcs.push(Some(w));
                }
            }
            options.push(srcs);
        }
        if options.iter().any(Vec::is_empty) {
            continue;
        }
        let mut writes_by_pa: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            if e.kind == EventKind::W {
                writes_by_pa.entry(e.pa).or_default().push(i);
            }
        }
        let co_choices: Vec<(u64, Vec<Vec<usize>>)> =
            writes_by_pa.iter().map(|(pa, ws)| (*pa, permutations(ws))).collect();
        for rf_pick in product(&options.iter().map(Vec::len).collect::<Vec<_>>()) {
            let mut rf = vec![None; events.len()];
            for (k, &r) in reads.iter().enumerate() {
                rf[r] = options[k][rf_pick[k]];
            }
            for co_pick in product(&co_choices.iter().map(|(_, p)| p.len()).collect::<Vec<_>>()) {
                let co: BTreeMap<u64, Vec<usize>> =
                    co_choices.iter().zip(&co_pick).map(|((pa, ps), &i)| (*pa, ps[i].clone())).collect();
                out.push(signature(&events, &rf, &co));
            }
        }
    }
    out.sort();
    out
}

/// The same signature computed from an enumerated candidate.
fn candidate_signature(c: &Candidate, lay: &Layout) -> String {
    let relevant: Vec<usize> = c
        .events
        .iter()
        .filter(|e| {
            e.thread.is_some()
                && match e.kind {
                    EventKind::R | EventKind::W => true,
                    EventKind::T => e.pa == Some(lay.pte_x) || e.pa == Some(lay.pte_y),
                    _ => false,
                }
        })
        .map(|e| e.id)
        .collect();
    let index: BTreeMap<usize, usize> = relevant.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let events: Vec<OEvent> = relevant
        .iter()
        .map(|&id| {
            let e = &c.events[id];
            OEvent { thread: e.thread.unwrap(), op: e.instr, kind: e.kind, pa: e.pa.unwrap(), value: e.value }
        })
        .collect();
    let rf: Vec<Option<usize>> =
        relevant.iter().map(|&id| c.source_of(id).and_then(|w| index.get(&w).copied())).collect();
    let co: BTreeMap<u64, Vec<usize>> =
        c.co.iter().map(|(pa, ws)| (*pa, ws.iter().filter_map(|w| index.get(w).copied()).collect())).collect();
    signature(&events, &rf, &co)
}

/// Compare enumeration with the brute-force oracle on `count` micro-tests.
/// Returns how many had more than one candidate.
pub fn compare(seed: u64, count: usize) -> Result<usize, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut nontrivial = 0;
    for n in 0..count {
        let m = gen(&mut rng);
        let text = render(&m);
        let prep = prepare(&parse_test(&text).unwrap()).map_err(|e| format!("{e}\n{text}"))?;
        let lay = layout(&m, &prep);
        let mut mine: Vec<String> = enumerate_candidates(&prep, Budget::default())
            .map_err(|e| e.to_string())?
            .iter()
            .map(|c| candidate_signature(c, &lay))
            .collect();
        mine.sort();
        let expected = oracle(&m, &lay);
        if expected.len() > 1 {
            nontrivial += 1;
        }
        if mine != expected {
            let (a, b): (BTreeSet<_>, BTreeSet<_>) = (mine.iter().collect(), expected.iter().collect());
            return Err(format!(
                "micro-test {n}\n{text}\nonly enumerated: {:#?}\nonly oracle: {:#?}",
                a.difference(&b).collect::<Vec<_>>(),
                b.difference(&a).collect::<Vec<_>>()
            ));
        }
    }
    Ok(nontrivial)
}
