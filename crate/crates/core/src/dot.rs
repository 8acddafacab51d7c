//! Graphviz rendering of candidate executions.

use crate::candidate::{Candidate, RelEnv};
use crate::event::EventKind;
use crate::model::CycleEdge;
use crate::rel::Relation;
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// Relations drawn in witness graphs; ordering relations are reduced.
pub fn displayed(e: &RelEnv) -> Vec<(&'static str, Relation)> {
    vec![
        ("iio", transitive_reduction(&e.iio)),
        ("po", transitive_reduction(&e.po)),
        ("co", transitive_reduction(&e.co)),
        ("rf", e.rf.clone()),
        ("trf", e.trf.clone()),
        ("fr", e.fr.clone()),
        ("tfr", e.tfr.clone()),
    ]
}

pub fn transitive_reduction(r: &Relation) -> Relation {
    let two_step = r.seq(&r.plus());
    r - &two_step
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn render(title: &str, c: &Candidate, e: &RelEnv, cycle: &[CycleEdge]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "digraph \"{}\" {{", escape(title));
    s.push_str("  node [shape=box, fontname=\"monospace\"];\n");
    if c.events.is_empty() {
        s.push_str("  init [label=\"initial state\"];\n");
    }
    for ev in &c.events {
        let style = if ev.kind == EventKind::T { ", color=blue, fontcolor=blue" } else { "" };
        let _ = writeln!(s, "  e{} [label=\"{}\"{}];", ev.id, escape(&ev.label()), style);
    }
    for (name, r) in displayed(e) {
        for (a, b) in r.pairs() {
            let _ = writeln!(s, "  e{a} -> e{b} [label=\"{name}\"];");
        }
    }
    for edge in cycle {
        let _ = writeln!(
            s,
            "  e{} -> e{} [label=\"cycle:{}\", color=red, fontcolor=red];",
            edge.from,
            edge.to,
            escape(&edge.clause)
        );
    }
    s.push_str("}\n");
    s
}

/// Edges `(from, to, label)` of a graph produced by [`render`].
pub fn parse_edges(dot: &str) -> BTreeSet<(usize, usize, String)> {
    let mut out = BTreeSet::new();
    for line in dot.lines() {
        let line = line.trim();
        let Some((lhs, rest)) = line.split_once(" -> ") else { continue };
        let Some((rhs, attrs)) = rest.split_once(' ') else { continue };
        let node = |n: &str| n.strip_prefix('e').and_then(|x| x.parse::<usize>().ok());
        let Some(label) = attrs.split("label=\"").nth(1).and_then(|x| x.split('"').next()) else { continue };
        if let (Some(a), Some(b)) = (node(lhs), node(rhs)) {
            out.insert((a, b, label.to_string()));
        }
    }
    out
}
