//! Finite sets and binary relations over event indices `0..n`, stored as
//! dense bit matrices. This is the algebra the model definitions are
//! written in: composition, union, intersection, inverse, restriction to
//! sets, transitive closure and cycle queries.

use std::fmt;
use std::ops::{BitAnd, BitOr, Not, Sub};

fn words_for(n: usize) -> usize {
    n.div_ceil(64)
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct EventSet {
    n: usize,
    words: Vec<u64>,
}

impl EventSet {
    pub fn empty(n: usize) -> Self {
        EventSet { n, words: vec![0; words_for(n)] }
    }

    pub fn full(n: usize) -> Self {
        let mut s = Self::empty(n);
        for i in 0..n {
            s.insert(i);
        }
        s
    }

    pub fn from_iter<I: IntoIterator<Item = usize>>(n: usize, it: I) -> Self {
        let mut s = Self::empty(n);
        for i in it {
            s.insert(i);
        }
        s
    }

    pub fn from_pred(n: usize, pred: impl Fn(usize) -> bool) -> Self {
        Self::from_iter(n, (0..n).filter(|&i| pred(i)))
    }

    pub fn universe(&self) -> usize {
        self.n
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.n, "element {i} outside universe of {}", self.n);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, i: usize) {
        self.words[i / 64] &= !(1 << (i % 64));
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.n && self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        iter_bits(&self.words)
    }

    fn zip(&self, other: &EventSet, f: impl Fn(u64, u64) -> u64) -> EventSet {
        assert_eq!(self.n, other.n, "set universes differ");
        EventSet { n: self.n, words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn union(&self, other: &EventSet) -> EventSet {
        self.zip(other, |a, b| a | b)
    }

    pub fn inter(&self, other: &EventSet) -> EventSet {
        self.zip(other, |a, b| a & b)
    }

    pub fn minus(&self, other: &EventSet) -> EventSet {
        self.zip(other, |a, b| a & !b)
    }

    pub fn complement(&self) -> EventSet {
        EventSet::full(self.n).minus(self)
    }

    /// `[self]` as a relation: the identity restricted to this set.
    pub fn id(&self) -> Relation {
        let mut r = Relation::empty(self.n);
        for i in self.iter() {
            r.insert(i, i);
        }
        r
    }

    /// Cartesian product `self × other`.
    pub fn cross(&self, other: &EventSet) -> Relation {
        let mut r = Relation::empty(self.n);
        for i in self.iter() {
            r.row_mut(i).copy_from_slice(&other.words);
        }
        r
    }
}

impl fmt::Debug for EventSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl BitOr for &EventSet {
    type Output = EventSet;
    fn bitor(self, rhs: &EventSet) -> EventSet {
        self.union(rhs)
    }
}

impl BitAnd for &EventSet {
    type Output = EventSet;
    fn bitand(self, rhs: &EventSet) -> EventSet {
        self.inter(rhs)
    }
}

impl Sub for &EventSet {
    type Output = EventSet;
    fn sub(self, rhs: &EventSet) -> EventSet {
        self.minus(rhs)
    }
}

impl Not for &EventSet {
    type Output = EventSet;
    fn not(self) -> EventSet {
        self.complement()
    }
}

fn iter_bits(words: &[u64]) -> impl Iterator<Item = usize> + '_ {
    words.iter().enumerate().flat_map(|(wi, &w)| {
        let mut w = w;
        std::iter::from_fn(move || {
            if w == 0 {
                return None;
            }
            let b = w.trailing_zeros() as usize;
            w &= w - 1;
            Some(wi * 64 + b)
        })
    })
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Relation {
    n: usize,
    w: usize,
    bits: Vec<u64>,
}

impl Relation {
    pub fn empty(n: usize) -> Self {
        let w = words_for(n);
        Relation { n, w, bits: vec![0; n * w] }
    }

    pub fn identity(n: usize) -> Self {
        EventSet::full(n).id()
    }

    pub fn from_pairs<I: IntoIterator<Item = (usize, usize)>>(n: usize, it: I) -> Self {
        let mut r = Self::empty(n);
        for (a, b) in it {
            r.insert(a, b);
        }
        r
    }

    pub fn from_pred(n: usize, pred: impl Fn(usize, usize) -> bool) -> Self {
        let mut r = Self::empty(n);
        for a in 0..n {
            for b in 0..n {
                if pred(a, b) {
                    r.insert(a, b);
                }
            }
        }
        r
    }

    pub fn universe(&self) -> usize {
        self.n
    }

    fn row(&self, a: usize) -> &[u64] {
        &self.bits[a * self.w..(a + 1) * self.w]
    }

    fn row_mut(&mut self, a: usize) -> &mut [u64] {
        &mut self.bits[a * self.w..(a + 1) * self.w]
    }

    pub fn insert(&mut self, a: usize, b: usize) {
        assert!(a < self.n && b < self.n, "pair ({a},{b}) outside universe of {}", self.n);
        self.bits[a * self.w + b / 64] |= 1 << (b % 64);
    }

    pub fn remove(&mut self, a: usize, b: usize) {
        self.bits[a * self.w + b / 64] &= !(1 << (b % 64));
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        a < self.n && b < self.n && self.bits[a * self.w + b / 64] & (1 << (b % 64)) != 0
    }

    pub fn successors(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        iter_bits(self.row(a))
    }

    pub fn successor_set(&self, a: usize) -> EventSet {
        EventSet { n: self.n, words: self.row(a).to_vec() }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |a| self.successors(a).map(move |b| (a, b)))
    }

    pub fn len(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    fn zip(&self, other: &Relation, f: impl Fn(u64, u64) -> u64) -> Relation {
        assert_eq!(self.n, other.n, "relation universes differ");
        Relation { n: self.n, w: self.w, bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn union(&self, other: &Relation) -> Relation {
        self.zip(other, |a, b| a | b)
    }

    pub fn union_in_place(&mut self, other: &Relation) {
        assert_eq!(self.n, other.n, "relation universes differ");
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn inter(&self, other: &Relation) -> Relation {
        self.zip(other, |a, b| a & b)
    }

    pub fn minus(&self, other: &Relation) -> Relation {
        self.zip(other, |a, b| a & !b)
    }

    pub fn inverse(&self) -> Relation {
        let mut r = Relation::empty(self.n);
        for (a, b) in self.pairs() {
            r.insert(b, a);
        }
        r
    }

    /// Relational composition `self ; other`.
    pub fn seq(&self, other: &Relation) -> Relation {
        assert_eq!(self.n, other.n, "relation universes differ");
        let mut r = Relation::empty(self.n);
        for a in 0..self.n {
            let mut acc = vec![0u64; self.w];
            for b in self.successors(a) {
                for (x, y) in acc.iter_mut().zip(other.row(b)) {
                    *x |= y;
                }
            }
            r.row_mut(a).copy_from_slice(&acc);
        }
        r
    }

    /// `[dom] ; self ; [rng]`.
    pub fn restrict(&self, dom: &EventSet, rng: &EventSet) -> Relation {
        let mut r = Relation::empty(self.n);
        for a in dom.iter() {
            let src = self.row(a).to_vec();
            for (x, (y, m)) in r.row_mut(a).iter_mut().zip(src.iter().zip(&rng.words)) {
                *x = y & m;
            }
        }
        r
    }

    /// `[dom] ; self`.
    pub fn from_set(&self, dom: &EventSet) -> Relation {
        self.restrict(dom, &EventSet::full(self.n))
    }

    /// `self ; [rng]`.
    pub fn to_set(&self, rng: &EventSet) -> Relation {
        self.restrict(&EventSet::full(self.n), rng)
    }

    pub fn domain(&self) -> EventSet {
        EventSet::from_pred(self.n, |a| self.row(a).iter().any(|&w| w != 0))
    }

    pub fn range(&self) -> EventSet {
        let mut words = vec![0u64; self.w];
        for a in 0..self.n {
            for (x, y) in words.iter_mut().zip(self.row(a)) {
                *x |= y;
            }
        }
        EventSet { n: self.n, words }
    }

    /// `self?`: reflexive closure over the whole universe.
    pub fn optional(&self) -> Relation {
        self.union(&Relation::identity(self.n))
    }

    /// `self^+` by Warshall's algorithm over bit rows.
    pub fn plus(&self) -> Relation {
        let mut r = self.clone();
        for k in 0..self.n {
            let rowk = r.row(k).to_vec();
            if rowk.iter().all(|&w| w == 0) {
                continue;
            }
            for i in 0..self.n {
                if r.contains(i, k) {
                    for (x, y) in r.row_mut(i).iter_mut().zip(&rowk) {
                        *x |= y;
                    }
                }
            }
        }
        r
    }

    pub fn star(&self) -> Relation {
        self.plus().optional()
    }

    pub fn is_irreflexive(&self) -> bool {
        (0..self.n).all(|i| !self.contains(i, i))
    }

    pub fn is_acyclic(&self) -> bool {
        self.find_cycle().is_none()
    }

    /// Some cycle `[e0, e1, …, ek]` with `e_i -> e_{i+1}` and `ek -> e0`
    /// in `self`, if one exists.
    pub fn find_cycle(&self) -> Option<Vec<usize>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let mut mark = vec![Mark::New; self.n];
        let mut parent = vec![usize::MAX; self.n];
        for root in 0..self.n {
            if mark[root] != Mark::New {
                continue;
            }
            let mut stack: Vec<(usize, Vec<usize>)> = vec![(root, self.successors(root).collect())];
            mark[root] = Mark::Open;
            while let Some((node, succs)) = stack.last_mut() {
                let node = *node;
                if let Some(next) = succs.pop() {
                    match mark[next] {
                        Mark::New => {
                            mark[next] = Mark::Open;
                            parent[next] = node;
                            let s = self.successors(next).collect();
                            stack.push((next, s));
                        }
                        Mark::Open => {
                            let mut cycle = vec![node];
                            let mut cur = node;
                            while cur != next {
                                cur = parent[cur];
                                cycle.push(cur);
                            }
                            cycle.reverse();
                            return Some(cycle);
                        }
                        Mark::Done => {}
                    }
                } else {
                    mark[node] = Mark::Done;
                    stack.pop();
                }
            }
        }
        None
    }

    /// A topological order of the universe consistent with `self`, preferring
    /// smaller indices among ready elements. `None` when cyclic.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg = vec![0usize; self.n];
        for (_, b) in self.pairs() {
            indeg[b] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..self.n).filter(|&i| indeg[i] == 0).collect();
        let mut out = Vec::with_capacity(self.n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            out.push(i);
            for j in self.successors(i) {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        (out.len() == self.n).then_some(out)
    }
}

impl fmt::Debug for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.pairs()).finish()
    }
}

impl BitOr for &Relation {
    type Output = Relation;
    fn bitor(self, rhs: &Relation) -> Relation {
        self.union(rhs)
    }
}

impl BitAnd for &Relation {
    type Output = Relation;
    fn bitand(self, rhs: &Relation) -> Relation {
        self.inter(rhs)
    }
}

impl Sub for &Relation {
    type Output = Relation;
    fn sub(self, rhs: &Relation) -> Relation {
        self.minus(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_and_closure() {
        let r = Relation::from_pairs(4, [(0, 1), (1, 2), (2, 3)]);
        assert!(r.seq(&r).contains(0, 2));
        assert!(!r.seq(&r).contains(0, 1));
        let p = r.plus();
        assert!(p.contains(0, 3));
        assert!(p.is_irreflexive());
        assert!(r.is_acyclic());
    }

    #[test]
    fn two_cycle_is_found() {
        let r = Relation::from_pairs(3, [(0, 1), (1, 0)]);
        let c = r.find_cycle().unwrap();
        assert_eq!(c.len(), 2);
        assert!(r.contains(c[0], c[1]) && r.contains(c[1], c[0]));
    }

    #[test]
    fn restriction_and_sets() {
        let r = Relation::from_pairs(4, [(0, 1), (2, 3), (0, 3)]);
        let a = EventSet::from_iter(4, [0]);
        let b = EventSet::from_iter(4, [3]);
        assert_eq!(r.restrict(&a, &b), Relation::from_pairs(4, [(0, 3)]));
        assert_eq!(a.cross(&b), Relation::from_pairs(4, [(0, 3)]));
        assert_eq!((!&a).len(), 3);
    }

    #[test]
    fn topological_order_respects_edges() {
        let r = Relation::from_pairs(4, [(3, 0), (0, 2)]);
        let t = r.topological_order().unwrap();
        let pos = |x| t.iter().position(|&y| y == x).unwrap();
        assert!(pos(3) < pos(0) && pos(0) < pos(2));
        assert!(Relation::from_pairs(2, [(0, 1), (1, 0)]).topological_order().is_none());
    }

    #[test]
    fn large_universe_crosses_word_boundary() {
        let r = Relation::from_pairs(130, [(0, 64), (64, 129), (129, 1)]);
        assert!(r.plus().contains(0, 1));
        assert_eq!(r.range(), EventSet::from_iter(130, [64, 129, 1]));
    }
}
