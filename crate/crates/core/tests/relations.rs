//! Relation algebra against a boolean-matrix oracle.

use proptest::prelude::*;
use rvm_core::rel::{EventSet, Relation};

type Matrix = Vec<Vec<bool>>;

fn to_matrix(r: &Relation) -> Matrix {
    let n = r.universe();
    (0..n).map(|a| (0..n).map(|b| r.contains(a, b)).collect()).collect()
}

fn from_matrix(m: &Matrix) -> Relation {
    Relation::from_pred(m.len(), |a, b| m[a][b])
}

fn compose(x: &Matrix, y: &Matrix) -> Matrix {
    let n = x.len();
    (0..n).map(|a| (0..n).map(|b| (0..n).any(|k| x[a][k] && y[k][b])).collect()).collect()
}

fn warshall(x: &Matrix) -> Matrix {
    let n = x.len();
    let mut m = x.clone();
    for k in 0..n {
        for a in 0..n {
            for b in 0..n {
                m[a][b] = m[a][b] || (m[a][k] && m[k][b]);
            }
        }
    }
    m
}

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.25), n), n))
}

fn pair(max: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
    (1..=max).prop_flat_map(|n| {
        let m = || prop::collection::vec(prop::collection::vec(prop::bool::weighted(0.25), n), n);
        (m(), m())
    })
}

proptest! {
    #[test]
    fn union_intersection_difference((x, y) in pair(8)) {
        let (rx, ry) = (from_matrix(&x), from_matrix(&y));
        let n = x.len();
        let zip = |f: fn(bool, bool) -> bool| -> Matrix {
            (0..n).map(|a| (0..n).map(|b| f(x[a][b], y[a][b])).collect()).collect()
        };
        prop_assert_eq!(to_matrix(&rx.union(&ry)), zip(|p, q| p || q));
        prop_assert_eq!(to_matrix(&rx.inter(&ry)), zip(|p, q| p && q));
        prop_assert_eq!(to_matrix(&rx.minus(&ry)), zip(|p, q| p && !q));
    }

    #[test]
    fn composition_and_inverse((x, y) in pair(8)) {
        let (rx, ry) = (from_matrix(&x), from_matrix(&y));
        prop_assert_eq!(to_matrix(&rx.seq(&ry)), compose(&x, &y));
        let n = x.len();
        let inv: Matrix = (0..n).map(|a| (0..n).map(|b| x[b][a]).collect()).collect();
        prop_assert_eq!(to_matrix(&rx.inverse()), inv);
    }

    #[test]
    fn closures(x in matrix(8)) {
        let r = from_matrix(&x);
        let plus = warshall(&x);
        prop_assert_eq!(to_matrix(&r.plus()), plus.clone());
        let n = x.len();
        let star: Matrix = (0..n).map(|a| (0..n).map(|b| a == b || plus[a][b]).collect()).collect();
        prop_assert_eq!(to_matrix(&r.star()), star);
    }

    #[test]
    fn acyclicity_and_witness_cycles(x in matrix(8)) {
        let r = from_matrix(&x);
        let plus = warshall(&x);
        let cyclic = (0..x.len()).any(|a| plus[a][a]);
        prop_assert_eq!(r.is_acyclic(), !cyclic);
        match r.find_cycle() {
            Some(cycle) => {
                prop_assert!(cyclic);
                prop_assert!(!cycle.is_empty());
                for i in 0..cycle.len() {
                    let (a, b) = (cycle[i], cycle[(i + 1) % cycle.len()]);
                    prop_assert!(x[a][b], "cycle edge {}->{} not in relation", a, b);
                }
            }
            None => prop_assert!(!cyclic),
        }
        if let Some(order) = r.topological_order() {
            prop_assert!(!cyclic);
            let pos: Vec<usize> = (0..x.len()).map(|e| order.iter().position(|&o| o == e).unwrap()).collect();
            for (a, b) in r.pairs() {
                prop_assert!(pos[a] < pos[b]);
            }
        } else {
            prop_assert!(cyclic);
        }
    }

    #[test]
    fn set_restriction(x in matrix(8), mask in prop::collection::vec(any::<bool>(), 8)) {
        let n = x.len();
        let r = from_matrix(&x);
        let s = EventSet::from_pred(n, |i| mask[i]);
        let restricted = r.restrict(&s, &s);
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(restricted.contains(a, b), x[a][b] && mask[a] && mask[b]);
                prop_assert_eq!(s.id().contains(a, b), a == b && mask[a]);
            }
        }
        let dom = r.domain();
        for (a, row) in x.iter().enumerate() {
            prop_assert_eq!(dom.contains(a), row.iter().any(|&v| v));
        }
    }
}
