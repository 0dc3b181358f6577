//! Brute-force enumeration of the election protocol, written against plain
//! tuples so it shares no code with the checker's model.

use std::collections::{BTreeSet, HashSet, VecDeque};

use detrace_core::checker::{explore, ElectionModel, ElectionParams, ExploreBounds};

const FOLLOWER: u8 = 0;
const CANDIDATE: u8 = 1;
const LEADER: u8 = 2;

/// (term, voted_for (0 = none), role, votes, requested)
type Node = (i64, u64, u8, BTreeSet<u64>, BTreeSet<u64>);
/// (is_response, from, to, term, granted)
type Msg = (bool, u64, u64, i64, bool);
/// Nodes plus the message multiset as a sorted vector.
type World = (Vec<Node>, Vec<Msg>);

fn reset(n: &mut Node, term: i64) {
    *n = (term, 0, FOLLOWER, BTreeSet::new(), BTreeSet::new());
}

fn successors(w: &World, max_term: i64, bug: bool) -> Vec<(String, World)> {
    let count = w.0.len() as u64;
    let mut out = Vec::new();
    let push = |out: &mut Vec<(String, World)>, label: String, mut next: World| {
        next.1.sort();
        out.push((label, next));
    };
    for i in 1..=count {
        let me = &w.0[i as usize - 1];
        if me.2 != LEADER && me.0 < max_term {
            let mut next = w.clone();
            let n = &mut next.0[i as usize - 1];
            *n = (n.0 + 1, i, CANDIDATE, BTreeSet::from([i]), BTreeSet::new());
            push(&mut out, format!("timeout {i}"), next);
        }
        if me.2 == CANDIDATE {
            for j in 1..=count {
                if j != i && !me.4.contains(&j) {
                    let mut next = w.clone();
                    next.0[i as usize - 1].4.insert(j);
                    next.1.push((false, i, j, me.0, false));
                    push(&mut out, format!("request {i}->{j}"), next);
                }
            }
            if me.3.len() as u64 * 2 > count {
                let mut next = w.clone();
                next.0[i as usize - 1].2 = LEADER;
                push(&mut out, format!("lead {i}"), next);
            }
        }
    }
    let distinct: BTreeSet<Msg> = w.1.iter().copied().collect();
    for m in distinct {
        let (resp, from, to, term, granted) = m;
        let mut next = w.clone();
        let at = next.1.iter().position(|x| *x == m).unwrap();
        next.1.remove(at);
        let n = &mut next.0[to as usize - 1];
        if term > n.0 {
            reset(n, term);
        }
        if resp {
            if term == n.0 && n.2 == CANDIDATE && granted {
                n.3.insert(from);
            }
        } else {
            let ok = term == n.0 && (n.1 == 0 || n.1 == from || bug);
            if ok {
                n.1 = from;
            }
            let reply = (true, to, from, n.0, ok);
            next.1.push(reply);
        }
        push(&mut out, format!("deliver {m:?}"), next);
    }
    out
}

fn two_leaders_in_a_term(w: &World) -> bool {
    let terms: Vec<i64> = w.0.iter().filter(|n| n.2 == LEADER).map(|n| n.0).collect();
    let unique: BTreeSet<i64> = terms.iter().copied().collect();
    unique.len() != terms.len()
}

struct Census {
    states: usize,
    transitions: usize,
    violating: usize,
}

fn census(nodes: usize, max_term: i64, bug: bool) -> Census {
    let init: World = (vec![(0, 0, FOLLOWER, BTreeSet::new(), BTreeSet::new()); nodes], vec![]);
    let mut seen = HashSet::from([init.clone()]);
    let mut queue = VecDeque::from([init]);
    let (mut transitions, mut violating) = (0, 0);
    while let Some(w) = queue.pop_front() {
        if two_leaders_in_a_term(&w) {
            violating += 1;
        }
        for (_, next) in successors(&w, max_term, bug) {
            transitions += 1;
            if seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
    }
    Census { states: seen.len(), transitions, violating }
}

fn checker(nodes: u64, max_term: i64, bug: bool) -> (usize, usize, usize) {
    let mut model = ElectionModel::new(ElectionParams { node_count: nodes, max_term }).unwrap();
    if bug {
        model = model.with_double_vote_bug();
    }
    let r = explore(&model, ExploreBounds::default()).unwrap();
    assert!(!r.truncated);
    (r.graph.state_count(), r.graph.transitions().len(), r.violations.len())
}

#[test]
fn two_nodes_one_term_matches_enumeration() {
    let c = census(2, 1, false);
    assert_eq!((c.states, c.transitions, c.violating), (27, 38, 0));
    assert_eq!(checker(2, 1, false), (27, 38, 0));
}

#[test]
fn three_nodes_one_term_matches_enumeration() {
    let c = census(3, 1, false);
    assert_eq!((c.states, c.transitions, c.violating), (5516, 22728, 0));
    assert_eq!(checker(3, 1, false), (5516, 22728, 0));
}

#[test]
fn two_nodes_two_terms_matches_enumeration() {
    let c = census(2, 2, false);
    assert_eq!(checker(2, 2, false), (c.states, c.transitions, 0));
    assert_eq!(c.violating, 0);
}

#[test]
fn double_vote_bug_matches_enumeration() {
    let c = census(3, 1, true);
    assert!(c.violating > 0);
    let (states, transitions, violations) = checker(3, 1, true);
    assert_eq!((states, transitions), (c.states, c.transitions));
    // the checker reports one violation per violating state reached
    assert_eq!(violations, c.violating);
}
