use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ActivityId, Dfg, RelationsError};

/// The three behavioral relation kinds.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    Precedes,
    Concurrent,
    Conflict,
}

/// Relation of an ordered pair (x, y), read from x's side.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    /// x precedes y
    Before,
    /// y precedes x
    After,
    Concurrent,
    Conflict,
}

impl Relation {
    pub fn inverse(self) -> Relation {
        match self {
            Relation::Before => Relation::After,
            Relation::After => Relation::Before,
            r => r,
        }
    }

    pub fn kind(self) -> RelationKind {
        match self {
            Relation::Before | Relation::After => RelationKind::Precedes,
            Relation::Concurrent => RelationKind::Concurrent,
            Relation::Conflict => RelationKind::Conflict,
        }
    }
}

/// A violated ordering-relations-graph invariant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum OrgDiagnostic {
    UnclassifiedPair { a: ActivityId, b: ActivityId },
    /// `first < via < last` holds but `first` and `last` are neither ordered
    /// the same way nor concurrent.
    TransitivityViolation {
        first: ActivityId,
        last: ActivityId,
        via: ActivityId,
    },
    CausalCycle { cycle: Vec<ActivityId> },
}

impl fmt::Display for OrgDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrgDiagnostic::UnclassifiedPair { a, b } => write!(f, "pair {{{a}, {b}}} is unclassified"),
            OrgDiagnostic::TransitivityViolation { first, last, via } => {
                write!(f, "{first} < {via} < {last} but {first} and {last} are not ordered")
            }
            OrgDiagnostic::CausalCycle { cycle } => {
                let names: Vec<_> = cycle.iter().map(ActivityId::as_str).collect();
                write!(f, "causal cycle {}", names.join(" < "))
            }
        }
    }
}

/// Ordering relations graph: a total classification of unordered activity pairs.
///
/// Besides the relation itself, the graph remembers the orientation each pair
/// had when it was first derived as causal. Concurrency injection uses it to
/// put previously injected pairs back before applying a new pair set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOrg", into = "RawOrg")]
pub struct Org {
    nodes: BTreeSet<ActivityId>,
    // key (lo, hi) with lo < hi; value read from lo's side
    rel: BTreeMap<(ActivityId, ActivityId), Relation>,
    // (before, after)
    orientation: BTreeSet<(ActivityId, ActivityId)>,
}

fn key(a: &ActivityId, b: &ActivityId) -> ((ActivityId, ActivityId), bool) {
    if a < b {
        ((a.clone(), b.clone()), false)
    } else {
        ((b.clone(), a.clone()), true)
    }
}

impl Org {
    /// A graph over `nodes` with every pair unclassified.
    pub fn new(nodes: impl IntoIterator<Item = ActivityId>) -> Self {
        Org {
            nodes: nodes.into_iter().collect(),
            ..Org::default()
        }
    }

    pub fn nodes(&self) -> &BTreeSet<ActivityId> {
        &self.nodes
    }

    pub fn contains(&self, id: &ActivityId) -> bool {
        self.nodes.contains(id)
    }

    pub fn relation(&self, a: &ActivityId, b: &ActivityId) -> Option<Relation> {
        let (k, flipped) = key(a, b);
        self.rel
            .get(&k)
            .map(|r| if flipped { r.inverse() } else { *r })
    }

    pub fn precedes(&self, a: &ActivityId, b: &ActivityId) -> bool {
        self.relation(a, b) == Some(Relation::Before)
    }

    pub fn set(&mut self, a: &ActivityId, b: &ActivityId, rel: Relation) -> Result<(), RelationsError> {
        for id in [a, b] {
            if !self.nodes.contains(id) {
                return Err(RelationsError::UnknownActivity(id.clone()));
            }
        }
        if a == b {
            return Err(RelationsError::SelfPair(a.clone()));
        }
        let (k, flipped) = key(a, b);
        self.rel.insert(k, if flipped { rel.inverse() } else { rel });
        Ok(())
    }

    /// Classified pairs as (lo, hi, relation read from lo).
    pub fn pairs(&self) -> impl Iterator<Item = (&ActivityId, &ActivityId, Relation)> {
        self.rel.iter().map(|((a, b), r)| (a, b, *r))
    }

    /// Records `before < after` as the derived causal orientation of the pair.
    pub fn record_orientation(&mut self, before: &ActivityId, after: &ActivityId) {
        self.orientation.remove(&(after.clone(), before.clone()));
        self.orientation.insert((before.clone(), after.clone()));
    }

    /// Recorded orientation of {a, b}: `Some(true)` if a came before b.
    pub fn recorded_orientation(&self, a: &ActivityId, b: &ActivityId) -> Option<bool> {
        if self.orientation.contains(&(a.clone(), b.clone())) {
            Some(true)
        } else if self.orientation.contains(&(b.clone(), a.clone())) {
            Some(false)
        } else {
            None
        }
    }

    pub fn orientations(&self) -> impl Iterator<Item = &(ActivityId, ActivityId)> {
        self.orientation.iter()
    }

    /// Replaces the members of `module` by a single fresh node that takes over
    /// their (uniform) external relations. The caller guarantees `module` is a
    /// module; otherwise the relation of an arbitrary member is used.
    pub fn quotient(&self, module: &BTreeSet<ActivityId>, fresh: ActivityId) -> Org {
        let rep = module.iter().next().cloned();
        let mut nodes: BTreeSet<ActivityId> = self.nodes.difference(module).cloned().collect();
        nodes.insert(fresh.clone());
        let mut out = Org::new(nodes);
        for (a, b, r) in self.pairs() {
            if !module.contains(a) && !module.contains(b) {
                let _ = out.set(a, b, r);
            }
        }
        if let Some(rep) = rep {
            for v in self.nodes.difference(module) {
                if let Some(r) = self.relation(&rep, v) {
                    let _ = out.set(&fresh, v, r);
                }
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOrg {
    nodes: Vec<ActivityId>,
    rel: Vec<RawRel>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    orientation: Vec<(ActivityId, ActivityId)>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawRel {
    Directed(ActivityId, ActivityId, RelationKind, Direction),
    Plain(ActivityId, ActivityId, RelationKind),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Direction {
    direction: DirectionTag,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum DirectionTag {
    Ab,
    Ba,
}

impl From<Org> for RawOrg {
    fn from(org: Org) -> RawOrg {
        let rel = org
            .pairs()
            .map(|(a, b, r)| match r {
                Relation::After => RawRel::Directed(
                    a.clone(),
                    b.clone(),
                    RelationKind::Precedes,
                    Direction {
                        direction: DirectionTag::Ba,
                    },
                ),
                r => RawRel::Plain(a.clone(), b.clone(), r.kind()),
            })
            .collect();
        RawOrg {
            nodes: org.nodes.iter().cloned().collect(),
            rel,
            orientation: org.orientation.into_iter().collect(),
        }
    }
}

impl TryFrom<RawOrg> for Org {
    type Error = String;

    fn try_from(raw: RawOrg) -> Result<Org, String> {
        let mut org = Org::new(raw.nodes);
        for entry in raw.rel {
            let (a, b, kind, reversed) = match entry {
                RawRel::Plain(a, b, k) => (a, b, k, false),
                RawRel::Directed(a, b, k, d) => (a, b, k, d.direction == DirectionTag::Ba),
            };
            if org.relation(&a, &b).is_some() {
                return Err(format!("pair {{{a}, {b}}} is classified twice"));
            }
            let rel = match (kind, reversed) {
                (RelationKind::Precedes, false) => Relation::Before,
                (RelationKind::Precedes, true) => Relation::After,
                (RelationKind::Concurrent, _) => Relation::Concurrent,
                (RelationKind::Conflict, _) => Relation::Conflict,
            };
            org.set(&a, &b, rel).map_err(|e| e.to_string())?;
        }
        for (before, after) in raw.orientation {
            if !org.contains(&before) || !org.contains(&after) || before == after {
                return Err(format!("bad orientation ({before}, {after})"));
            }
            org.record_orientation(&before, &after);
        }
        Ok(org)
    }
}

/// Derives a well-formed ordering relations graph from a directly-follows graph.
///
/// Mutual edges become concurrency; the remaining edges are direct causality,
/// whose transitive closure gives the precedence relation; every other pair is
/// in conflict. Fails with the witness cycle if direct causality is cyclic.
pub fn dfg_to_org(dfg: &Dfg) -> Result<Org, RelationsError> {
    let mutual = dfg.mutual_pairs();
    let nodes: Vec<ActivityId> = dfg.nodes.iter().cloned().collect();
    let index: BTreeMap<&ActivityId, usize> = nodes.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let n = nodes.len();

    let mut succ = vec![Vec::new(); n];
    for (a, b) in &dfg.edges {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if a != b && mutual.contains(&(lo.clone(), hi.clone())) {
            continue;
        }
        succ[index[a]].push(index[b]);
    }

    if let Some(cycle) = find_cycle(&succ) {
        return Err(RelationsError::CyclicCausality {
            cycle: cycle.into_iter().map(|i| nodes[i].clone()).collect(),
        });
    }

    let reach = transitive_closure(&succ);
    let mut org = Org::new(nodes.iter().cloned());
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (&nodes[i], &nodes[j]);
            let rel = if mutual.contains(&(a.clone(), b.clone())) {
                Relation::Concurrent
            } else if reach[i][j] {
                org.record_orientation(a, b);
                Relation::Before
            } else if reach[j][i] {
                org.record_orientation(b, a);
                Relation::After
            } else {
                Relation::Conflict
            };
            org.set(a, b, rel)?;
        }
    }
    Ok(org)
}

/// Replaces the causality of each listed pair by concurrency.
///
/// Concurrency previously injected into `org` (pairs that still carry a
/// recorded causal orientation) is first reverted, so the result depends only
/// on the derived graph and `pairs`. Concurrency that never had an orientation
/// (mutual directly-follows edges) is kept. The surviving precedence is not
/// re-closed.
pub fn inject_concurrency(org: &Org, pairs: &[(ActivityId, ActivityId)]) -> Result<Org, RelationsError> {
    for (a, b) in pairs {
        for id in [a, b] {
            if !org.contains(id) {
                return Err(RelationsError::UnknownActivity(id.clone()));
            }
        }
        if a == b {
            return Err(RelationsError::SelfPair(a.clone()));
        }
    }

    let mut out = org.clone();
    let reverted: Vec<(ActivityId, ActivityId)> = out
        .orientation
        .iter()
        .filter(|(a, b)| out.relation(a, b) == Some(Relation::Concurrent))
        .cloned()
        .collect();
    for (before, after) in &reverted {
        out.set(before, after, Relation::Before)?;
    }

    let mut conflicting: Vec<(ActivityId, ActivityId)> = pairs
        .iter()
        .filter(|(a, b)| out.relation(a, b) == Some(Relation::Conflict))
        .map(|(a, b)| key(a, b).0)
        .collect();
    if !conflicting.is_empty() {
        conflicting.sort();
        conflicting.dedup();
        return Err(RelationsError::ConflictingEvidence { pairs: conflicting });
    }

    for (a, b) in pairs {
        out.set(a, b, Relation::Concurrent)?;
    }
    let diagnostics = verify_org(&out);
    if !diagnostics.is_empty() {
        return Err(RelationsError::InvalidOrg(diagnostics));
    }
    Ok(out)
}

/// Checks the ordering-relations-graph invariants. Empty iff all hold.
///
/// Precedence must be acyclic, and whenever `a < b < c` the pair {a, c} must
/// be `a < c` or concurrent (concurrency may override a transitive edge).
pub fn verify_org(org: &Org) -> Vec<OrgDiagnostic> {
    let nodes: Vec<&ActivityId> = org.nodes.iter().collect();
    let n = nodes.len();
    let mut diagnostics = Vec::new();

    let mut rel = vec![vec![None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            match org.relation(nodes[i], nodes[j]) {
                Some(r) => {
                    rel[i][j] = Some(r);
                    rel[j][i] = Some(r.inverse());
                }
                None => diagnostics.push(OrgDiagnostic::UnclassifiedPair {
                    a: nodes[i].clone(),
                    b: nodes[j].clone(),
                }),
            }
        }
    }

    let mut reported = BTreeSet::new();
    for a in 0..n {
        for b in 0..n {
            if rel[a][b] != Some(Relation::Before) {
                continue;
            }
            for c in 0..n {
                if c == a || rel[b][c] != Some(Relation::Before) {
                    continue;
                }
                let ok = matches!(rel[a][c], Some(Relation::Before) | Some(Relation::Concurrent) | None);
                if !ok && reported.insert((a, c)) {
                    diagnostics.push(OrgDiagnostic::TransitivityViolation {
                        first: nodes[a].clone(),
                        last: nodes[c].clone(),
                        via: nodes[b].clone(),
                    });
                }
            }
        }
    }

    let succ: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| rel[i][j] == Some(Relation::Before)).collect())
        .collect();
    if let Some(cycle) = find_cycle(&succ) {
        diagnostics.push(OrgDiagnostic::CausalCycle {
            cycle: cycle.into_iter().map(|i| nodes[i].clone()).collect(),
        });
    }
    diagnostics
}

/// Some directed cycle, as the sequence of its vertices, if one exists.
pub(crate) fn find_cycle(succ: &[Vec<usize>]) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Grey,
        Black,
    }
    let n = succ.len();
    let mut mark = vec![Mark::White; n];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for root in 0..n {
        if mark[root] != Mark::White {
            continue;
        }
        mark[root] = Mark::Grey;
        stack.push((root, 0));
        while let Some(top) = stack.last_mut() {
            let v = top.0;
            if let Some(&w) = succ[v].get(top.1) {
                top.1 += 1;
                match mark[w] {
                    Mark::White => {
                        mark[w] = Mark::Grey;
                        stack.push((w, 0));
                    }
                    Mark::Grey => {
                        let start = stack.iter().position(|&(u, _)| u == w).expect("grey is on stack");
                        return Some(stack[start..].iter().map(|&(u, _)| u).collect());
                    }
                    Mark::Black => {}
                }
            } else {
                mark[v] = Mark::Black;
                stack.pop();
            }
        }
    }
    None
}

pub(crate) fn transitive_closure(succ: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let n = succ.len();
    let mut reach = vec![vec![false; n]; n];
    for (s, row) in reach.iter_mut().enumerate() {
        let mut stack: Vec<usize> = succ[s].clone();
        while let Some(v) = stack.pop() {
            if !row[v] {
                row[v] = true;
                stack.extend(succ[v].iter().copied());
            }
        }
    }
    reach
}
