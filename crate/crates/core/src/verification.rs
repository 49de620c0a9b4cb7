//! Token-game oracles over process models: bounded traces, soundness and path conformance.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relations::{ActivityId, ExecutionPath};
use crate::synthesis::{FlowNodeKind, NodeId, ProcessModel};

pub type Trace = Vec<ActivityId>;

pub const DEFAULT_STATE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerificationError {
    #[error("state space exceeds {cap} states")]
    StateExplosion { cap: usize },
    #[error("more than {cap} partial traces")]
    TraceExplosion { cap: usize },
}

/// Token counts per flow, plus the number of tokens consumed by the end event.
type Marking = Vec<u16>;

struct Net<'a> {
    model: &'a ProcessModel,
    nodes: Vec<NodeId>,
    inputs: Vec<Vec<usize>>,
    outputs: Vec<Vec<usize>>,
    back: Vec<bool>,
    // back edges entering each node, by back-edge ordinal
    back_into: Vec<Vec<usize>>,
    back_ordinal: Vec<Option<usize>>,
    end_slot: usize,
}

struct Firing {
    node: usize,
    consumed: Vec<usize>,
    produced: Vec<usize>,
}

impl<'a> Net<'a> {
    fn new(model: &'a ProcessModel) -> Net<'a> {
        let nodes: Vec<NodeId> = model.nodes().map(|n| n.id).collect();
        let index: HashMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut inputs = vec![Vec::new(); nodes.len()];
        let mut outputs = vec![Vec::new(); nodes.len()];
        for (f, (a, b)) in model.flows().iter().enumerate() {
            outputs[index[a]].push(f);
            inputs[index[b]].push(f);
        }
        let back = back_edges(model, &index, &outputs);
        let mut back_into = vec![Vec::new(); nodes.len()];
        let mut back_ordinal = vec![None; back.len()];
        let mut ordinal = 0;
        for (f, is_back) in back.iter().enumerate() {
            if *is_back {
                back_into[index[&model.flows()[f].1]].push(ordinal);
                back_ordinal[f] = Some(ordinal);
                ordinal += 1;
            }
        }
        Net {
            model,
            end_slot: model.flows().len(),
            nodes,
            inputs,
            outputs,
            back,
            back_into,
            back_ordinal,
        }
    }

    fn back_count(&self) -> usize {
        self.back_ordinal.iter().flatten().count()
    }

    fn kind(&self, node: usize) -> FlowNodeKind {
        self.model.node(self.nodes[node]).expect("indexed node").kind
    }

    fn initial(&self) -> Marking {
        let mut m = vec![0; self.end_slot + 1];
        let start = self.nodes.iter().position(|&n| n == self.model.entry()).expect("entry exists");
        for &f in &self.outputs[start] {
            m[f] += 1;
        }
        m
    }

    fn is_final(&self, m: &Marking) -> bool {
        m[self.end_slot] == 1 && m[..self.end_slot].iter().all(|&t| t == 0)
    }

    fn enabled(&self, m: &Marking) -> Vec<Firing> {
        let mut out = Vec::new();
        for node in 0..self.nodes.len() {
            let ins = &self.inputs[node];
            let outs = &self.outputs[node];
            match self.kind(node) {
                FlowNodeKind::Start => {}
                FlowNodeKind::AndGateway => {
                    if !ins.is_empty() && ins.iter().all(|&f| m[f] > 0) {
                        out.push(Firing {
                            node,
                            consumed: ins.clone(),
                            produced: outs.clone(),
                        });
                    }
                }
                FlowNodeKind::XorGateway => {
                    for &f in ins.iter().filter(|&&f| m[f] > 0) {
                        for &g in outs {
                            out.push(Firing {
                                node,
                                consumed: vec![f],
                                produced: vec![g],
                            });
                        }
                    }
                }
                FlowNodeKind::Task => {
                    for &f in ins.iter().filter(|&&f| m[f] > 0) {
                        out.push(Firing {
                            node,
                            consumed: vec![f],
                            produced: outs.clone(),
                        });
                    }
                }
                FlowNodeKind::End => {
                    for &f in ins.iter().filter(|&&f| m[f] > 0) {
                        out.push(Firing {
                            node,
                            consumed: vec![f],
                            produced: vec![self.end_slot],
                        });
                    }
                }
            }
        }
        out
    }

    fn apply(&self, m: &Marking, firing: &Firing) -> Marking {
        let mut next = m.clone();
        for &f in &firing.consumed {
            next[f] -= 1;
        }
        for &f in &firing.produced {
            next[f] = next[f].saturating_add(1);
        }
        next
    }

    /// Applies loop counters; `None` if a back edge would exceed `bound`.
    fn count(&self, counters: &[u16], firing: &Firing, bound: u16) -> Option<Vec<u16>> {
        let mut next = counters.to_vec();
        if firing.consumed.iter().any(|&f| !self.back[f]) {
            for &k in &self.back_into[firing.node] {
                next[k] = 0;
            }
        }
        for &f in &firing.produced {
            if let Some(Some(k)) = self.back_ordinal.get(f) {
                if next[*k] >= bound {
                    return None;
                }
                next[*k] += 1;
            }
        }
        Some(next)
    }

    fn label(&self, node: usize) -> Option<ActivityId> {
        let n = self.model.node(self.nodes[node]).expect("indexed node");
        match n.kind {
            FlowNodeKind::Task => n.activity.clone(),
            _ => None,
        }
    }
}

/// Flows closing a cycle in a depth-first walk from the start event.
fn back_edges(model: &ProcessModel, index: &HashMap<NodeId, usize>, outputs: &[Vec<usize>]) -> Vec<bool> {
    let flows = model.flows();
    let mut back = vec![false; flows.len()];
    let mut state = vec![0u8; outputs.len()]; // 0 new, 1 on stack, 2 done
    let start = index[&model.entry()];
    let mut stack = vec![(start, 0usize)];
    state[start] = 1;
    while let Some(top) = stack.last_mut() {
        let v = top.0;
        if let Some(&f) = outputs[v].get(top.1) {
            top.1 += 1;
            let w = index[&flows[f].1];
            match state[w] {
                0 => {
                    state[w] = 1;
                    stack.push((w, 0));
                }
                1 => back[f] = true,
                _ => {}
            }
        } else {
            state[v] = 2;
            stack.pop();
        }
    }
    back
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    marking: Marking,
    counters: Vec<u16>,
}

struct Enumerator<'n, 'a> {
    net: &'n Net<'a>,
    bound: u16,
    cap: usize,
    memo: HashMap<State, Rc<BTreeSet<Trace>>>,
    active: HashSet<State>,
    /// Traces held across all memoized suffix sets.
    stored: usize,
}

impl Enumerator<'_, '_> {
    fn suffixes(&mut self, state: State) -> Result<Rc<BTreeSet<Trace>>, VerificationError> {
        if let Some(hit) = self.memo.get(&state) {
            return Ok(hit.clone());
        }
        if self.memo.len() + self.active.len() >= self.cap {
            return Err(VerificationError::StateExplosion { cap: self.cap });
        }
        let mut out = BTreeSet::new();
        if self.net.is_final(&state.marking) {
            out.insert(Vec::new());
        }
        if !self.active.insert(state.clone()) {
            // a silent cycle; it adds no new traces
            return Ok(Rc::new(BTreeSet::new()));
        }
        for firing in self.net.enabled(&state.marking) {
            let Some(counters) = self.net.count(&state.counters, &firing, self.bound) else {
                continue;
            };
            let next = State {
                marking: self.net.apply(&state.marking, &firing),
                counters,
            };
            let tails = self.suffixes(next)?;
            match self.net.label(firing.node) {
                Some(a) => out.extend(tails.iter().map(|t| {
                    let mut trace = Vec::with_capacity(t.len() + 1);
                    trace.push(a.clone());
                    trace.extend(t.iter().cloned());
                    trace
                })),
                None => out.extend(tails.iter().cloned()),
            }
        }
        self.active.remove(&state);
        self.stored += out.len();
        if self.stored > self.cap {
            return Err(VerificationError::TraceExplosion { cap: self.cap });
        }
        let out = Rc::new(out);
        self.memo.insert(state, out.clone());
        Ok(out)
    }
}

/// Completed traces in which each loop's back edge fires at most `loop_bound`
/// times per loop entry.
pub fn enumerate_traces(model: &ProcessModel, loop_bound: u16) -> Result<BTreeSet<Trace>, VerificationError> {
    enumerate_traces_capped(model, loop_bound, DEFAULT_STATE_CAP)
}

/// As [`enumerate_traces`], failing once more than `cap` states or partial traces are held.
pub fn enumerate_traces_capped(
    model: &ProcessModel,
    loop_bound: u16,
    cap: usize,
) -> Result<BTreeSet<Trace>, VerificationError> {
    let net = Net::new(model);
    let mut e = Enumerator {
        net: &net,
        bound: loop_bound,
        cap,
        memo: HashMap::new(),
        active: HashSet::new(),
        stored: 0,
    };
    let initial = State {
        marking: net.initial(),
        counters: vec![0; net.back_count()],
    };
    let traces = e.suffixes(initial)?;
    Ok((*traces).clone())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub option_to_complete: bool,
    pub proper_completion: bool,
    pub dead_nodes: Vec<NodeId>,
    pub states: usize,
}

impl SoundnessReport {
    pub fn is_sound(&self) -> bool {
        self.option_to_complete && self.proper_completion && self.dead_nodes.is_empty()
    }
}

pub fn check_soundness(model: &ProcessModel) -> Result<SoundnessReport, VerificationError> {
    check_soundness_capped(model, DEFAULT_STATE_CAP)
}

pub fn check_soundness_capped(model: &ProcessModel, cap: usize) -> Result<SoundnessReport, VerificationError> {
    let net = Net::new(model);
    let mut seen: HashMap<Marking, usize> = HashMap::new();
    let mut markings: Vec<Marking> = Vec::new();
    let mut preds: Vec<Vec<usize>> = Vec::new();
    let mut fired = vec![false; net.nodes.len()];
    let mut proper = true;
    let mut queue = VecDeque::new();
    let initial = net.initial();
    seen.insert(initial.clone(), 0);
    markings.push(initial);
    preds.push(Vec::new());
    queue.push_back(0);
    if let Some(start) = net.nodes.iter().position(|&n| n == model.entry()) {
        fired[start] = true;
    }
    while let Some(i) = queue.pop_front() {
        let m = markings[i].clone();
        if m[net.end_slot] > 0 && (m[net.end_slot] > 1 || m[..net.end_slot].iter().any(|&t| t > 0)) {
            proper = false;
        }
        for firing in net.enabled(&m) {
            fired[firing.node] = true;
            let next = net.apply(&m, &firing);
            let j = match seen.get(&next) {
                Some(&j) => j,
                None => {
                    if markings.len() >= cap {
                        return Err(VerificationError::StateExplosion { cap });
                    }
                    let j = markings.len();
                    seen.insert(next.clone(), j);
                    markings.push(next);
                    preds.push(Vec::new());
                    queue.push_back(j);
                    j
                }
            };
            preds[j].push(i);
        }
    }
    // backwards reachability from final markings
    let mut can_finish = vec![false; markings.len()];
    let mut stack: Vec<usize> = (0..markings.len()).filter(|&i| net.is_final(&markings[i])).collect();
    for &i in &stack {
        can_finish[i] = true;
    }
    while let Some(j) = stack.pop() {
        for &i in &preds[j] {
            if !can_finish[i] {
                can_finish[i] = true;
                stack.push(i);
            }
        }
    }
    let dead_nodes = net
        .nodes
        .iter()
        .zip(&fired)
        .filter(|(_, f)| !**f)
        .map(|(n, _)| *n)
        .collect();
    Ok(SoundnessReport {
        option_to_complete: can_finish.iter().all(|&c| c),
        proper_completion: proper,
        dead_nodes,
        states: markings.len(),
    })
}

/// Whether the model can replay `path` exactly, with each back edge firing at
/// most `loop_bound` times per loop entry.
pub fn accepts(model: &ProcessModel, path: &[ActivityId], loop_bound: u16) -> Result<bool, VerificationError> {
    let net = Net::new(model);
    let mut seen: HashSet<(State, usize)> = HashSet::new();
    let mut stack = vec![(
        State {
            marking: net.initial(),
            counters: vec![0; net.back_count()],
        },
        0usize,
    )];
    while let Some((state, pos)) = stack.pop() {
        if pos == path.len() && net.is_final(&state.marking) {
            return Ok(true);
        }
        if !seen.insert((state.clone(), pos)) {
            continue;
        }
        if seen.len() > DEFAULT_STATE_CAP {
            return Err(VerificationError::StateExplosion { cap: DEFAULT_STATE_CAP });
        }
        for firing in net.enabled(&state.marking) {
            let next_pos = match net.label(firing.node) {
                Some(a) if path.get(pos) == Some(&a) => pos + 1,
                Some(_) => continue,
                None => pos,
            };
            let Some(counters) = net.count(&state.counters, &firing, loop_bound) else {
                continue;
            };
            stack.push((
                State {
                    marking: net.apply(&state.marking, &firing),
                    counters,
                },
                next_pos,
            ));
        }
    }
    Ok(false)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conformance {
    pub conforms: bool,
    pub counterexamples: Vec<ExecutionPath>,
}

/// Every path must be a bounded trace of the model.
pub fn conforms(paths: &[ExecutionPath], model: &ProcessModel, loop_bound: u16) -> Result<Conformance, VerificationError> {
    let mut counterexamples = Vec::new();
    for p in paths {
        if !accepts(model, p.steps(), loop_bound)? {
            counterexamples.push(p.clone());
        }
    }
    Ok(Conformance {
        conforms: counterexamples.is_empty(),
        counterexamples,
    })
}

/// Whether the model reduces to a single start→end flow under the series,
/// matched-bond and structured-loop rules, i.e. every gateway sits in a
/// properly nested split/join pair.
pub fn is_block_structured(model: &ProcessModel) -> bool {
    let kind: HashMap<NodeId, FlowNodeKind> = model.nodes().map(|n| (n.id, n.kind)).collect();
    let mut edges: Vec<(NodeId, NodeId)> = model.flows().to_vec();
    loop {
        let mut changed = false;
        // series: splice out single-entry single-exit nodes
        for (&n, &k) in &kind {
            if matches!(k, FlowNodeKind::Start | FlowNodeKind::End) {
                continue;
            }
            let ins: Vec<usize> = (0..edges.len()).filter(|&i| edges[i].1 == n).collect();
            let outs: Vec<usize> = (0..edges.len()).filter(|&i| edges[i].0 == n).collect();
            if let ([i], [o]) = (ins.as_slice(), outs.as_slice()) {
                let (a, b) = (edges[*i].0, edges[*o].1);
                if a == n || b == n {
                    continue;
                }
                edges[*i] = (a, b);
                edges.remove(*o);
                changed = true;
            }
        }
        // bond: parallel flows between same-kind gateways
        let mut seen = HashSet::new();
        let mut dup = None;
        for (i, e) in edges.iter().enumerate() {
            if !seen.insert(*e) && kind[&e.0] == kind[&e.1] && kind[&e.0] != FlowNodeKind::Task {
                dup = Some(i);
                break;
            }
        }
        if let Some(i) = dup {
            edges.remove(i);
            changed = true;
        }
        // loop: xor pair j→s and s→j, drop the return flow
        let back = edges.iter().position(|&(s, j)| {
            kind[&s] == FlowNodeKind::XorGateway
                && kind[&j] == FlowNodeKind::XorGateway
                && s != j
                && edges.contains(&(j, s))
                && edges.iter().filter(|e| e.0 == j).count() == 1
                && edges.iter().filter(|e| e.1 == s).count() == 1
        });
        if let Some(i) = back {
            edges.remove(i);
            changed = true;
        }
        if !changed {
            break;
        }
    }
    edges == [(model.entry(), model.exit())]
}
