//! Replaying execution paths over an annotated tree to find while-loops and skipped blocks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdt::{fmt_set, LoopMode, MdtNode, ModuleKind};
use crate::relations::{fresh_id, ActivityId, ExecutionPath};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub path: ExecutionPath,
    pub fit: bool,
    #[serde(rename = "missed_loops")]
    pub missed_loop_modules: Vec<BTreeSet<ActivityId>>,
    #[serde(rename = "skips")]
    pub skipped_blocks: Vec<BTreeSet<ActivityId>>,
    #[serde(rename = "unknown")]
    pub unknown_activities: Vec<ActivityId>,
    #[serde(default)]
    pub residue: Vec<ActivityId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Resolution {
    WhileConversion { module: BTreeSet<ActivityId> },
    SkipInsertion { module: BTreeSet<ActivityId>, silent: ActivityId },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntanglementError {
    #[error("skipped gap {} is not a module; smallest enclosing module is {}", fmt_set(gap), fmt_set(nearest))]
    SkipNotAModule {
        gap: BTreeSet<ActivityId>,
        nearest: BTreeSet<ActivityId>,
    },
    #[error("missed loop {} does not match a node of the tree", fmt_set(.0))]
    UnknownLoop(BTreeSet<ActivityId>),
}

#[derive(Default)]
struct Outcome {
    consumed: usize,
    missed: Vec<BTreeSet<ActivityId>>,
    skipped: Vec<BTreeSet<ActivityId>>,
}

impl Outcome {
    fn absorb(&mut self, other: Outcome) {
        self.consumed += other.consumed;
        self.missed.extend(other.missed);
        self.skipped.extend(other.skipped);
    }
}

/// Consumes as much of `seq` as `node` can explain, starting at the front.
fn consume(node: &MdtNode, seq: &[ActivityId]) -> Outcome {
    if node.loop_mode == LoopMode::None {
        return consume_once(node, seq);
    }
    let mut total = Outcome::default();
    loop {
        let rest = &seq[total.consumed..];
        if !rest.first().is_some_and(|a| node.descendants().contains(a)) {
            break;
        }
        let round = consume_once(node, rest);
        if round.consumed == 0 {
            break;
        }
        total.absorb(round);
    }
    total
}

fn consume_once(node: &MdtNode, seq: &[ActivityId]) -> Outcome {
    match node.kind {
        ModuleKind::Trivial => Outcome {
            consumed: usize::from(!node.silent && seq.first() == node.activity.as_ref()),
            ..Outcome::default()
        },
        ModuleKind::Linear => {
            let mut out = Outcome::default();
            let mut present = Vec::with_capacity(node.children.len());
            for child in &node.children {
                let o = consume(child, &seq[out.consumed..]);
                present.push(o.consumed > 0);
                out.absorb(o);
            }
            if out.consumed > 0 {
                report_gaps(&node.children, &present, true, &mut out);
            }
            out
        }
        ModuleKind::CompleteXor => match seq.first() {
            Some(a) => node
                .children
                .iter()
                .find(|c| c.descendants().contains(a))
                .map(|c| consume(c, seq))
                .unwrap_or_default(),
            None => Outcome::default(),
        },
        ModuleKind::CompleteAnd | ModuleKind::Primitive => consume_interleaved(node, seq),
    }
}

/// Children of an AND node consume their own projections of the longest run
/// of the node's activities. The run is cut back to the first activity some
/// child cannot explain, which separates successive loop iterations.
fn consume_interleaved(node: &MdtNode, seq: &[ActivityId]) -> Outcome {
    let mut limit = seq
        .iter()
        .position(|a| !node.descendants().contains(a))
        .unwrap_or(seq.len());
    loop {
        let mut outcomes = Vec::with_capacity(node.children.len());
        let mut cut = limit;
        for child in &node.children {
            let idx: Vec<usize> = (0..limit).filter(|&i| child.descendants().contains(&seq[i])).collect();
            let proj: Vec<ActivityId> = idx.iter().map(|&i| seq[i].clone()).collect();
            let o = consume(child, &proj);
            if let Some(&first_left) = idx.get(o.consumed) {
                cut = cut.min(first_left);
            }
            outcomes.push(o);
        }
        if cut == limit {
            let mut out = Outcome::default();
            let present: Vec<bool> = outcomes.iter().map(|o| o.consumed > 0).collect();
            for o in outcomes {
                out.absorb(o);
            }
            if out.consumed > 0 {
                report_gaps(&node.children, &present, false, &mut out);
            }
            return out;
        }
        limit = cut;
    }
}

/// Records absent, non-optional children of an entered node. Absent repeat
/// loops are missed loops; other absent children are skips, merged into runs
/// when the node is ordered.
fn report_gaps(children: &[MdtNode], present: &[bool], ordered: bool, out: &mut Outcome) {
    let mut run: BTreeSet<ActivityId> = BTreeSet::new();
    for (child, &here) in children.iter().zip(present) {
        let gap = !here && !child.is_nullable();
        if gap && child.loop_mode == LoopMode::Repeat {
            if ordered && !run.is_empty() {
                out.skipped.push(std::mem::take(&mut run));
            }
            out.missed.push(child.descendants().clone());
        } else if gap {
            run.extend(child.descendants().iter().cloned());
        } else if ordered && !run.is_empty() {
            out.skipped.push(std::mem::take(&mut run));
        }
    }
    if !run.is_empty() {
        out.skipped.push(run);
    }
}

/// Replays one path over the tree. Never fails: problems are reported.
pub fn align_path(path: &ExecutionPath, mdt: &MdtNode) -> AlignmentReport {
    let known = mdt.descendants();
    let mut unknown = Vec::new();
    let mut seq = Vec::with_capacity(path.len());
    for a in path {
        if known.contains(a) {
            seq.push(a.clone());
        } else if !unknown.contains(a) {
            unknown.push(a.clone());
        }
    }
    let outcome = consume(mdt, &seq);
    let residue = seq[outcome.consumed..].to_vec();
    let mut missed = Vec::new();
    for m in outcome.missed {
        if !missed.contains(&m) {
            missed.push(m);
        }
    }
    let mut skipped = Vec::new();
    for s in outcome.skipped {
        if !skipped.contains(&s) {
            skipped.push(s);
        }
    }
    AlignmentReport {
        path: path.clone(),
        fit: missed.is_empty() && skipped.is_empty() && unknown.is_empty() && residue.is_empty(),
        missed_loop_modules: missed,
        skipped_blocks: skipped,
        unknown_activities: unknown,
        residue,
    }
}

/// Whether the node with descendants `set` may already be bypassed.
/// `set` as it reads in the current tree: every maximal subtree whose visible
/// activities fall inside `set` contributes all its descendants, silent ones
/// included. Keeps reports usable after earlier skip insertions.
fn lift(root: &MdtNode, set: &BTreeSet<ActivityId>) -> BTreeSet<ActivityId> {
    fn go(node: &MdtNode, visible: &BTreeSet<ActivityId>, out: &mut BTreeSet<ActivityId>) {
        let own = node.visible_activities();
        if own.is_empty() || own.is_disjoint(visible) {
            return;
        }
        if own.is_subset(visible) {
            out.extend(node.descendants().iter().cloned());
        } else {
            node.children.iter().for_each(|c| go(c, visible, out));
        }
    }
    let visible: BTreeSet<ActivityId> = set.intersection(&root.visible_activities()).cloned().collect();
    let mut out = BTreeSet::new();
    go(root, &visible, &mut out);
    if out.is_empty() {
        set.clone()
    } else {
        out
    }
}

/// Descendants of the deepest node whose visible activities are those of `set`.
/// A skip wrapper around a loop has the same visible activities as the loop.
fn lift_loop(root: &MdtNode, set: &BTreeSet<ActivityId>) -> BTreeSet<ActivityId> {
    let visible: BTreeSet<ActivityId> = set.intersection(&root.visible_activities()).cloned().collect();
    let mut node = root;
    let mut hit = None;
    loop {
        if node.visible_activities() == visible {
            hit = Some(node);
        }
        match node.children.iter().find(|c| c.visible_activities().is_superset(&visible)) {
            Some(c) => node = c,
            None => break,
        }
    }
    hit.map_or_else(|| set.clone(), |n| n.descendants().clone())
}

fn is_optional(root: &MdtNode, set: &BTreeSet<ActivityId>) -> bool {
    fn go(node: &MdtNode, set: &BTreeSet<ActivityId>) -> Option<bool> {
        for (i, child) in node.children.iter().enumerate() {
            if child.descendants() == set {
                let sibling_bypass = node.kind == ModuleKind::CompleteXor
                    && node.children.iter().enumerate().any(|(j, c)| j != i && c.is_nullable());
                return Some(child.is_nullable() || sibling_bypass);
            }
            if child.descendants().is_superset(set) {
                return go(child, set);
            }
        }
        None
    }
    if root.descendants() == set {
        return root.is_nullable();
    }
    go(root, set).unwrap_or(false)
}

/// Applies while-conversions, then skip insertions, from a batch of reports.
///
/// A module that is already a while loop, or already optional, is left alone,
/// so applying the same reports twice changes nothing further.
pub fn resolve(mdt: &MdtNode, reports: &[AlignmentReport]) -> Result<(MdtNode, Vec<Resolution>), EntanglementError> {
    let mut out = mdt.clone();
    let mut resolutions = Vec::new();
    let mut loops: Vec<&BTreeSet<ActivityId>> = Vec::new();
    let mut skips: Vec<&BTreeSet<ActivityId>> = Vec::new();
    for r in reports {
        for m in &r.missed_loop_modules {
            if !loops.contains(&m) {
                loops.push(m);
            }
        }
        for s in &r.skipped_blocks {
            if !skips.contains(&s) {
                skips.push(s);
            }
        }
    }
    for module in loops {
        let module = &lift_loop(&out, module);
        let node = out
            .materialize(module)
            .map_err(|_| EntanglementError::UnknownLoop(module.clone()))?;
        if node.loop_mode == LoopMode::Repeat {
            node.loop_mode = LoopMode::While;
            resolutions.push(Resolution::WhileConversion { module: module.clone() });
        }
    }
    for gap in skips {
        let gap = &lift(&out, gap);
        if is_optional(&out, gap) {
            continue;
        }
        let mut taken = BTreeSet::new();
        out.walk(&mut |n| taken.extend(n.descendants().iter().cloned()));
        let silent = fresh_id("tau", |id| taken.contains(id));
        let node = out.materialize(gap).map_err(|nearest| EntanglementError::SkipNotAModule {
            gap: gap.clone(),
            nearest,
        })?;
        let tau = MdtNode::silent_leaf(silent.clone());
        if node.kind == ModuleKind::CompleteXor && node.loop_mode == LoopMode::None {
            node.children.push(tau);
        } else {
            let inner = std::mem::replace(node, MdtNode::leaf(silent.clone()));
            *node = MdtNode::composite(ModuleKind::CompleteXor, vec![inner, tau]);
        }
        out.refresh();
        resolutions.push(Resolution::SkipInsertion {
            module: gap.clone(),
            silent,
        });
    }
    Ok((out, resolutions))
}
