//! Modular decomposition trees of ordering relations graphs.
//!
//! A module is a set of activities that all bear the same relation to every
//! activity outside it. The tree's internal nodes are the strong modules,
//! classified by the relation between their children. Loop annotations are
//! attached to modules after decomposition.

mod decompose;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relations::{ActivityId, Org, OrgDiagnostic, Relation, RelationsError};

pub use decompose::decompose;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Trivial,
    Linear,
    CompleteAnd,
    CompleteXor,
    Primitive,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    #[default]
    None,
    /// Body runs once, then may be re-entered.
    Repeat,
    /// Body may run zero or more times.
    While,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MdtError {
    #[error("ordering relations graph has no activities")]
    EmptyOrg,
    #[error("ordering relations graph is invalid ({} violations)", .0.len())]
    InvalidOrg(Vec<OrgDiagnostic>),
    #[error("loop block {} is not a module; smallest enclosing module is {}", fmt_set(block), fmt_set(nearest))]
    LoopNotAModule {
        block: BTreeSet<ActivityId>,
        nearest: BTreeSet<ActivityId>,
    },
    #[error("loop block mentions unknown activities {}", fmt_set(.0))]
    UnknownActivities(BTreeSet<ActivityId>),
    #[error("a loop annotation needs mode repeat or while")]
    NoLoopMode,
    #[error("loop block is empty")]
    EmptyBlock,
    #[error("primitive module {} has no defined relation between its children", fmt_set(.0))]
    PrimitiveModule(BTreeSet<ActivityId>),
    #[error("malformed tree: {0}")]
    Malformed(String),
}

pub(crate) fn fmt_set(set: &BTreeSet<ActivityId>) -> String {
    let names: Vec<_> = set.iter().map(ActivityId::as_str).collect();
    format!("{{{}}}", names.join(", "))
}

/// Node of a modular decomposition tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawNode", into = "RawNode")]
pub struct MdtNode {
    pub kind: ModuleKind,
    pub loop_mode: LoopMode,
    /// Set on trivial nodes only.
    pub activity: Option<ActivityId>,
    /// Trivial nodes standing for a synthesized invisible activity.
    pub silent: bool,
    pub children: Vec<MdtNode>,
    descendants: BTreeSet<ActivityId>,
}

impl MdtNode {
    pub fn leaf(activity: ActivityId) -> MdtNode {
        MdtNode {
            kind: ModuleKind::Trivial,
            loop_mode: LoopMode::None,
            descendants: BTreeSet::from([activity.clone()]),
            activity: Some(activity),
            silent: false,
            children: Vec::new(),
        }
    }

    pub fn silent_leaf(activity: ActivityId) -> MdtNode {
        MdtNode {
            silent: true,
            ..MdtNode::leaf(activity)
        }
    }

    pub fn composite(kind: ModuleKind, children: Vec<MdtNode>) -> MdtNode {
        let descendants = children
            .iter()
            .flat_map(|c| c.descendants.iter().cloned())
            .collect();
        MdtNode {
            kind,
            loop_mode: LoopMode::None,
            activity: None,
            silent: false,
            children,
            descendants,
        }
    }

    pub fn with_loop(mut self, mode: LoopMode) -> MdtNode {
        self.loop_mode = mode;
        self
    }

    pub fn descendants(&self) -> &BTreeSet<ActivityId> {
        &self.descendants
    }

    /// Visible (non-silent) leaf activities.
    pub fn visible_activities(&self) -> BTreeSet<ActivityId> {
        let mut out = BTreeSet::new();
        self.walk(&mut |n| {
            if let (Some(a), false) = (&n.activity, n.silent) {
                out.insert(a.clone());
            }
        });
        out
    }

    pub fn is_leaf(&self) -> bool {
        self.kind == ModuleKind::Trivial
    }

    /// Whether the node may complete without executing any visible activity.
    pub fn is_nullable(&self) -> bool {
        if self.loop_mode == LoopMode::While {
            return true;
        }
        match self.kind {
            ModuleKind::Trivial => self.silent,
            ModuleKind::CompleteXor => self.children.iter().any(MdtNode::is_nullable),
            _ => self.children.iter().all(MdtNode::is_nullable),
        }
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a MdtNode)) {
        f(self);
        for c in &self.children {
            c.walk(f);
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(MdtNode::node_count).sum::<usize>()
    }

    /// The node whose descendant set is exactly `set`, if any.
    pub fn find(&self, set: &BTreeSet<ActivityId>) -> Option<&MdtNode> {
        if &self.descendants == set {
            return Some(self);
        }
        self.children
            .iter()
            .find(|c| c.descendants.is_superset(set))
            .and_then(|c| c.find(set))
    }

    /// Smallest node whose descendants include `set`.
    pub fn smallest_enclosing(&self, set: &BTreeSet<ActivityId>) -> Option<&MdtNode> {
        if !self.descendants.is_superset(set) {
            return None;
        }
        self.children
            .iter()
            .find_map(|c| c.smallest_enclosing(set))
            .or(Some(self))
    }

    fn find_mut(&mut self, set: &BTreeSet<ActivityId>) -> Option<&mut MdtNode> {
        if &self.descendants == set {
            return Some(self);
        }
        self.children
            .iter_mut()
            .find(|c| c.descendants.is_superset(set))
            .and_then(|c| c.find_mut(set))
    }

    fn smallest_enclosing_mut(&mut self, set: &BTreeSet<ActivityId>) -> Option<&mut MdtNode> {
        if !self.descendants.is_superset(set) {
            return None;
        }
        match self.children.iter().position(|c| c.descendants.is_superset(set)) {
            Some(i) => self.children[i].smallest_enclosing_mut(set),
            None => Some(self),
        }
    }

    /// Makes `set` a node of the tree, grouping children if needed, and returns it.
    ///
    /// Any contiguous run of a linear node's children, and any subset of a
    /// complete node's children, is a module even though it is not a strong
    /// one; such a run is regrouped under a fresh node of the parent's kind.
    /// Returns the smallest enclosing node's descendants when `set` is not a
    /// module.
    pub(crate) fn materialize(
        &mut self,
        set: &BTreeSet<ActivityId>,
    ) -> Result<&mut MdtNode, BTreeSet<ActivityId>> {
        if self.find(set).is_some() {
            return Ok(self.find_mut(set).expect("found above"));
        }
        if !self.descendants.is_superset(set) {
            return Err(self.descendants.clone());
        }
        let parent = self.smallest_enclosing_mut(set).expect("root encloses set");
        let members: Vec<usize> = parent
            .children
            .iter()
            .enumerate()
            .filter(|(_, c)| !c.descendants.is_disjoint(set))
            .map(|(i, _)| i)
            .collect();
        let exact_cover = members
            .iter()
            .all(|&i| parent.children[i].descendants.is_subset(set));
        let contiguous = members.windows(2).all(|w| w[1] == w[0] + 1);
        let groupable = match parent.kind {
            ModuleKind::Linear => contiguous,
            ModuleKind::CompleteAnd | ModuleKind::CompleteXor => true,
            _ => false,
        };
        if !exact_cover || !groupable || members.len() < 2 || members.len() == parent.children.len() {
            return Err(parent.descendants.clone());
        }
        let kind = parent.kind;
        let first = members[0];
        let mut grouped = Vec::with_capacity(members.len());
        for &i in members.iter().rev() {
            grouped.push(parent.children.remove(i));
        }
        grouped.reverse();
        parent.children.insert(first, MdtNode::composite(kind, grouped));
        Ok(&mut parent.children[first])
    }

    /// Recomputes descendant sets bottom-up after structural edits.
    pub(crate) fn refresh(&mut self) {
        for c in &mut self.children {
            c.refresh();
        }
        if !self.children.is_empty() {
            self.descendants = self
                .children
                .iter()
                .flat_map(|c| c.descendants.iter().cloned())
                .collect();
        }
    }

    /// The ordering relations graph this tree encodes (loops ignored).
    pub fn to_org(&self) -> Result<Org, MdtError> {
        let mut org = Org::new(self.descendants.iter().cloned());
        self.fill_org(&mut org)?;
        Ok(org)
    }

    fn fill_org(&self, org: &mut Org) -> Result<(), MdtError> {
        let rel = match self.kind {
            ModuleKind::Trivial => return Ok(()),
            ModuleKind::CompleteAnd => Some(Relation::Concurrent),
            ModuleKind::CompleteXor => Some(Relation::Conflict),
            ModuleKind::Linear => None,
            ModuleKind::Primitive => return Err(MdtError::PrimitiveModule(self.descendants.clone())),
        };
        for (i, ci) in self.children.iter().enumerate() {
            for cj in &self.children[i + 1..] {
                for a in &ci.descendants {
                    for b in &cj.descendants {
                        org.set(a, b, rel.unwrap_or(Relation::Before))
                            .map_err(|e: RelationsError| MdtError::Malformed(e.to_string()))?;
                    }
                }
            }
            ci.fill_org(org)?;
        }
        Ok(())
    }
}

/// True iff every member of `module` bears the same relation to each outside node.
pub fn is_module(org: &Org, module: &BTreeSet<ActivityId>) -> bool {
    let Some(first) = module.iter().next() else {
        return false;
    };
    org.nodes()
        .iter()
        .filter(|v| !module.contains(*v))
        .all(|v| {
            let r = org.relation(first, v);
            module.iter().all(|m| org.relation(m, v) == r)
        })
}

/// Marks the module with descendants `block` as a loop body.
///
/// A contiguous run of a linear node's children (or a subset of a complete
/// node's children) is grouped into a new node first. Fails with the smallest
/// enclosing node when `block` is not a module.
pub fn annotate_loop(mdt: &MdtNode, block: &BTreeSet<ActivityId>, mode: LoopMode) -> Result<MdtNode, MdtError> {
    if mode == LoopMode::None {
        return Err(MdtError::NoLoopMode);
    }
    if block.is_empty() {
        return Err(MdtError::EmptyBlock);
    }
    let unknown: BTreeSet<ActivityId> = block.difference(mdt.descendants()).cloned().collect();
    if !unknown.is_empty() {
        return Err(MdtError::UnknownActivities(unknown));
    }
    let mut out = mdt.clone();
    match out.materialize(block) {
        Ok(node) => node.loop_mode = mode,
        Err(nearest) => {
            return Err(MdtError::LoopNotAModule {
                block: block.clone(),
                nearest,
            })
        }
    }
    out.refresh();
    Ok(out)
}

/// Reported when one loop block lies strictly inside another.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestedLoop {
    pub inner: BTreeSet<ActivityId>,
    pub outer: BTreeSet<ActivityId>,
}

/// Annotates each block independently with `mode`.
///
/// Blocks nested strictly inside other blocks are still annotated, but
/// reported so an analyst can confirm the nesting.
pub fn annotate_loops(
    mdt: &MdtNode,
    blocks: &[BTreeSet<ActivityId>],
    mode: LoopMode,
) -> Result<(MdtNode, Vec<NestedLoop>), MdtError> {
    // outer blocks first so inner groupings land inside them
    let mut ordered: Vec<&BTreeSet<ActivityId>> = blocks.iter().collect();
    ordered.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    ordered.dedup();
    let mut out = mdt.clone();
    for block in &ordered {
        out = annotate_loop(&out, block, mode)?;
    }
    let mut nested = Vec::new();
    for inner in &ordered {
        for outer in &ordered {
            if inner.len() < outer.len() && inner.is_subset(outer) {
                nested.push(NestedLoop {
                    inner: (*inner).clone(),
                    outer: (*outer).clone(),
                });
            }
        }
    }
    Ok((out, nested))
}

/// Sorts the children of order-insensitive nodes by least descendant.
pub fn canonical_form(mdt: &MdtNode) -> MdtNode {
    let mut out = mdt.clone();
    out.children = mdt.children.iter().map(canonical_form).collect();
    if out.kind != ModuleKind::Linear {
        out.children
            .sort_by(|a, b| a.descendants.iter().next().cmp(&b.descendants.iter().next()));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RawNode {
    kind: ModuleKind,
    #[serde(rename = "loop", default)]
    loop_mode: LoopMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activity: Option<ActivityId>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    silent: bool,
    #[serde(default)]
    children: Vec<RawNode>,
}

impl From<MdtNode> for RawNode {
    fn from(n: MdtNode) -> RawNode {
        RawNode {
            kind: n.kind,
            loop_mode: n.loop_mode,
            activity: n.activity,
            silent: n.silent,
            children: n.children.into_iter().map(RawNode::from).collect(),
        }
    }
}

impl TryFrom<RawNode> for MdtNode {
    type Error = String;

    fn try_from(raw: RawNode) -> Result<MdtNode, String> {
        let node = match raw.kind {
            ModuleKind::Trivial => {
                let activity = raw.activity.ok_or("trivial node without activity")?;
                if !raw.children.is_empty() {
                    return Err("trivial node with children".into());
                }
                let mut leaf = MdtNode::leaf(activity);
                leaf.silent = raw.silent;
                leaf
            }
            kind => {
                if raw.activity.is_some() {
                    return Err(format!("{kind:?} node carries an activity"));
                }
                if raw.children.len() < 2 {
                    return Err(format!("{kind:?} node needs at least two children"));
                }
                let children = raw
                    .children
                    .into_iter()
                    .map(MdtNode::try_from)
                    .collect::<Result<Vec<_>, _>>()?;
                let total: usize = children.iter().map(|c| c.descendants.len()).sum();
                let node = MdtNode::composite(kind, children);
                if node.descendants.len() != total {
                    return Err("sibling subtrees share activities".into());
                }
                node
            }
        };
        Ok(node.with_loop(raw.loop_mode))
    }
}
