//! Block-structured process models synthesized from annotated decomposition trees.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mdt::{fmt_set, LoopMode, MdtNode, ModuleKind};
use crate::relations::{ActivityId, ActivityTable};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<NodeId, String> {
        s.strip_prefix('n')
            .and_then(|n| n.parse().ok())
            .map(NodeId)
            .ok_or_else(|| format!("`{s}` is not a node id"))
    }
}

impl TryFrom<String> for NodeId {
    type Error = String;

    fn try_from(s: String) -> Result<NodeId, String> {
        s.parse()
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> String {
        id.to_string()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowNodeKind {
    Start,
    End,
    Task,
    XorGateway,
    AndGateway,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayRole {
    Split,
    Join,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: NodeId,
    pub kind: FlowNodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activity: Option<ActivityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gateway_role: Option<GatewayRole>,
}

impl FlowNode {
    pub fn is_gateway(&self) -> bool {
        matches!(self.kind, FlowNodeKind::XorGateway | FlowNodeKind::AndGateway)
    }
}

/// A BPMN process graph with one start and one end event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct ProcessModel {
    nodes: BTreeMap<NodeId, FlowNode>,
    flows: Vec<(NodeId, NodeId)>,
    entry: NodeId,
    exit: NodeId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    nodes: Vec<FlowNode>,
    flows: Vec<(NodeId, NodeId)>,
    entry: NodeId,
    exit: NodeId,
}

impl From<ProcessModel> for RawModel {
    fn from(m: ProcessModel) -> RawModel {
        RawModel {
            nodes: m.nodes.into_values().collect(),
            flows: m.flows,
            entry: m.entry,
            exit: m.exit,
        }
    }
}

impl TryFrom<RawModel> for ProcessModel {
    type Error = String;

    fn try_from(raw: RawModel) -> Result<ProcessModel, String> {
        ProcessModel::new(raw.nodes, raw.flows)
    }
}

impl ProcessModel {
    /// Assembles a model, checking the basic shape: unique ids, a single start
    /// and end, flows between known nodes, tasks with activities, gateways with roles.
    pub fn new(nodes: Vec<FlowNode>, flows: Vec<(NodeId, NodeId)>) -> Result<ProcessModel, String> {
        let mut map = BTreeMap::new();
        for n in nodes {
            match n.kind {
                FlowNodeKind::Task if n.activity.is_none() => return Err(format!("task {} has no activity", n.id)),
                FlowNodeKind::XorGateway | FlowNodeKind::AndGateway if n.gateway_role.is_none() => {
                    return Err(format!("gateway {} has no role", n.id))
                }
                _ => {}
            }
            let id = n.id;
            if map.insert(id, n).is_some() {
                return Err(format!("duplicate node id {id}"));
            }
        }
        let single = |kind: FlowNodeKind| -> Result<NodeId, String> {
            let found: Vec<NodeId> = map.values().filter(|n| n.kind == kind).map(|n| n.id).collect();
            match found.as_slice() {
                [id] => Ok(*id),
                _ => Err(format!("expected exactly one {kind:?} node, found {}", found.len())),
            }
        };
        let entry = single(FlowNodeKind::Start)?;
        let exit = single(FlowNodeKind::End)?;
        for (a, b) in &flows {
            if !map.contains_key(a) || !map.contains_key(b) {
                return Err(format!("flow {a} -> {b} references an unknown node"));
            }
        }
        Ok(ProcessModel {
            nodes: map,
            flows,
            entry,
            exit,
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = &FlowNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&FlowNode> {
        self.nodes.get(&id)
    }

    pub fn flows(&self) -> &[(NodeId, NodeId)] {
        &self.flows
    }

    pub fn entry(&self) -> NodeId {
        self.entry
    }

    pub fn exit(&self) -> NodeId {
        self.exit
    }

    pub fn outgoing(&self, id: NodeId) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.flows
            .iter()
            .enumerate()
            .filter(move |(_, (a, _))| *a == id)
            .map(|(i, (_, b))| (i, *b))
    }

    pub fn incoming(&self, id: NodeId) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.flows
            .iter()
            .enumerate()
            .filter(move |(_, (_, b))| *b == id)
            .map(|(i, (a, _))| (i, *a))
    }

    pub fn count(&self, kind: FlowNodeKind) -> usize {
        self.nodes.values().filter(|n| n.kind == kind).count()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &FlowNode> {
        self.nodes.values().filter(|n| n.kind == FlowNodeKind::Task)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthesisError {
    #[error("primitive module {} cannot be structured", fmt_set(.0))]
    PrimitiveModuleUnsupported(BTreeSet<ActivityId>),
    #[error("activity `{0}` is missing from the activity table")]
    UnknownActivity(ActivityId),
}

struct Builder {
    next: u32,
    nodes: Vec<FlowNode>,
    flows: Vec<(NodeId, NodeId)>,
}

impl Builder {
    fn alloc(&mut self, kind: FlowNodeKind, activity: Option<ActivityId>, role: Option<GatewayRole>) -> NodeId {
        let id = NodeId(self.next);
        self.next += 1;
        self.nodes.push(FlowNode {
            id,
            kind,
            activity,
            gateway_role: role,
        });
        id
    }

    fn gateway(&mut self, kind: FlowNodeKind, role: GatewayRole) -> NodeId {
        self.alloc(kind, None, Some(role))
    }

    fn flow(&mut self, a: NodeId, b: NodeId) {
        self.flows.push((a, b));
    }

    /// Returns the fragment's (entry, exit), or `None` for a silent fragment.
    fn build(&mut self, node: &MdtNode) -> Option<(NodeId, NodeId)> {
        let looped = match node.loop_mode {
            LoopMode::None => None,
            _ => Some((
                self.gateway(FlowNodeKind::XorGateway, GatewayRole::Join),
                self.gateway(FlowNodeKind::XorGateway, GatewayRole::Split),
            )),
        };
        let body = self.build_body(node);
        let (Some((join, split)), Some((entry, exit))) = (looped, body) else {
            return body;
        };
        match node.loop_mode {
            LoopMode::Repeat => {
                self.flow(join, entry);
                self.flow(exit, split);
                self.flow(split, join);
            }
            _ => {
                self.flow(join, split);
                self.flow(split, entry);
                self.flow(exit, join);
            }
        }
        Some((join, split))
    }

    fn build_body(&mut self, node: &MdtNode) -> Option<(NodeId, NodeId)> {
        match node.kind {
            ModuleKind::Trivial if node.silent => None,
            ModuleKind::Trivial => {
                let id = self.alloc(FlowNodeKind::Task, node.activity.clone(), None);
                Some((id, id))
            }
            ModuleKind::Linear => {
                let mut chain: Option<(NodeId, NodeId)> = None;
                for child in &node.children {
                    let Some((entry, exit)) = self.build(child) else {
                        continue;
                    };
                    chain = match chain {
                        None => Some((entry, exit)),
                        Some((first, last)) => {
                            self.flow(last, entry);
                            Some((first, exit))
                        }
                    };
                }
                chain
            }
            ModuleKind::CompleteAnd | ModuleKind::CompleteXor => {
                let kind = if node.kind == ModuleKind::CompleteAnd {
                    FlowNodeKind::AndGateway
                } else {
                    FlowNodeKind::XorGateway
                };
                let split = self.gateway(kind, GatewayRole::Split);
                let join = self.gateway(kind, GatewayRole::Join);
                for child in &node.children {
                    match self.build(child) {
                        Some((entry, exit)) => {
                            self.flow(split, entry);
                            self.flow(exit, join);
                        }
                        None => self.flow(split, join),
                    }
                }
                Some((split, join))
            }
            ModuleKind::Primitive => unreachable!("rejected before building"),
        }
    }
}

/// Translates an annotated tree into a block-structured model.
///
/// Node ids follow a preorder walk: the start event is `n0`, every block
/// allocates its gateways before its children, and the end event comes last.
pub fn synthesize(mdt: &MdtNode, activities: &ActivityTable) -> Result<ProcessModel, SynthesisError> {
    let mut error = None;
    mdt.walk(&mut |n| {
        if error.is_some() {
            return;
        }
        if n.kind == ModuleKind::Primitive {
            error = Some(SynthesisError::PrimitiveModuleUnsupported(n.descendants().clone()));
        } else if let (Some(a), false) = (&n.activity, n.silent) {
            if !activities.contains(a) {
                error = Some(SynthesisError::UnknownActivity(a.clone()));
            }
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    let mut b = Builder {
        next: 0,
        nodes: Vec::new(),
        flows: Vec::new(),
    };
    let start = b.alloc(FlowNodeKind::Start, None, None);
    let body = b.build(mdt);
    let end = b.alloc(FlowNodeKind::End, None, None);
    match body {
        Some((entry, exit)) => {
            b.flow(start, entry);
            b.flow(exit, end);
        }
        None => b.flow(start, end),
    }
    Ok(ProcessModel::new(b.nodes, b.flows).expect("builder output is well-formed"))
}

/// Digest of the model's shape, independent of node ids and branch order.
///
/// Colour refinement over the flow graph: each node starts from its kind,
/// role and activity, then repeatedly absorbs the multisets of its
/// predecessors' and successors' colours.
pub fn structure_hash(model: &ProcessModel) -> String {
    let ids: Vec<NodeId> = model.nodes.keys().copied().collect();
    let mut colour: BTreeMap<NodeId, String> = model
        .nodes
        .values()
        .map(|n| {
            let activity = n.activity.as_ref().map(ActivityId::as_str).unwrap_or("");
            (n.id, digest(&format!("{:?}|{:?}|{activity}", n.kind, n.gateway_role)))
        })
        .collect();
    let mut classes = distinct(&colour);
    for _ in 0..ids.len() {
        let next: BTreeMap<NodeId, String> = ids
            .iter()
            .map(|&id| {
                let mut outs: Vec<&str> = model.outgoing(id).map(|(_, b)| colour[&b].as_str()).collect();
                let mut ins: Vec<&str> = model.incoming(id).map(|(_, a)| colour[&a].as_str()).collect();
                outs.sort_unstable();
                ins.sort_unstable();
                (id, digest(&format!("{}|>{}|<{}", colour[&id], outs.join(","), ins.join(","))))
            })
            .collect();
        colour = next;
        let refined = distinct(&colour);
        if refined == classes {
            break;
        }
        classes = refined;
    }
    let mut all: Vec<&str> = colour.values().map(String::as_str).collect();
    all.sort_unstable();
    let mut edges: Vec<String> = model
        .flows
        .iter()
        .map(|(a, b)| format!("{}>{}", colour[a], colour[b]))
        .collect();
    edges.sort_unstable();
    digest(&format!("{}#{}", all.join(","), edges.join(",")))
}

fn distinct(colour: &BTreeMap<NodeId, String>) -> usize {
    colour.values().collect::<BTreeSet<_>>().len()
}

fn digest(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdt::{annotate_loop, decompose};
    use crate::relations::{dfg_to_org, paths_to_dfg, Activity, ExecutionPath};

    fn id(s: &str) -> ActivityId {
        ActivityId::from(s)
    }

    fn table(ids: &str) -> ActivityTable {
        ids.split_whitespace()
            .map(|s| Activity {
                id: id(s),
                label: s.to_uppercase(),
                silent: false,
            })
            .collect()
    }

    fn mdt_of(ps: &[&str]) -> MdtNode {
        let paths: Vec<ExecutionPath> = ps
            .iter()
            .map(|p| ExecutionPath::new(p.split_whitespace().map(id).collect()).unwrap())
            .collect();
        decompose(&dfg_to_org(&paths_to_dfg(&paths)).unwrap()).unwrap()
    }

    #[test]
    fn car_model_shape() {
        let model = synthesize(&mdt_of(&["a b c", "a d e f", "a e d f"]), &table("a b c d e f")).unwrap();
        assert_eq!(model.count(FlowNodeKind::Task), 6);
        assert_eq!(model.count(FlowNodeKind::XorGateway), 2);
        assert_eq!(model.count(FlowNodeKind::AndGateway), 2);
        assert_eq!(model.entry(), NodeId(0));
        assert_eq!(model.exit(), NodeId(11));
        // a, xor split, xor join, b, c, ...
        assert_eq!(model.node(NodeId(1)).unwrap().activity, Some(id("a")));
        assert_eq!(model.node(NodeId(2)).unwrap().gateway_role, Some(GatewayRole::Split));
    }

    #[test]
    fn single_activity_model() {
        let model = synthesize(&MdtNode::leaf(id("x")), &table("x")).unwrap();
        assert_eq!(model.nodes().count(), 3);
        assert_eq!(model.flows(), &[(NodeId(0), NodeId(1)), (NodeId(1), NodeId(2))]);
    }

    #[test]
    fn repeat_and_while_shapes() {
        let mdt = mdt_of(&["a b c"]);
        let b = BTreeSet::from([id("b")]);
        let repeat = synthesize(&annotate_loop(&mdt, &b, LoopMode::Repeat).unwrap(), &table("a b c")).unwrap();
        // n2 join, n3 split, n4 task b
        assert!(repeat.flows().contains(&(NodeId(2), NodeId(4))));
        assert!(repeat.flows().contains(&(NodeId(4), NodeId(3))));
        assert!(repeat.flows().contains(&(NodeId(3), NodeId(2))));
        let wh = synthesize(&annotate_loop(&mdt, &b, LoopMode::While).unwrap(), &table("a b c")).unwrap();
        assert!(wh.flows().contains(&(NodeId(2), NodeId(3))));
        assert!(wh.flows().contains(&(NodeId(3), NodeId(4))));
        assert!(wh.flows().contains(&(NodeId(4), NodeId(2))));
        assert_ne!(structure_hash(&repeat), structure_hash(&wh));
    }

    #[test]
    fn silent_branch_is_a_bypass_flow() {
        let mdt = MdtNode::composite(
            ModuleKind::Linear,
            vec![
                MdtNode::leaf(id("a")),
                MdtNode::composite(
                    ModuleKind::CompleteXor,
                    vec![MdtNode::leaf(id("b")), MdtNode::silent_leaf(id("tau"))],
                ),
            ],
        );
        let model = synthesize(&mdt, &table("a b")).unwrap();
        assert_eq!(model.count(FlowNodeKind::Task), 2);
        assert!(model.flows().contains(&(NodeId(2), NodeId(3))));
    }

    #[test]
    fn primitive_rejected() {
        let mdt = MdtNode::composite(
            ModuleKind::Primitive,
            vec![MdtNode::leaf(id("x")), MdtNode::leaf(id("y"))],
        );
        assert_eq!(
            synthesize(&mdt, &table("x y")),
            Err(SynthesisError::PrimitiveModuleUnsupported(BTreeSet::from([id("x"), id("y")])))
        );
    }

    #[test]
    fn hash_ignores_branch_order_and_ids() {
        let ab = MdtNode::composite(ModuleKind::CompleteAnd, vec![MdtNode::leaf(id("d")), MdtNode::leaf(id("e"))]);
        let ba = MdtNode::composite(ModuleKind::CompleteAnd, vec![MdtNode::leaf(id("e")), MdtNode::leaf(id("d"))]);
        let t = table("d e");
        let h1 = structure_hash(&synthesize(&ab, &t).unwrap());
        assert_eq!(h1, structure_hash(&synthesize(&ba, &t).unwrap()));
        assert_eq!(h1, structure_hash(&synthesize(&ab, &t).unwrap()));
        let xor = MdtNode::composite(ModuleKind::CompleteXor, vec![MdtNode::leaf(id("d")), MdtNode::leaf(id("e"))]);
        assert_ne!(h1, structure_hash(&synthesize(&xor, &t).unwrap()));
    }

    #[test]
    fn model_json_round_trip() {
        let model = synthesize(&mdt_of(&["a b c", "a d e f", "a e d f"]), &table("a b c d e f")).unwrap();
        let json = serde_json::to_value(&model).unwrap();
        assert_eq!(json["entry"], "n0");
        let back: ProcessModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, model);
    }
}
