#![allow(dead_code)]

use std::path::PathBuf;

use pragmos_core::llm_gateway::{ProviderConfig, ScriptedModel};
use pragmos_core::session::{create_session, run_pipeline, SessionState};

pub const FIXTURES: [&str; 6] = ["car", "bicycle", "exam", "skip", "repair", "purchase"];

pub fn fixture_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn description(name: &str) -> String {
    std::fs::read_to_string(fixture_dir(name).join("description.txt")).unwrap()
}

pub fn script(name: &str) -> ScriptedModel {
    serde_json::from_str(&std::fs::read_to_string(fixture_dir(name).join("script.json")).unwrap()).unwrap()
}

pub fn replay(name: &str) -> ProviderConfig {
    ProviderConfig::replay(fixture_dir(name))
}

/// Full pipeline over the recorded answers.
pub fn replayed_session(name: &str) -> SessionState {
    let mut s = create_session(&description(name)).unwrap();
    let client = replay(name).client().unwrap();
    run_pipeline(&mut s, client.as_ref(), 2).unwrap_or_else(|e| panic!("{name}: {e}"));
    s
}

use std::collections::{BTreeMap, BTreeSet};

use pragmos_core::mdt::{LoopMode, MdtNode, ModuleKind};
use pragmos_core::relations::{slugify, ActivityId, Org, Relation};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn id(s: &str) -> ActivityId {
    ActivityId::from(s)
}

pub fn ids(n: usize) -> Vec<ActivityId> {
    (0..n).map(|i| id(&((b'a' + i as u8) as char).to_string())).collect()
}

/// Valid org over `n` nodes: a random DAG closed transitively, some ordered
/// pairs relaxed to concurrency, unordered pairs split between conflict and
/// concurrency.
pub fn random_org(rng: &mut impl Rng, n: usize) -> Org {
    let nodes = ids(n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let density = rng.gen_range(0.0..0.8);
    let mut before = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.gen_bool(density) {
                before[perm[i]][perm[j]] = true;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if before[i][k] && before[k][j] {
                    before[i][j] = true;
                }
            }
        }
    }
    let conc_bias = rng.gen_range(0.0..1.0);
    let mut org = Org::new(nodes.clone());
    for i in 0..n {
        for j in (i + 1)..n {
            let rel = if before[i][j] || before[j][i] {
                let r = if before[i][j] { Relation::Before } else { Relation::After };
                if rng.gen_bool(0.1) {
                    Relation::Concurrent
                } else {
                    r
                }
            } else if rng.gen_bool(conc_bias) {
                Relation::Concurrent
            } else {
                Relation::Conflict
            };
            org.set(&nodes[i], &nodes[j], rel).unwrap();
        }
    }
    org
}

/// Loop-free canonical tree over the given leaves: no child repeats its parent's kind.
pub fn random_tree(rng: &mut impl Rng, leaves: &[ActivityId], parent: Option<ModuleKind>) -> MdtNode {
    if leaves.len() == 1 {
        return MdtNode::leaf(leaves[0].clone());
    }
    let kinds: Vec<ModuleKind> = [ModuleKind::Linear, ModuleKind::CompleteAnd, ModuleKind::CompleteXor]
        .into_iter()
        .filter(|k| Some(*k) != parent)
        .collect();
    let kind = *kinds.choose(rng).unwrap();
    let parts = rng.gen_range(2..=leaves.len());
    let mut cuts: Vec<usize> = (1..leaves.len()).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(parts - 1).collect();
    cuts.sort_unstable();
    let mut children = Vec::new();
    let mut start = 0;
    for end in cuts.into_iter().chain([leaves.len()]) {
        children.push(random_tree(rng, &leaves[start..end], Some(kind)));
        start = end;
    }
    MdtNode::composite(kind, children)
}

pub fn random_mdt(rng: &mut impl Rng, max: usize) -> MdtNode {
    let n = rng.gen_range(1..=max);
    let mut leaves = ids(n);
    leaves.shuffle(rng);
    random_tree(rng, &leaves, None)
}

/// Puts a repeat or while mode on some composite or leaf nodes.
pub fn sprinkle_loops(rng: &mut impl Rng, node: &mut MdtNode) {
    if rng.gen_bool(0.2) {
        node.loop_mode = if rng.gen_bool(0.5) { LoopMode::Repeat } else { LoopMode::While };
    }
    for c in &mut node.children {
        sprinkle_loops(rng, c);
    }
}

/// Brute-force module test straight from the definition.
pub fn brute_is_module(org: &Org, set: &BTreeSet<ActivityId>) -> bool {
    !set.is_empty()
        && org.nodes().iter().filter(|v| !set.contains(*v)).all(|v| {
            let mut rels = set.iter().map(|m| org.relation(m, v));
            let first = rels.next().unwrap();
            rels.all(|r| r == first)
        })
}

pub fn all_modules(org: &Org) -> Vec<BTreeSet<ActivityId>> {
    let nodes: Vec<&ActivityId> = org.nodes().iter().collect();
    (1u32..(1 << nodes.len()))
        .map(|mask| {
            nodes
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, a)| (*a).clone())
                .collect::<BTreeSet<_>>()
        })
        .filter(|s| brute_is_module(org, s))
        .collect()
}

fn overlaps(a: &BTreeSet<ActivityId>, b: &BTreeSet<ActivityId>) -> bool {
    !a.is_disjoint(b) && !a.is_subset(b) && !b.is_subset(a)
}

/// Violations of the decomposition against exhaustive subset enumeration.
pub fn module_violations(org: &Org, tree: &MdtNode) -> Vec<String> {
    use pragmos_core::mdt::is_module;
    let modules = all_modules(org);
    let strong: BTreeSet<BTreeSet<ActivityId>> = modules
        .iter()
        .filter(|m| modules.iter().all(|o| !overlaps(m, o)))
        .cloned()
        .collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    tree.walk(&mut |n| {
        let d = n.descendants().clone();
        if !is_module(org, &d) || !brute_is_module(org, &d) {
            out.push(format!("{d:?} is not a module"));
        }
        if !strong.contains(&d) {
            out.push(format!("{d:?} is not strong"));
        }
        if !n.is_leaf() {
            if let Some(v) = quotient_violation(org, n) {
                out.push(v);
            }
        }
        seen.insert(d);
    });
    for s in strong.difference(&seen) {
        out.push(format!("strong module {s:?} missing from the tree"));
    }
    out
}

/// The children of `node` contracted to one representative each must form a
/// valid org of the node's kind.
fn quotient_violation(org: &Org, node: &MdtNode) -> Option<String> {
    use pragmos_core::relations::verify_org;
    let reps: Vec<ActivityId> = node.children.iter().map(|c| c.descendants().iter().next().unwrap().clone()).collect();
    let mut q = Org::new(reps.clone());
    for i in 0..reps.len() {
        for j in (i + 1)..reps.len() {
            for a in node.children[i].descendants() {
                for b in node.children[j].descendants() {
                    if org.relation(a, b) != org.relation(&reps[i], &reps[j]) {
                        return Some(format!("children of {:?} are not uniformly related", node.descendants()));
                    }
                }
            }
            q.set(&reps[i], &reps[j], org.relation(&reps[i], &reps[j]).unwrap()).unwrap();
        }
    }
    if !verify_org(&q).is_empty() {
        return Some(format!("quotient of {:?} is invalid", node.descendants()));
    }
    let uniform = |r: Relation| {
        (0..reps.len()).all(|i| (i + 1..reps.len()).all(|j| q.relation(&reps[i], &reps[j]) == Some(r)))
    };
    let ok = match node.kind {
        ModuleKind::Linear => uniform(Relation::Before),
        ModuleKind::CompleteAnd => uniform(Relation::Concurrent),
        ModuleKind::CompleteXor => uniform(Relation::Conflict),
        ModuleKind::Primitive => {
            // a prime quotient has no nontrivial module
            all_modules(&q).iter().all(|m| m.len() == 1 || m.len() == reps.len())
        }
        ModuleKind::Trivial => false,
    };
    (!ok).then(|| format!("quotient of {:?} does not match kind {:?}", node.descendants(), node.kind))
}

/// Tree from compact notation: `L(..)` linear, `A(..)` and, `X(..)` xor,
/// names for leaves, `~` for the silent leaf `tau`, suffix `*` repeat and
/// `?` while. Leaf names go through `labels` and are slugged.
pub fn tree(notation: &str, labels: &BTreeMap<&str, &str>) -> MdtNode {
    fn parse(tokens: &[String], pos: &mut usize, labels: &BTreeMap<&str, &str>) -> MdtNode {
        let tok = tokens[*pos].clone();
        *pos += 1;
        let mut node = match tok.as_str() {
            "L(" | "A(" | "X(" => {
                let kind = match tok.as_str() {
                    "L(" => ModuleKind::Linear,
                    "A(" => ModuleKind::CompleteAnd,
                    _ => ModuleKind::CompleteXor,
                };
                let mut children = Vec::new();
                while tokens[*pos] != ")" {
                    children.push(parse(tokens, pos, labels));
                }
                *pos += 1;
                MdtNode::composite(kind, children)
            }
            "~" => MdtNode::silent_leaf(id("tau")),
            name => MdtNode::leaf(id(&slugify(labels.get(name).copied().unwrap_or(name)))),
        };
        while *pos < tokens.len() && (tokens[*pos] == "*" || tokens[*pos] == "?") {
            node.loop_mode = if tokens[*pos] == "*" { LoopMode::Repeat } else { LoopMode::While };
            *pos += 1;
        }
        node
    }
    let spaced = notation
        .replace('(', "( ")
        .replace(')', " ) ")
        .replace('*', " * ")
        .replace('?', " ? ");
    let tokens: Vec<String> = spaced.split_whitespace().map(str::to_string).collect();
    let mut pos = 0;
    let node = parse(&tokens, &mut pos, labels);
    assert_eq!(pos, tokens.len(), "trailing tokens in {notation}");
    node
}

/// Hand-derived final tree for each fixture, in `tree` notation.
pub fn expected(name: &str) -> (&'static str, BTreeMap<&'static str, &'static str>) {
    let (notation, pairs): (&str, &[(&str, &str)]) = match name {
        "car" => (
            "L(a X(L(b c) L(A(d e) f)))",
            &[
                ("a", "Decide Payment Method"),
                ("b", "Bring Total Amount"),
                ("c", "Complete Cash Transaction"),
                ("d", "Fill Out Loan Application"),
                ("e", "Check Customer Information"),
                ("f", "Complete Financed Transaction"),
            ],
        ),
        "bicycle" => (
            "L(a X(b L(c A(d e) A(L(f X(g h))* i) j k)))",
            &[
                ("a", "Receive Order"),
                ("b", "Reject Order"),
                ("c", "Accept Order"),
                ("d", "Inform Storehouse"),
                ("e", "Inform Engineering"),
                ("f", "Process Part List"),
                ("g", "Reserve Parts"),
                ("h", "Backorder Parts"),
                ("i", "Complete Preparation"),
                ("j", "Assemble Bicycle"),
                ("k", "Ship Bicycle"),
            ],
        ),
        "exam" => (
            "L(a b c L(d e)? f)",
            &[
                ("a", "Log into university website"),
                ("b", "Complete online exam"),
                ("c", "Grade exam"),
                ("d", "Complete retake exam"),
                ("e", "Grade retake exam"),
                ("f", "Register grade"),
            ],
        ),
        "skip" => (
            "L(a X(L(b c) ~) d)",
            &[
                ("a", "Receive application"),
                ("b", "Request references"),
                ("c", "Review references"),
                ("d", "Decide on application"),
            ],
        ),
        "repair" => (
            "L(a b c X(d A(i j)))",
            &[
                ("a", "Receive defective computer"),
                ("b", "Assess computer defect"),
                ("c", "Provide cost calculation"),
                ("d", "Return computer unrepaired"),
                ("i", "Repair hardware defect"),
                ("j", "Fix software configuration"),
            ],
        ),
        "purchase" => (
            "L(a b X(c L(d A(e f) L(g h)* i)))",
            &[
                ("a", "Submit purchase request"),
                ("b", "Check budget"),
                ("c", "Reject request"),
                ("d", "Approve request"),
                ("e", "Order goods"),
                ("f", "Notify requester"),
                ("g", "Receive delivery"),
                ("h", "Inspect delivery"),
                ("i", "Pay invoice"),
            ],
        ),
        other => panic!("no expectation for {other}"),
    };
    (notation, pairs.iter().copied().collect())
}

pub fn expected_tree(name: &str) -> MdtNode {
    let (notation, labels) = expected(name);
    tree(notation, &labels)
}

/// Label sequences as slug-id paths.
pub fn slug_paths(paths: &[Vec<String>]) -> Vec<pragmos_core::relations::ExecutionPath> {
    paths
        .iter()
        .map(|p| pragmos_core::relations::ExecutionPath::new(p.iter().map(|l| id(&slugify(l))).collect()).unwrap())
        .collect()
}

use pragmos_core::bpmn_io::{
    AlignmentArtifact, Artifact, DescriptionArtifact, LoopsArtifact, MdtArtifact, ModelArtifact, PairsArtifact,
    PathsArtifact, SlotName,
};
use pragmos_core::relations::{Activity, ActivityTable, ExecutionPath};
use pragmos_core::verification::Trace;

const WORDS: [&str; 12] = [
    "Check", "stock", "Send \"invoice\"", "Prüfen", "a/b", "x~y", "Ship", "order", "Approve", "  padded", "日本", "&<>",
];

pub fn random_label(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..=3);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let label = words.join(" ");
    if label.trim().is_empty() {
        "Task".into()
    } else {
        label
    }
}

fn label_lists(rng: &mut impl Rng, max_lists: usize) -> Vec<Vec<String>> {
    (0..rng.gen_range(0..=max_lists))
        .map(|_| (0..rng.gen_range(1..=4)).map(|_| random_label(rng)).collect())
        .collect()
}

pub fn id_table(tree: &MdtNode) -> ActivityTable {
    let mut t = ActivityTable::new();
    tree.walk(&mut |n| {
        if let Some(a) = &n.activity {
            t.insert(Activity {
                id: a.clone(),
                label: if n.silent { String::new() } else { a.as_str().to_uppercase() },
                silent: n.silent,
            })
            .unwrap();
        }
    });
    t
}

pub fn random_artifact(rng: &mut impl Rng, slot: SlotName) -> Artifact {
    use pragmos_core::abstraction::{AbstractionEntry, AbstractionTable};
    use pragmos_core::entanglement::{align_path, resolve};
    use pragmos_core::mdt::NestedLoop;
    use pragmos_core::relations::{dfg_to_org, paths_to_dfg};
    use pragmos_core::session::Provenance;
    use pragmos_core::synthesis::{structure_hash, synthesize};
    use pragmos_core::verification::enumerate_traces;
    match slot {
        SlotName::Description => Artifact::Description(DescriptionArtifact {
            description: format!("{} {}", random_label(rng), random_label(rng)),
        }),
        SlotName::Paths => {
            let mut paths = label_lists(rng, 4);
            if paths.is_empty() {
                paths.push(vec![random_label(rng)]);
            }
            Artifact::Paths(PathsArtifact { paths })
        }
        SlotName::Org => {
            if rng.gen_bool(0.5) {
                let n = rng.gen_range(1..=6);
                Artifact::Org(random_org(rng, n))
            } else {
                // orgs derived from logs carry recorded orientations
                let tree = random_mdt(rng, 5);
                let model = synthesize(&tree, &id_table(&tree)).unwrap();
                let paths: Vec<ExecutionPath> = enumerate_traces(&model, 0)
                    .unwrap()
                    .into_iter()
                    .map(|t| ExecutionPath::new(t).unwrap())
                    .collect();
                Artifact::Org(dfg_to_org(&paths_to_dfg(&paths)).unwrap())
            }
        }
        SlotName::Concurrency => Artifact::Concurrency(PairsArtifact {
            pairs: (0..rng.gen_range(0..4)).map(|_| (random_label(rng), random_label(rng))).collect(),
        }),
        SlotName::Loops => Artifact::Loops(LoopsArtifact { loops: label_lists(rng, 3) }),
        SlotName::Mdt => {
            let mut tree = random_mdt(rng, 6);
            sprinkle_loops(rng, &mut tree);
            let d: Vec<ActivityId> = tree.descendants().iter().cloned().collect();
            let nested_loops = if d.len() > 1 && rng.gen_bool(0.3) {
                vec![NestedLoop {
                    inner: d[..1].iter().cloned().collect(),
                    outer: d.iter().cloned().collect(),
                }]
            } else {
                Vec::new()
            };
            Artifact::Mdt(MdtArtifact { tree, nested_loops })
        }
        SlotName::Alignment => {
            let mut tree = random_mdt(rng, 5);
            sprinkle_loops(rng, &mut tree);
            let all: Vec<ActivityId> = tree.descendants().iter().cloned().collect();
            let reports: Vec<_> = (0..rng.gen_range(0..3))
                .map(|_| {
                    let mut steps: Vec<ActivityId> =
                        (0..rng.gen_range(1..=5)).map(|_| all.choose(rng).unwrap().clone()).collect();
                    if rng.gen_bool(0.2) {
                        steps.push(id("zz"));
                    }
                    align_path(&ExecutionPath::new(steps).unwrap(), &tree)
                })
                .collect();
            let resolutions = resolve(&tree, &reports).map(|(_, r)| r).unwrap_or_default();
            Artifact::Alignment(AlignmentArtifact { reports, resolutions })
        }
        SlotName::Abstraction => Artifact::Abstraction(AbstractionTable {
            entries: (0..rng.gen_range(0..3))
                .map(|i| AbstractionEntry {
                    id: id(&format!("abs-{i}")),
                    label: random_label(rng),
                    variants: {
                        let mut v = label_lists(rng, 2);
                        if v.is_empty() {
                            v.push(vec![random_label(rng)]);
                        }
                        v
                    },
                })
                .collect(),
            provenance: *[None, Some(Provenance::Llm), Some(Provenance::Human)].choose(rng).unwrap(),
        }),
        SlotName::Model => {
            let mut tree = random_mdt(rng, 6);
            sprinkle_loops(rng, &mut tree);
            let activities = id_table(&tree);
            let model = synthesize(&tree, &activities).unwrap();
            Artifact::Model(Box::new(ModelArtifact {
                structure_hash: structure_hash(&model),
                activities,
                model,
                warnings: (0..rng.gen_range(0..2)).map(|_| random_label(rng)).collect(),
            }))
        }
    }
}

/// Every trace a loop-free org admits: orderings of maximal conflict-free
/// sets that respect precedence.
pub fn brute_traces(org: &Org) -> BTreeSet<Trace> {
    let nodes: Vec<ActivityId> = org.nodes().iter().cloned().collect();
    let n = nodes.len();
    let conflict = |a: &ActivityId, b: &ActivityId| org.relation(a, b) == Some(Relation::Conflict);
    let mut out = BTreeSet::new();
    for mask in 1u32..(1 << n) {
        let set: Vec<&ActivityId> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &nodes[i]).collect();
        let free = set.iter().all(|a| set.iter().all(|b| a == b || !conflict(a, b)));
        let maximal = nodes
            .iter()
            .filter(|v| !set.contains(v))
            .all(|v| set.iter().any(|s| conflict(s, v)));
        if !free || !maximal {
            continue;
        }
        permute(&set, &mut Vec::new(), &mut vec![false; set.len()], org, &mut out);
    }
    out
}

fn permute(set: &[&ActivityId], prefix: &mut Vec<ActivityId>, used: &mut Vec<bool>, org: &Org, out: &mut BTreeSet<Trace>) {
    if prefix.len() == set.len() {
        out.insert(prefix.clone());
        return;
    }
    for i in 0..set.len() {
        if used[i] {
            continue;
        }
        // everything required before set[i] must already be placed
        let blocked = set
            .iter()
            .enumerate()
            .any(|(j, b)| !used[j] && j != i && org.relation(b, set[i]) == Some(Relation::Before));
        if blocked {
            continue;
        }
        used[i] = true;
        prefix.push(set[i].clone());
        permute(set, prefix, used, org, out);
        prefix.pop();
        used[i] = false;
    }
}

/// Loop-free tree, its synthesized model, and whether feeding the model's
/// traces back through the path pipeline yields the same trace set.
pub fn trace_round_trip(tree: &MdtNode) -> Result<(pragmos_core::synthesis::ProcessModel, bool), String> {
    use pragmos_core::mdt::decompose;
    use pragmos_core::relations::{dfg_to_org, paths_to_dfg};
    use pragmos_core::synthesis::synthesize;
    use pragmos_core::verification::enumerate_traces;
    let activities = id_table(tree);
    let model = synthesize(tree, &activities).map_err(|e| e.to_string())?;
    let traces = enumerate_traces(&model, 0).map_err(|e| e.to_string())?;
    let paths: Vec<ExecutionPath> = traces.iter().map(|t| ExecutionPath::new(t.clone()).unwrap()).collect();
    let org = dfg_to_org(&paths_to_dfg(&paths)).map_err(|e| e.to_string())?;
    let again = decompose(&org).map_err(|e| e.to_string())?;
    let model2 = synthesize(&again, &activities).map_err(|e| e.to_string())?;
    let traces2 = enumerate_traces(&model2, 0).map_err(|e| e.to_string())?;
    Ok((model2, traces == traces2))
}
