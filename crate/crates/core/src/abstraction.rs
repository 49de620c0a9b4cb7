//! Block abstraction: recurring path segments are replaced by abstract
//! activities so that the remaining paths have acyclic causality.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdt::{decompose, MdtNode};
use crate::relations::{
    dfg_to_org, paths_to_dfg, transitive_closure, Activity, ActivityId, ActivityTable, ExecutionPath,
};
use crate::session::Provenance;
use crate::synthesis::{synthesize, ProcessModel};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionEntry {
    pub id: ActivityId,
    pub label: String,
    pub variants: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionTable {
    pub entries: Vec<AbstractionEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl AbstractionTable {
    pub fn entry(&self, id: &ActivityId) -> Option<&AbstractionEntry> {
        self.entries.iter().find(|e| &e.id == id)
    }

    pub fn ids(&self) -> BTreeSet<ActivityId> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AbstractionError {
    #[error("no repeated activity and no causal cycle to abstract")]
    NoRepetition,
    #[error("abstraction entry `{0}` has no variants or an empty variant")]
    EmptyVariant(ActivityId),
    #[error("abstract activity `{0}` collides with an existing activity or entry")]
    IdCollision(ActivityId),
    #[error("variant label `{0}` is not a known activity")]
    UnknownLabel(String),
    #[error("variant {variant:?} of `{entry}` occurs in no path")]
    VariantNotFound { entry: ActivityId, variant: Vec<String> },
    #[error("variants of `{first}` and `{second}` overlap in path {path}")]
    OverlappingVariants {
        first: ActivityId,
        second: ActivityId,
        path: usize,
    },
    #[error("unknown abstract activity `{0}`")]
    UnknownEntry(ActivityId),
    #[error("expanding `{id}` failed: {detail}")]
    Expansion { id: ActivityId, detail: String },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Segments start at the repeated activity.
    Leading,
    /// Segments end at the repeated activity.
    Trailing,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentGroup {
    pub boundary: ActivityId,
    pub anchor: Anchor,
    /// Distinct segments, in order of first appearance.
    pub segments: Vec<Vec<ActivityId>>,
    pub paths: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub groups: Vec<SegmentGroup>,
}

/// Splits the cyclic stretch of each path at the occurrences of a repeated activity.
///
/// The cyclic stretch of a path runs from the first to the last of its steps
/// that lie on a cycle of the directly-follows graph together with an
/// activity the path repeats. It is cut before every occurrence of the
/// repeated activity when the stretch starts with it, otherwise after every
/// occurrence.
pub fn find_repetition_segments(paths: &[ExecutionPath], cycle: &[ActivityId]) -> Result<SegmentReport, AbstractionError> {
    let repeated_in = |p: &ExecutionPath| -> BTreeSet<ActivityId> {
        let mut seen = BTreeSet::new();
        p.steps().iter().filter(|a| !seen.insert((*a).clone())).cloned().collect()
    };
    if cycle.is_empty() && paths.iter().all(|p| repeated_in(p).is_empty()) {
        return Err(AbstractionError::NoRepetition);
    }
    let dfg = paths_to_dfg(paths);
    let nodes: Vec<ActivityId> = dfg.nodes.iter().cloned().collect();
    let index: BTreeMap<&ActivityId, usize> = nodes.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let mut succ = vec![Vec::new(); nodes.len()];
    for (a, b) in &dfg.edges {
        succ[index[a]].push(index[b]);
    }
    let reach = transitive_closure(&succ);
    let same_scc = |a: &ActivityId, b: &ActivityId| {
        let (i, j) = (index[a], index[b]);
        i == j && reach[i][i] || reach[i][j] && reach[j][i]
    };

    let mut report = SegmentReport::default();
    for (pi, path) in paths.iter().enumerate() {
        let steps = path.steps();
        let repeated = repeated_in(path);
        let on_cycle = |a: &ActivityId| repeated.iter().any(|r| same_scc(a, r));
        let (Some(first), Some(last)) = (steps.iter().position(on_cycle), steps.iter().rposition(on_cycle)) else {
            continue;
        };
        let region = &steps[first..=last];
        let (boundary, anchor) = if repeated.contains(&region[0]) {
            (region[0].clone(), Anchor::Leading)
        } else if repeated.contains(&region[region.len() - 1]) {
            (region[region.len() - 1].clone(), Anchor::Trailing)
        } else {
            let r = region.iter().find(|a| repeated.contains(*a)).expect("region holds a repeat");
            (r.clone(), Anchor::Leading)
        };
        let mut segments: Vec<Vec<ActivityId>> = Vec::new();
        let mut current = Vec::new();
        for a in region {
            if anchor == Anchor::Leading && *a == boundary && !current.is_empty() {
                segments.push(std::mem::take(&mut current));
            }
            current.push(a.clone());
            if anchor == Anchor::Trailing && *a == boundary {
                segments.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            segments.push(current);
        }
        let group = match report
            .groups
            .iter_mut()
            .find(|g| g.boundary == boundary && g.anchor == anchor)
        {
            Some(g) => g,
            None => {
                report.groups.push(SegmentGroup {
                    boundary,
                    anchor,
                    segments: Vec::new(),
                    paths: Vec::new(),
                });
                report.groups.last_mut().expect("just pushed")
            }
        };
        group.paths.push(pi);
        for s in segments {
            if !group.segments.contains(&s) {
                group.segments.push(s);
            }
        }
    }
    Ok(report)
}

fn variant_ids(variant: &[String], activities: &ActivityTable) -> Result<Vec<ActivityId>, AbstractionError> {
    variant
        .iter()
        .map(|l| {
            activities
                .id_of(l)
                .cloned()
                .ok_or_else(|| AbstractionError::UnknownLabel(l.clone()))
        })
        .collect()
}

fn validate(table: &AbstractionTable, activities: &ActivityTable) -> Result<Vec<Vec<Vec<ActivityId>>>, AbstractionError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(table.entries.len());
    for e in &table.entries {
        if activities.contains(&e.id) || !seen.insert(e.id.clone()) {
            return Err(AbstractionError::IdCollision(e.id.clone()));
        }
        if e.variants.is_empty() || e.variants.iter().any(Vec::is_empty) {
            return Err(AbstractionError::EmptyVariant(e.id.clone()));
        }
        out.push(
            e.variants
                .iter()
                .map(|v| variant_ids(v, activities))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok(out)
}

fn occurrences<'a>(steps: &'a [ActivityId], variant: &'a [ActivityId]) -> impl Iterator<Item = usize> + 'a {
    steps.windows(variant.len()).enumerate().filter(move |(_, w)| *w == variant).map(|(i, _)| i)
}

/// Replaces every variant occurrence with its abstract activity.
///
/// Matching is leftmost-longest, ties going to the earlier entry. Returns the
/// rewritten paths and the activity table of the abstracted process: the
/// activities still present plus one per abstract entry.
pub fn apply_abstraction(
    paths: &[ExecutionPath],
    table: &AbstractionTable,
    activities: &ActivityTable,
) -> Result<(Vec<ExecutionPath>, ActivityTable), AbstractionError> {
    let resolved = validate(table, activities)?;
    for (e, variants) in table.entries.iter().zip(&resolved) {
        for (labels, v) in e.variants.iter().zip(variants) {
            if !paths.iter().any(|p| occurrences(p.steps(), v).next().is_some()) {
                return Err(AbstractionError::VariantNotFound {
                    entry: e.id.clone(),
                    variant: labels.clone(),
                });
            }
        }
    }
    for (pi, p) in paths.iter().enumerate() {
        let spans: Vec<(usize, usize, usize)> = resolved
            .iter()
            .enumerate()
            .flat_map(|(ei, vs)| {
                vs.iter()
                    .flat_map(move |v| occurrences(p.steps(), v).map(move |s| (ei, s, s + v.len())))
            })
            .collect();
        for a in &spans {
            for b in &spans {
                if a.0 < b.0 && a.1 < b.2 && b.1 < a.2 {
                    return Err(AbstractionError::OverlappingVariants {
                        first: table.entries[a.0].id.clone(),
                        second: table.entries[b.0].id.clone(),
                        path: pi,
                    });
                }
            }
        }
    }

    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let steps = p.steps();
        let mut rewritten = Vec::with_capacity(steps.len());
        let mut pos = 0;
        while pos < steps.len() {
            let mut best: Option<(usize, usize)> = None;
            for (ei, vs) in resolved.iter().enumerate() {
                for v in vs {
                    if steps[pos..].starts_with(v) && best.is_none_or(|(_, len)| v.len() > len) {
                        best = Some((ei, v.len()));
                    }
                }
            }
            match best {
                Some((ei, len)) => {
                    rewritten.push(table.entries[ei].id.clone());
                    pos += len;
                }
                None => {
                    rewritten.push(steps[pos].clone());
                    pos += 1;
                }
            }
        }
        out.push(ExecutionPath::new(rewritten).expect("nonempty input gives nonempty output"));
    }

    let used: BTreeSet<&ActivityId> = out.iter().flat_map(|p| p.steps()).collect();
    let mut abstracted: ActivityTable = activities.iter().filter(|a| used.contains(&a.id)).cloned().collect();
    for e in &table.entries {
        abstracted
            .insert(Activity {
                id: e.id.clone(),
                label: e.label.clone(),
                silent: false,
            })
            .map_err(|_| AbstractionError::IdCollision(e.id.clone()))?;
    }
    Ok((out, abstracted))
}

/// Sub-process behind an abstract activity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModel {
    pub id: ActivityId,
    pub activities: ActivityTable,
    pub paths: Vec<ExecutionPath>,
    pub mdt: MdtNode,
    pub model: ProcessModel,
}

/// Runs the path-based pipeline on one entry's variants. Variants are not
/// abstracted further.
pub fn expand_abstract_activity(
    id: &ActivityId,
    table: &AbstractionTable,
    activities: &ActivityTable,
) -> Result<SubModel, AbstractionError> {
    let entry = table.entry(id).ok_or_else(|| AbstractionError::UnknownEntry(id.clone()))?;
    if entry.variants.is_empty() || entry.variants.iter().any(Vec::is_empty) {
        return Err(AbstractionError::EmptyVariant(id.clone()));
    }
    let fail = |detail: String| AbstractionError::Expansion { id: id.clone(), detail };
    let paths = entry
        .variants
        .iter()
        .map(|v| variant_ids(v, activities).and_then(|ids| ExecutionPath::new(ids).map_err(|e| fail(e.to_string()))))
        .collect::<Result<Vec<_>, _>>()?;
    let used: BTreeSet<&ActivityId> = paths.iter().flat_map(|p| p.steps()).collect();
    let sub_table: ActivityTable = activities.iter().filter(|a| used.contains(&a.id)).cloned().collect();
    let org = dfg_to_org(&paths_to_dfg(&paths)).map_err(|e| fail(e.to_string()))?;
    let mdt = decompose(&org).map_err(|e| fail(e.to_string()))?;
    let model = synthesize(&mdt, &sub_table).map_err(|e| fail(e.to_string()))?;
    Ok(SubModel {
        id: id.clone(),
        activities: sub_table,
        paths,
        mdt,
        model,
    })
}
