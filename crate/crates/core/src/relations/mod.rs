//! Execution paths, directly-follows graphs and ordering relations graphs.
//!
//! Paths extracted from a process description are turned into a
//! directly-follows graph, from which causality, conflict and concurrency are
//! derived for every activity pair. Concurrency reported separately can then
//! be injected into the graph.

mod activity;
mod dfg;
mod org;

pub use activity::{
    fresh_id, normalize_activities, slugify, Activity, ActivityId, ActivityTable, ExecutionPath,
    Normalized, Repetition, SILENT_LABEL,
};
pub use dfg::{paths_to_dfg, Dfg};
pub use org::{dfg_to_org, inject_concurrency, verify_org, Org, OrgDiagnostic, Relation, RelationKind};

pub(crate) use org::transitive_closure;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelationsError {
    #[error("no execution paths given")]
    NoPaths,
    #[error("execution path {index} has no steps")]
    EmptyPath { index: usize },
    #[error("execution path {path} has an empty label at position {position}")]
    EmptyLabel { path: usize, position: usize },
    #[error("activity `{0}` already exists")]
    DuplicateActivity(ActivityId),
    #[error("unknown activity `{0}`")]
    UnknownActivity(ActivityId),
    #[error("activity `{0}` cannot be related to itself")]
    SelfPair(ActivityId),
    #[error("causality is cyclic ({}); block abstraction is required", fmt_ids(cycle))]
    CyclicCausality { cycle: Vec<ActivityId> },
    #[error("pairs reported concurrent are in conflict: {}", fmt_pairs(pairs))]
    ConflictingEvidence { pairs: Vec<(ActivityId, ActivityId)> },
    #[error("ordering relations graph is invalid: {}", fmt_diags(.0))]
    InvalidOrg(Vec<OrgDiagnostic>),
}

fn fmt_ids(ids: &[ActivityId]) -> String {
    ids.iter().map(ActivityId::as_str).collect::<Vec<_>>().join(" -> ")
}

fn fmt_pairs(pairs: &[(ActivityId, ActivityId)]) -> String {
    pairs
        .iter()
        .map(|(a, b)| format!("{{{a}, {b}}}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fmt_diags(diags: &[OrgDiagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}
