use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ActivityId, ExecutionPath};

/// Directly-follows graph of a path set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dfg {
    pub nodes: BTreeSet<ActivityId>,
    pub edges: BTreeSet<(ActivityId, ActivityId)>,
    pub start_successors: BTreeSet<ActivityId>,
    pub end_predecessors: BTreeSet<ActivityId>,
}

impl Dfg {
    pub fn has_edge(&self, from: &ActivityId, to: &ActivityId) -> bool {
        // BTreeSet<(A, A)> lookups need an owned tuple
        self.edges.contains(&(from.clone(), to.clone()))
    }

    /// Unordered pairs {a, b} with both a→b and b→a present (a < b).
    pub fn mutual_pairs(&self) -> BTreeSet<(ActivityId, ActivityId)> {
        self.edges
            .iter()
            .filter(|(a, b)| a < b && self.has_edge(b, a))
            .cloned()
            .collect()
    }
}

pub fn paths_to_dfg(paths: &[ExecutionPath]) -> Dfg {
    let mut dfg = Dfg::default();
    for path in paths {
        let steps = path.steps();
        dfg.nodes.extend(steps.iter().cloned());
        if let (Some(first), Some(last)) = (steps.first(), steps.last()) {
            dfg.start_successors.insert(first.clone());
            dfg.end_predecessors.insert(last.clone());
        }
        for w in steps.windows(2) {
            dfg.edges.insert((w[0].clone(), w[1].clone()));
        }
    }
    dfg
}
