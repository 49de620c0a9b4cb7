//! Workloads shared by the benchmarks.

use std::path::PathBuf;

use pragmos_core::relations::{Activity, ActivityId, ActivityTable, ExecutionPath};

pub fn fixture_dir(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

pub fn description(name: &str) -> String {
    std::fs::read_to_string(fixture_dir(name).join("description.txt")).expect("fixture description")
}

/// `layers` consecutive choices between `x<i>` and `y<i>`. Four paths give
/// every directly-follows edge between neighbouring layers.
pub fn choice_chain(layers: usize) -> (Vec<ExecutionPath>, ActivityTable) {
    let pick = |i: usize, alt: bool| ActivityId::new(format!("{}{i}", if alt { 'y' } else { 'x' }));
    let patterns: [fn(usize) -> bool; 4] = [|_| false, |_| true, |i| i % 2 == 0, |i| i % 2 == 1];
    let paths = patterns
        .iter()
        .map(|f| ExecutionPath::new((0..layers).map(|i| pick(i, f(i))).collect()).expect("nonempty"))
        .collect();
    let table = (0..layers)
        .flat_map(|i| [pick(i, false), pick(i, true)])
        .map(|id| Activity {
            label: id.as_str().to_uppercase(),
            id,
            silent: false,
        })
        .collect();
    (paths, table)
}
