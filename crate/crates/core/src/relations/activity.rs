use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::RelationsError;

/// Stable token naming an activity within a session.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivityId(String);

impl ActivityId {
    pub fn new(id: impl Into<String>) -> Self {
        ActivityId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActivityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ActivityId {
    fn from(s: &str) -> Self {
        ActivityId(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Activity {
    pub id: ActivityId,
    pub label: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub silent: bool,
}

/// Label used for synthesized invisible activities.
pub const SILENT_LABEL: &str = "τ";

/// Ordered activity table. Lookup works in both directions (id and label).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActivityTable {
    activities: Vec<Activity>,
}

impl ActivityTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Activity> {
        self.activities.iter()
    }

    pub fn len(&self) -> usize {
        self.activities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activities.is_empty()
    }

    pub fn get(&self, id: &ActivityId) -> Option<&Activity> {
        self.activities.iter().find(|a| &a.id == id)
    }

    pub fn contains(&self, id: &ActivityId) -> bool {
        self.get(id).is_some()
    }

    pub fn label(&self, id: &ActivityId) -> Option<&str> {
        self.get(id).map(|a| a.label.as_str())
    }

    pub fn id_of(&self, label: &str) -> Option<&ActivityId> {
        let label = label.trim();
        self.activities
            .iter()
            .find(|a| !a.silent && a.label == label)
            .map(|a| &a.id)
    }

    pub fn ids(&self) -> BTreeSet<ActivityId> {
        self.activities.iter().map(|a| a.id.clone()).collect()
    }

    /// Visible labels in table order.
    pub fn labels(&self) -> Vec<String> {
        self.activities
            .iter()
            .filter(|a| !a.silent)
            .map(|a| a.label.clone())
            .collect()
    }

    /// Adds an activity with a caller-chosen id. Fails if the id is taken.
    pub fn insert(&mut self, activity: Activity) -> Result<(), RelationsError> {
        if self.contains(&activity.id) {
            return Err(RelationsError::DuplicateActivity(activity.id));
        }
        self.activities.push(activity);
        Ok(())
    }

    /// Adds a visible activity, deriving a fresh id from its label.
    pub fn insert_label(&mut self, label: &str) -> ActivityId {
        let label = label.trim();
        if let Some(id) = self.id_of(label) {
            return id.clone();
        }
        let id = fresh_id(&slugify(label), |c| self.contains(c));
        self.activities.push(Activity {
            id: id.clone(),
            label: label.to_owned(),
            silent: false,
        });
        id
    }

    /// Adds a synthesized invisible activity whose id avoids `taken` as well as the table.
    pub fn insert_silent(&mut self, taken: &BTreeSet<ActivityId>) -> ActivityId {
        let id = fresh_id("tau", |c| self.contains(c) || taken.contains(c));
        self.activities.push(Activity {
            id: id.clone(),
            label: SILENT_LABEL.to_owned(),
            silent: true,
        });
        id
    }
}

impl FromIterator<Activity> for ActivityTable {
    fn from_iter<T: IntoIterator<Item = Activity>>(iter: T) -> Self {
        ActivityTable {
            activities: iter.into_iter().collect(),
        }
    }
}

/// Lowercase, hyphen-separated slug. Never empty.
pub fn slugify(label: &str) -> String {
    let mut slug = String::with_capacity(label.len());
    let mut pending_dash = false;
    for ch in label.trim().chars() {
        if ch.is_alphanumeric() {
            if pending_dash && !slug.is_empty() {
                slug.push('-');
            }
            pending_dash = false;
            slug.extend(ch.to_lowercase());
        } else {
            pending_dash = true;
        }
    }
    if slug.is_empty() {
        slug.push_str("activity");
    }
    slug
}

/// `base`, or `base-2`, `base-3`, ... whichever is first not taken.
pub fn fresh_id(base: &str, taken: impl Fn(&ActivityId) -> bool) -> ActivityId {
    let candidate = ActivityId::new(base);
    if !taken(&candidate) {
        return candidate;
    }
    (2..)
        .map(|n| ActivityId::new(format!("{base}-{n}")))
        .find(|c| !taken(c))
        .expect("unbounded suffix search")
}

/// One execution path over activity ids.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExecutionPath {
    steps: Vec<ActivityId>,
}

impl ExecutionPath {
    pub fn new(steps: Vec<ActivityId>) -> Result<Self, RelationsError> {
        if steps.is_empty() {
            return Err(RelationsError::EmptyPath { index: 0 });
        }
        Ok(ExecutionPath { steps })
    }

    pub fn steps(&self) -> &[ActivityId] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl<'a> IntoIterator for &'a ExecutionPath {
    type Item = &'a ActivityId;
    type IntoIter = std::slice::Iter<'a, ActivityId>;

    fn into_iter(self) -> Self::IntoIter {
        self.steps.iter()
    }
}

/// An activity that occurs more than once in a single path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Repetition {
    pub path: usize,
    pub activity: ActivityId,
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Normalized {
    pub activities: ActivityTable,
    pub paths: Vec<ExecutionPath>,
    pub repetitions: Vec<Repetition>,
}

/// Assigns ids to the labels of a path set and rewrites the paths over them.
///
/// Ids depend only on the set of distinct labels: labels are slugged in
/// sorted order and colliding slugs get numeric suffixes.
pub fn normalize_activities<S: AsRef<str>>(paths: &[Vec<S>]) -> Result<Normalized, RelationsError> {
    if paths.is_empty() {
        return Err(RelationsError::NoPaths);
    }
    let mut labels = BTreeSet::new();
    for (index, path) in paths.iter().enumerate() {
        if path.is_empty() {
            return Err(RelationsError::EmptyPath { index });
        }
        for (position, label) in path.iter().enumerate() {
            let label = label.as_ref().trim();
            if label.is_empty() {
                return Err(RelationsError::EmptyLabel { path: index, position });
            }
            labels.insert(label);
        }
    }

    let mut table = ActivityTable::new();
    for label in &labels {
        table.insert_label(label);
    }
    // id_of scans linearly; precompute for long corpora
    let by_label: BTreeMap<&str, ActivityId> = labels
        .iter()
        .map(|l| (*l, table.id_of(l).cloned().expect("inserted above")))
        .collect();

    let mut rewritten = Vec::with_capacity(paths.len());
    let mut repetitions = Vec::new();
    for (index, path) in paths.iter().enumerate() {
        let steps: Vec<ActivityId> = path
            .iter()
            .map(|l| by_label[l.as_ref().trim()].clone())
            .collect();
        let mut seen: BTreeMap<&ActivityId, Vec<usize>> = BTreeMap::new();
        for (pos, id) in steps.iter().enumerate() {
            seen.entry(id).or_default().push(pos);
        }
        repetitions.extend(seen.into_iter().filter(|(_, p)| p.len() > 1).map(|(id, positions)| {
            Repetition {
                path: index,
                activity: id.clone(),
                positions,
            }
        }));
        rewritten.push(ExecutionPath { steps });
    }

    Ok(Normalized {
        activities: table,
        paths: rewritten,
        repetitions,
    })
}
