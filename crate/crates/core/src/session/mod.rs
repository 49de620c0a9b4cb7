//! Versioned artifact ledger driving the pipeline one step at a time.
//!
//! Every slot keeps an append-only list of versions. A version records the
//! slot versions it was computed from; it is stale as soon as those differ
//! from what the slot would be computed from now, or one of them is stale.
//! A human version that is not stale is used as is, both by the step that
//! would otherwise ask the LLM and by the derivations downstream.

mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{apply_abstraction, find_repetition_segments, AbstractionError, AbstractionTable};
use crate::bpmn_io::{
    import_artifact_json, AlignmentArtifact, Artifact, DescriptionArtifact, LoopsArtifact, MdtArtifact,
    ModelArtifact, PairsArtifact, PathsArtifact, SchemaViolation, SlotName,
};
use crate::entanglement::{align_path, resolve, EntanglementError};
use crate::llm_gateway::{
    parse_artifact, render_prompt, repair_prompt, ChatModel, GatewayError, LlmExchange, ParsedArtifact,
    PromptStep, ProviderConfig,
};
use crate::mdt::{annotate_loops, decompose, LoopMode, MdtError, MdtNode};
use crate::relations::{
    dfg_to_org, inject_concurrency, normalize_activities, paths_to_dfg, ActivityId, ActivityTable, ExecutionPath,
    Org, Relation, RelationsError,
};
use crate::synthesis::{structure_hash, synthesize, SynthesisError};

pub use store::{load_session, load_session_dir, save_session, save_session_dir};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Llm,
    Human,
    Derived,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Paths,
    Abstraction,
    Concurrency,
    Loops,
    Resolve,
}

impl Step {
    pub const ORDER: [Step; 5] = [Step::Paths, Step::Abstraction, Step::Concurrency, Step::Loops, Step::Resolve];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::Paths => "paths",
            Step::Abstraction => "abstraction",
            Step::Concurrency => "concurrency",
            Step::Loops => "loops",
            Step::Resolve => "resolve",
        }
    }

    /// Slot holding the step's own result.
    pub fn slot(self) -> SlotName {
        match self {
            Step::Paths => SlotName::Paths,
            Step::Abstraction => SlotName::Abstraction,
            Step::Concurrency => SlotName::Concurrency,
            Step::Loops => SlotName::Loops,
            Step::Resolve => SlotName::Alignment,
        }
    }

    fn prompt(self) -> Option<PromptStep> {
        match self {
            Step::Paths => Some(PromptStep::Paths),
            Step::Abstraction => Some(PromptStep::Abstraction),
            Step::Concurrency => Some(PromptStep::Concurrency),
            Step::Loops => Some(PromptStep::Loops),
            Step::Resolve => None,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> Result<Step, String> {
        Step::ORDER
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown step `{s}`"))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotRef {
    pub slot: SlotName,
    pub version: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactVersion {
    /// 1-based.
    pub version: u32,
    pub value: Artifact,
    pub provenance: Provenance,
    pub parents: Vec<SlotRef>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    Pending,
    Stale,
    Current,
    Error,
}

/// Broad error classes shared by the command line and HTTP front ends.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    Usage,
    Provider,
    Pipeline,
    Validation,
    Store,
}

impl ErrorFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorFamily::Usage => "usage",
            ErrorFamily::Provider => "provider",
            ErrorFamily::Pipeline => "pipeline",
            ErrorFamily::Validation => "validation",
            ErrorFamily::Store => "store",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepError {
    pub family: ErrorFamily,
    pub message: String,
    /// Raised while recomputing derived slots rather than by the step itself.
    #[serde(default)]
    pub derivation: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepInfo {
    pub step: Step,
    pub status: StepStatus,
    pub applicable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<StepError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("process description is empty")]
    EmptyDescription,
    #[error("step {step} needs a current {missing} artifact")]
    NotReady { step: Step, missing: SlotName },
    #[error("{0}")]
    Schema(#[from] SchemaViolation),
    #[error("label `{label}` in the {slot} artifact is not a known activity")]
    UnknownLabel { slot: SlotName, label: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Relations(#[from] RelationsError),
    #[error(transparent)]
    Mdt(#[from] MdtError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Entanglement(#[from] EntanglementError),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
    #[error("no session at {0}")]
    NotFound(String),
    #[error("session store is corrupt: {0}")]
    CorruptStore(String),
    #[error("session store I/O failed: {0}")]
    Io(String),
}

impl SessionError {
    pub fn family(&self) -> ErrorFamily {
        match self {
            SessionError::NotReady { .. } | SessionError::NotFound(_) => ErrorFamily::Usage,
            SessionError::Gateway(GatewayError::EmptyDescription) => ErrorFamily::Validation,
            SessionError::Gateway(_) => ErrorFamily::Provider,
            SessionError::EmptyDescription | SessionError::Schema(_) | SessionError::UnknownLabel { .. } => {
                ErrorFamily::Validation
            }
            SessionError::Relations(_)
            | SessionError::Mdt(_)
            | SessionError::Synthesis(_)
            | SessionError::Entanglement(_)
            | SessionError::Abstraction(_) => ErrorFamily::Pipeline,
            SessionError::CorruptStore(_) | SessionError::Io(_) => ErrorFamily::Store,
        }
    }

    /// Short machine token naming the variant.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::EmptyDescription => "empty_description",
            SessionError::NotReady { .. } => "not_ready",
            SessionError::Schema(_) => "schema_violation",
            SessionError::UnknownLabel { .. } => "unknown_label",
            SessionError::Gateway(e) => match e {
                GatewayError::EmptyDescription => "empty_description",
                GatewayError::MissingActivities(_) => "missing_activities",
                GatewayError::ProviderTimeout => "provider_timeout",
                GatewayError::ReplayMiss(_) => "replay_miss",
                GatewayError::HttpError(_) => "http_error",
                GatewayError::Transport(_) => "transport",
                GatewayError::Config(_) => "provider_config",
                GatewayError::MalformedResponse(_) => "malformed_response",
            },
            SessionError::Relations(e) => match e {
                RelationsError::CyclicCausality { .. } => "cyclic_causality",
                RelationsError::ConflictingEvidence { .. } => "conflicting_evidence",
                _ => "relations",
            },
            SessionError::Mdt(e) => match e {
                MdtError::LoopNotAModule { .. } => "loop_not_a_module",
                _ => "mdt",
            },
            SessionError::Synthesis(_) => "primitive_module_unsupported",
            SessionError::Entanglement(_) => "entanglement",
            SessionError::Abstraction(_) => "abstraction",
            SessionError::NotFound(_) => "not_found",
            SessionError::CorruptStore(_) => "corrupt_store",
            SessionError::Io(_) => "io",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionState {
    id: String,
    created: DateTime<Utc>,
    slots: BTreeMap<SlotName, Vec<ArtifactVersion>>,
    audit: Vec<LlmExchange>,
    errors: BTreeMap<Step, StepError>,
}

/// Paths in the form the pipeline consumes, after any abstraction.
#[derive(Clone, Debug)]
pub struct EffectivePaths {
    pub paths: Vec<ExecutionPath>,
    pub activities: ActivityTable,
    /// Ids of abstract activities.
    pub abstract_ids: BTreeSet<ActivityId>,
}

pub fn create_session(description: &str) -> Result<SessionState, SessionError> {
    if description.trim().is_empty() {
        return Err(SessionError::EmptyDescription);
    }
    let mut s = SessionState {
        id: uuid::Uuid::new_v4().to_string(),
        created: Utc::now(),
        slots: BTreeMap::new(),
        audit: Vec::new(),
        errors: BTreeMap::new(),
    };
    s.append(
        Artifact::Description(DescriptionArtifact {
            description: description.to_string(),
        }),
        Provenance::Human,
        Vec::new(),
    );
    Ok(s)
}

impl SessionState {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn created(&self) -> DateTime<Utc> {
        self.created
    }

    pub fn description(&self) -> &str {
        match self.current(SlotName::Description).map(|v| &v.value) {
            Some(Artifact::Description(d)) => &d.description,
            _ => "",
        }
    }

    pub fn audit(&self) -> &[LlmExchange] {
        &self.audit
    }

    pub fn versions(&self, slot: SlotName) -> &[ArtifactVersion] {
        self.slots.get(&slot).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn version(&self, slot: SlotName, version: u32) -> Option<&ArtifactVersion> {
        self.versions(slot).get((version as usize).checked_sub(1)?)
    }

    pub fn current(&self, slot: SlotName) -> Option<&ArtifactVersion> {
        self.versions(slot).last()
    }

    fn current_ref(&self, slot: SlotName) -> Option<SlotRef> {
        self.current(slot).map(|v| SlotRef { slot, version: v.version })
    }

    /// Current version if it is not stale.
    fn usable(&self, slot: SlotName) -> Option<&ArtifactVersion> {
        self.current(slot).filter(|_| !self.is_stale(slot))
    }

    fn usable_ref(&self, slot: SlotName) -> Option<SlotRef> {
        self.usable(slot).map(|v| SlotRef { slot, version: v.version })
    }

    /// The slot versions a fresh version of `slot` would be computed from.
    pub fn inputs(&self, slot: SlotName) -> Vec<SlotRef> {
        use SlotName::*;
        let required: &[SlotName] = match slot {
            Description => &[],
            Paths => &[Description],
            Abstraction => &[Description, Paths],
            Concurrency | Loops => &[Description, Paths],
            Org => &[Paths],
            Alignment => &[Paths, Org],
            Mdt => &[Org],
            Model => &[Mdt],
        };
        let optional: &[SlotName] = match slot {
            Concurrency | Loops => &[Abstraction],
            Org => &[Abstraction, Concurrency],
            Alignment => &[Abstraction, Loops],
            Mdt => &[Loops, Alignment],
            _ => &[],
        };
        let mut refs: Vec<SlotRef> = required.iter().filter_map(|s| self.current_ref(*s)).collect();
        refs.extend(optional.iter().filter_map(|s| self.usable_ref(*s)));
        refs.sort();
        refs
    }

    pub fn is_stale(&self, slot: SlotName) -> bool {
        let Some(v) = self.current(slot) else {
            return false;
        };
        v.parents != self.inputs(slot) || v.parents.iter().any(|p| self.is_stale(p.slot))
    }

    pub fn status(&self, step: Step) -> StepStatus {
        if self.errors.contains_key(&step) {
            StepStatus::Error
        } else if self.current(step.slot()).is_none() {
            StepStatus::Pending
        } else if self.is_stale(step.slot()) {
            StepStatus::Stale
        } else {
            StepStatus::Current
        }
    }

    pub fn step_info(&self, step: Step) -> StepInfo {
        StepInfo {
            step,
            status: self.status(step),
            applicable: self.applicable(step),
            error: self.errors.get(&step).cloned(),
            version: self.current(step.slot()).map(|v| v.version),
        }
    }

    /// Whether the optional steps have anything to do. The three elementary
    /// steps are always applicable.
    pub fn applicable(&self, step: Step) -> bool {
        match step {
            Step::Abstraction => {
                !self.versions(SlotName::Abstraction).is_empty() || self.raw_needs_abstraction().unwrap_or(false)
            }
            Step::Resolve => {
                if !self.versions(SlotName::Alignment).is_empty() {
                    return true;
                }
                let Ok(eff) = self.effective_paths() else {
                    return false;
                };
                let Ok((pre, _)) = self.pre_resolution_tree(&eff) else {
                    return false;
                };
                eff.paths.iter().any(|p| !align_path(p, &pre).fit)
            }
            _ => true,
        }
    }

    fn append(&mut self, value: Artifact, provenance: Provenance, parents: Vec<SlotRef>) -> u32 {
        let list = self.slots.entry(value.slot()).or_default();
        let version = list.len() as u32 + 1;
        list.push(ArtifactVersion {
            version,
            value,
            provenance,
            parents,
            timestamp: Utc::now(),
        });
        version
    }

    /// Appends a derived version unless the current one already has the same
    /// value and parents.
    fn append_derived(&mut self, value: Artifact, parents: Vec<SlotRef>) {
        if let Some(cur) = self.current(value.slot()) {
            if cur.value == value && cur.parents == parents {
                return;
            }
        }
        self.append(value, Provenance::Derived, parents);
    }

    fn paths_labels(&self) -> Option<&PathsArtifact> {
        match self.current(SlotName::Paths).map(|v| &v.value) {
            Some(Artifact::Paths(p)) => Some(p),
            _ => None,
        }
    }

    fn raw_paths(&self) -> Result<crate::relations::Normalized, SessionError> {
        let p = self.paths_labels().ok_or(SessionError::NotReady {
            step: Step::Paths,
            missing: SlotName::Paths,
        })?;
        Ok(normalize_activities(&p.paths)?)
    }

    /// Raw paths repeat an activity or have cyclic causality.
    fn raw_needs_abstraction(&self) -> Result<bool, SessionError> {
        let raw = self.raw_paths()?;
        Ok(!raw.repetitions.is_empty()
            || matches!(dfg_to_org(&paths_to_dfg(&raw.paths)), Err(RelationsError::CyclicCausality { .. })))
    }

    pub fn effective_paths(&self) -> Result<EffectivePaths, SessionError> {
        let raw = self.raw_paths()?;
        match self.usable(SlotName::Abstraction).map(|v| &v.value) {
            Some(Artifact::Abstraction(table)) if !table.entries.is_empty() => {
                let (paths, activities) = apply_abstraction(&raw.paths, table, &raw.activities)?;
                Ok(EffectivePaths {
                    paths,
                    activities,
                    abstract_ids: table.ids(),
                })
            }
            _ => Ok(EffectivePaths {
                paths: raw.paths,
                activities: raw.activities,
                abstract_ids: BTreeSet::new(),
            }),
        }
    }

    fn visible_labels(activities: &ActivityTable) -> Vec<String> {
        activities.iter().filter(|a| !a.silent).map(|a| a.label.clone()).collect()
    }

    fn id_of(activities: &ActivityTable, slot: SlotName, label: &str) -> Result<ActivityId, SessionError> {
        activities
            .id_of(label.trim())
            .cloned()
            .ok_or_else(|| SessionError::UnknownLabel {
                slot,
                label: label.to_string(),
            })
    }

    fn derive_org(&self, eff: &EffectivePaths) -> Result<Org, SessionError> {
        if let Some(v) = self.usable(SlotName::Org).filter(|v| v.provenance == Provenance::Human) {
            if let Artifact::Org(org) = &v.value {
                return Ok(org.clone());
            }
        }
        let org = dfg_to_org(&paths_to_dfg(&eff.paths))?;
        match self.usable(SlotName::Concurrency).map(|v| &v.value) {
            Some(Artifact::Concurrency(p)) => {
                let pairs = p
                    .pairs
                    .iter()
                    .map(|(a, b)| {
                        Ok((
                            Self::id_of(&eff.activities, SlotName::Concurrency, a)?,
                            Self::id_of(&eff.activities, SlotName::Concurrency, b)?,
                        ))
                    })
                    .collect::<Result<Vec<_>, SessionError>>()?;
                Ok(inject_concurrency(&org, &pairs)?)
            }
            _ => Ok(org),
        }
    }

    fn loop_blocks(&self, activities: &ActivityTable) -> Result<Vec<BTreeSet<ActivityId>>, SessionError> {
        match self.usable(SlotName::Loops).map(|v| &v.value) {
            Some(Artifact::Loops(l)) => l
                .loops
                .iter()
                .map(|block| block.iter().map(|l| Self::id_of(activities, SlotName::Loops, l)).collect())
                .collect(),
            _ => Ok(Vec::new()),
        }
    }

    /// Decomposition of the current org with the loop blocks applied.
    fn pre_resolution_tree(&self, eff: &EffectivePaths) -> Result<(MdtNode, Vec<crate::mdt::NestedLoop>), SessionError> {
        let org = match self.usable(SlotName::Org).map(|v| &v.value) {
            Some(Artifact::Org(o)) => o.clone(),
            _ => self.derive_org(eff)?,
        };
        let tree = decompose(&org)?;
        let blocks = self.loop_blocks(&eff.activities)?;
        Ok(annotate_loops(&tree, &blocks, LoopMode::Repeat)?)
    }

    /// Recomputes org, mdt and model from the current inputs.
    fn rederive(&mut self) -> Result<(), SessionError> {
        let eff = self.effective_paths()?;
        let org = self.derive_org(&eff)?;
        let org_inputs = self.inputs(SlotName::Org);
        self.append_derived(Artifact::Org(org.clone()), org_inputs);

        let human_mdt = self
            .usable(SlotName::Mdt)
            .filter(|v| v.provenance == Provenance::Human)
            .map(|v| v.value.clone());
        let mdt = match human_mdt {
            Some(Artifact::Mdt(m)) => m,
            _ => {
                let (pre, nested_loops) = self.pre_resolution_tree(&eff)?;
                let tree = match self.usable(SlotName::Alignment).map(|v| &v.value) {
                    Some(Artifact::Alignment(a)) => resolve(&pre, &a.reports)?.0,
                    _ => pre,
                };
                let art = MdtArtifact { tree, nested_loops };
                let inputs = self.inputs(SlotName::Mdt);
                self.append_derived(Artifact::Mdt(art.clone()), inputs);
                art
            }
        };

        if self.usable(SlotName::Model).is_some_and(|v| v.provenance == Provenance::Human) {
            return Ok(());
        }
        let mut activities = eff.activities.clone();
        mdt.tree.walk(&mut |n| {
            if let (true, Some(a)) = (n.silent, &n.activity) {
                if !activities.contains(a) {
                    let _ = activities.insert(crate::relations::Activity {
                        id: a.clone(),
                        label: crate::relations::SILENT_LABEL.to_string(),
                        silent: true,
                    });
                }
            }
        });
        let model = synthesize(&mdt.tree, &activities)?;
        let mut warnings: Vec<String> = mdt
            .nested_loops
            .iter()
            .map(|n| {
                format!(
                    "loop block {} lies inside loop block {}",
                    crate::mdt::fmt_set(&n.inner),
                    crate::mdt::fmt_set(&n.outer)
                )
            })
            .collect();
        for (a, b, rel) in org.pairs() {
            if rel == Relation::Concurrent && (eff.abstract_ids.contains(a) || eff.abstract_ids.contains(b)) {
                let label = |x: &ActivityId| activities.label(x).unwrap_or(x.as_str()).to_string();
                warnings.push(format!(
                    "abstract activity pair `{}` / `{}` was classified concurrent because both orders occur; confirm or override",
                    label(a),
                    label(b)
                ));
            }
        }
        let art = ModelArtifact {
            structure_hash: structure_hash(&model),
            activities,
            model,
            warnings,
        };
        let inputs = self.inputs(SlotName::Model);
        self.append_derived(Artifact::Model(Box::new(art)), inputs);
        Ok(())
    }

    fn rederive_recording(&mut self, step: Step) -> Result<(), SessionError> {
        match self.rederive() {
            Ok(()) => {
                self.errors.retain(|_, e| !e.derivation);
                Ok(())
            }
            Err(e) => {
                self.errors.insert(
                    step,
                    StepError {
                        family: e.family(),
                        message: e.to_string(),
                        derivation: true,
                    },
                );
                Err(e)
            }
        }
    }

    /// Asks the model, retrying with a repair note on unusable answers.
    fn ask(
        &mut self,
        prompt_step: PromptStep,
        prompt: String,
        known: &[String],
        model: &dyn ChatModel,
        max_retries: u32,
    ) -> Result<ParsedArtifact, SessionError> {
        let mut current = prompt.clone();
        let mut problem = String::new();
        for attempt in 1..=max_retries + 1 {
            let answer = model.complete(&current);
            let mut exchange = LlmExchange {
                step: prompt_step,
                prompt_text: current.clone(),
                raw_response: None,
                error: None,
                parsed_ok: false,
                attempt,
                timestamp: Utc::now(),
            };
            let raw = match answer {
                Ok(raw) => raw,
                Err(e) => {
                    exchange.error = Some(e.to_string());
                    self.audit.push(exchange);
                    return Err(e.into());
                }
            };
            exchange.raw_response = Some(raw.clone());
            let verdict = parse_artifact(prompt_step, &raw, known).and_then(|parsed| {
                let mut unknown = parsed.unknown_labels.clone();
                if let ParsedArtifact::Abstraction(t) = &parsed.artifact {
                    for l in t.entries.iter().flat_map(|e| e.variants.iter().flatten()) {
                        if !known.contains(l) && !unknown.contains(l) {
                            unknown.push(l.clone());
                        }
                    }
                }
                if unknown.is_empty() {
                    Ok(parsed.artifact)
                } else {
                    Err(GatewayError::MalformedResponse(format!(
                        "unknown activity names: {}",
                        unknown.join(", ")
                    )))
                }
            });
            match verdict {
                Ok(artifact) => {
                    exchange.parsed_ok = true;
                    self.audit.push(exchange);
                    return Ok(artifact);
                }
                Err(e) => {
                    exchange.error = Some(e.to_string());
                    self.audit.push(exchange);
                    problem = match e {
                        GatewayError::MalformedResponse(d) => d,
                        other => other.to_string(),
                    };
                    current = repair_prompt(&prompt, &problem);
                }
            }
        }
        Err(GatewayError::MalformedResponse(problem).into())
    }

    /// Refinement steps need usable paths with acyclic causality.
    fn ready(&self, step: Step) -> Result<(), SessionError> {
        if self.usable(SlotName::Paths).is_none() {
            return Err(SessionError::NotReady {
                step,
                missing: SlotName::Paths,
            });
        }
        let eff = self.effective_paths()?;
        match dfg_to_org(&paths_to_dfg(&eff.paths)) {
            Err(RelationsError::CyclicCausality { .. }) => Err(SessionError::NotReady {
                step,
                missing: SlotName::Abstraction,
            }),
            _ => Ok(()),
        }
    }

    fn human_current(&self, slot: SlotName) -> bool {
        self.usable(slot).is_some_and(|v| v.provenance == Provenance::Human)
    }

    fn run(&mut self, step: Step, model: &dyn ChatModel, max_retries: u32) -> Result<(), SessionError> {
        let description = self.description().to_string();
        match step {
            Step::Paths => {
                if !self.human_current(SlotName::Paths) {
                    let prompt = render_prompt(PromptStep::Paths, &description, &[])?;
                    let ParsedArtifact::Paths(p) = self.ask(PromptStep::Paths, prompt, &[], model, max_retries)? else {
                        unreachable!("paths prompt parses to paths")
                    };
                    let parents = self.inputs(SlotName::Paths);
                    self.append(Artifact::Paths(p), Provenance::Llm, parents);
                }
            }
            Step::Abstraction => {
                if !self.human_current(SlotName::Abstraction) {
                    let raw = self.raw_paths()?;
                    let cycle = match dfg_to_org(&paths_to_dfg(&raw.paths)) {
                        Err(RelationsError::CyclicCausality { cycle }) => cycle,
                        _ => Vec::new(),
                    };
                    let report = find_repetition_segments(&raw.paths, &cycle)?;
                    let label = |a: &ActivityId| raw.activities.label(a).unwrap_or(a.as_str()).to_string();
                    let mut lines: Vec<String> = Vec::new();
                    for seg in report.groups.iter().flat_map(|g| &g.segments) {
                        let line = seg.iter().map(label).collect::<Vec<_>>().join(" -> ");
                        if !lines.contains(&line) {
                            lines.push(line);
                        }
                    }
                    let prompt = render_prompt(PromptStep::Abstraction, &description, &lines)?;
                    let known = Self::visible_labels(&raw.activities);
                    let ids: Vec<String> = raw.activities.ids().iter().map(|i| i.as_str().to_string()).collect();
                    let ParsedArtifact::Abstraction(mut table) =
                        self.ask(PromptStep::Abstraction, prompt, &[known, ids].concat(), model, max_retries)?
                    else {
                        unreachable!("abstraction prompt parses to a table")
                    };
                    table.provenance = Some(Provenance::Llm);
                    // check before storing so a bad table never becomes current
                    apply_abstraction(&raw.paths, &table, &raw.activities)?;
                    let parents = self.inputs(SlotName::Abstraction);
                    self.append(Artifact::Abstraction(table), Provenance::Llm, parents);
                }
            }
            Step::Concurrency | Step::Loops => {
                self.ready(step)?;
                if !self.human_current(step.slot()) {
                    let eff = self.effective_paths()?;
                    let labels = Self::visible_labels(&eff.activities);
                    let ps = step.prompt().expect("llm step");
                    let prompt = render_prompt(ps, &description, &labels)?;
                    let art = match self.ask(ps, prompt, &labels, model, max_retries)? {
                        ParsedArtifact::Pairs(p) => Artifact::Concurrency(p),
                        ParsedArtifact::Loops(l) => Artifact::Loops(l),
                        _ => unreachable!("step prompts parse to their own shape"),
                    };
                    let parents = self.inputs(step.slot());
                    self.append(art, Provenance::Llm, parents);
                }
            }
            Step::Resolve => {
                self.ready(step)?;
                if !self.human_current(SlotName::Alignment) {
                    let eff = self.effective_paths()?;
                    let (pre, _) = self.pre_resolution_tree(&eff)?;
                    let reports: Vec<_> = eff.paths.iter().map(|p| align_path(p, &pre)).collect();
                    let (_, resolutions) = resolve(&pre, &reports)?;
                    let parents = self.inputs(SlotName::Alignment);
                    self.append_derived(Artifact::Alignment(AlignmentArtifact { reports, resolutions }), parents);
                }
            }
        }
        self.errors.remove(&step);
        self.rederive_recording(step)
    }

    /// Validates `text` against the slot schema and appends it as a human version.
    pub fn override_json(&mut self, slot: SlotName, text: &str) -> Result<u32, SessionError> {
        let value = import_artifact_json(slot, text)?;
        self.override_artifact(value)
    }

    /// Appends `value` as a human version of its slot; downstream slots turn stale.
    pub fn override_artifact(&mut self, value: Artifact) -> Result<u32, SessionError> {
        if let Artifact::Description(d) = &value {
            if d.description.trim().is_empty() {
                return Err(SessionError::EmptyDescription);
            }
        }
        let slot = value.slot();
        let parents = self.inputs(slot);
        let v = self.append(value, Provenance::Human, parents);
        if let Some(step) = Step::ORDER.into_iter().find(|s| s.slot() == slot) {
            self.errors.remove(&step);
        }
        Ok(v)
    }

    pub fn model_artifact(&self, version: Option<u32>) -> Option<&ModelArtifact> {
        let v = match version {
            Some(k) => self.version(SlotName::Model, k)?,
            None => self.current(SlotName::Model)?,
        };
        match &v.value {
            Artifact::Model(m) => Some(m),
            _ => None,
        }
    }

    pub fn mdt(&self) -> Option<&MdtNode> {
        match self.current(SlotName::Mdt).map(|v| &v.value) {
            Some(Artifact::Mdt(m)) => Some(&m.tree),
            _ => None,
        }
    }

    pub fn abstraction(&self) -> Option<&AbstractionTable> {
        match self.current(SlotName::Abstraction).map(|v| &v.value) {
            Some(Artifact::Abstraction(t)) => Some(t),
            _ => None,
        }
    }

    pub fn pairs(&self) -> Option<&PairsArtifact> {
        match self.current(SlotName::Concurrency).map(|v| &v.value) {
            Some(Artifact::Concurrency(p)) => Some(p),
            _ => None,
        }
    }

    pub fn loops(&self) -> Option<&LoopsArtifact> {
        match self.current(SlotName::Loops).map(|v| &v.value) {
            Some(Artifact::Loops(l)) => Some(l),
            _ => None,
        }
    }
}

/// Runs one step with a provider built from `config`.
pub fn run_step(session: &mut SessionState, step: Step, config: &ProviderConfig) -> Result<(), SessionError> {
    let client = config.client()?;
    run_step_with(session, step, client.as_ref(), config.max_retries)
}

/// Runs one step against an explicit chat model. On failure the error is
/// recorded in the step status and earlier versions stay untouched.
pub fn run_step_with(
    session: &mut SessionState,
    step: Step,
    model: &dyn ChatModel,
    max_retries: u32,
) -> Result<(), SessionError> {
    let result = session.run(step, model, max_retries);
    if let Err(e) = &result {
        session.errors.entry(step).or_insert_with(|| StepError {
            family: e.family(),
            message: e.to_string(),
            derivation: false,
        });
    }
    result
}

/// Runs every applicable step in order: paths, abstraction when causality
/// is cyclic or activities repeat, concurrency, loops, and resolve when some
/// path does not fit. Stops at the first failing step.
pub fn run_pipeline(session: &mut SessionState, model: &dyn ChatModel, max_retries: u32) -> Result<(), SessionError> {
    match run_step_with(session, Step::Paths, model, max_retries) {
        Ok(()) => {}
        Err(SessionError::Relations(RelationsError::CyclicCausality { .. })) => {}
        Err(e) => return Err(e),
    }
    if session.applicable(Step::Abstraction) {
        run_step_with(session, Step::Abstraction, model, max_retries)?;
    }
    run_step_with(session, Step::Concurrency, model, max_retries)?;
    run_step_with(session, Step::Loops, model, max_retries)?;
    if session.applicable(Step::Resolve) {
        run_step_with(session, Step::Resolve, model, max_retries)?;
    }
    Ok(())
}

pub fn override_artifact(session: &mut SessionState, slot: SlotName, text: &str) -> Result<u32, SessionError> {
    session.override_json(slot, text)
}
