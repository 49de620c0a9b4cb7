mod common;

use std::sync::Mutex;

use common::*;
use pragmos_core::bpmn_io::{export_artifact_json, Artifact, PathsArtifact, SlotName};
use pragmos_core::llm_gateway::{ChatModel, GatewayError, PromptStep};
use pragmos_core::mdt::{canonical_form, LoopMode};
use pragmos_core::session::{
    create_session, load_session, run_step, run_step_with, save_session, ErrorFamily, Provenance, SessionError,
    SessionState, Step, StepStatus,
};
use pragmos_core::synthesis::structure_hash;
use pragmos_core::verification::conforms;

fn session_with(name: &str, steps: &[Step]) -> SessionState {
    let mut s = create_session(&description(name)).unwrap();
    for step in steps {
        run_step(&mut s, *step, &replay(name)).unwrap_or_else(|e| panic!("{name} {step}: {e}"));
    }
    s
}

fn hash(s: &SessionState) -> String {
    s.model_artifact(None).unwrap().structure_hash.clone()
}

#[test]
fn create_checks_description() {
    assert_eq!(create_session("  ").unwrap_err(), SessionError::EmptyDescription);
    let a = create_session("x").unwrap();
    let b = create_session("x").unwrap();
    assert_ne!(a.id(), b.id());
    assert_eq!(a.versions(SlotName::Description).len(), 1);
    assert_eq!(a.current(SlotName::Description).unwrap().provenance, Provenance::Human);
    for step in Step::ORDER {
        assert_eq!(a.status(step), StepStatus::Pending);
    }
}

#[test]
fn car_first_model_after_paths() {
    let s = session_with("car", &[Step::Paths]);
    let expected = expected_tree("car");
    assert_eq!(canonical_form(s.mdt().unwrap()), canonical_form(&expected));
    assert_eq!(s.status(Step::Paths), StepStatus::Current);
    assert_eq!(s.audit().len(), 1);
    assert!(s.audit()[0].parsed_ok);
}

#[test]
fn bicycle_three_steps() {
    let s = session_with("bicycle", &[Step::Paths, Step::Concurrency, Step::Loops]);
    assert_eq!(canonical_form(s.mdt().unwrap()), canonical_form(&expected_tree("bicycle")));
    let m = s.model_artifact(None).unwrap();
    assert!(conforms(&s.effective_paths().unwrap().paths, &m.model, 1).unwrap().conforms);
    // one model per stage
    assert_eq!(s.versions(SlotName::Model).len(), 3);
}

#[test]
fn exam_resolution_turns_loop_into_while() {
    let mut s = session_with("exam", &[Step::Paths, Step::Loops]);
    let paths = s.effective_paths().unwrap().paths;
    let pre = s.model_artifact(None).unwrap().model.clone();
    let before = conforms(&paths, &pre, 1).unwrap();
    assert!(!before.conforms);
    assert_eq!(before.counterexamples, vec![paths[0].clone()]);
    assert!(s.applicable(Step::Resolve));
    run_step(&mut s, Step::Resolve, &replay("exam")).unwrap();
    let mut modes = Vec::new();
    s.mdt().unwrap().walk(&mut |n| {
        if n.loop_mode != LoopMode::None {
            modes.push(n.loop_mode)
        }
    });
    assert_eq!(modes, vec![LoopMode::While]);
    assert!(conforms(&paths, &s.model_artifact(None).unwrap().model, 1).unwrap().conforms);
}

#[test]
fn override_marks_downstream_stale_and_is_used() {
    let mut s = session_with("bicycle", &[Step::Paths, Step::Concurrency, Step::Loops]);
    let before = hash(&s);
    let audit_before = s.audit().len();
    let text = r#"{"pairs": [["Inform Storehouse", "Inform Engineering"]]}"#;
    s.override_json(SlotName::Concurrency, text).unwrap();
    assert!(s.is_stale(SlotName::Org));
    assert!(s.is_stale(SlotName::Mdt));
    assert!(s.is_stale(SlotName::Model));
    assert!(!s.is_stale(SlotName::Concurrency));
    assert!(!s.is_stale(SlotName::Loops));
    assert_eq!(s.status(Step::Concurrency), StepStatus::Current);
    run_step(&mut s, Step::Concurrency, &replay("bicycle")).unwrap();
    // the human answer stands in for the model
    assert_eq!(s.audit().len(), audit_before);
    assert_eq!(s.current(SlotName::Concurrency).unwrap().provenance, Provenance::Human);
    assert!(!s.is_stale(SlotName::Model));
    assert_ne!(hash(&s), before);
}

#[test]
fn override_paths_with_recorded_answer_matches_llm_run() {
    let llm = session_with("car", &[Step::Paths]);
    let Some(Artifact::Paths(p)) = llm.current(SlotName::Paths).map(|v| v.value.clone()) else {
        panic!()
    };
    let mut human = create_session(&description("car")).unwrap();
    human.override_json(SlotName::Paths, &export_artifact_json(&Artifact::Paths(p))).unwrap();
    run_step(&mut human, Step::Paths, &replay("car")).unwrap();
    assert!(human.audit().is_empty());
    assert_eq!(hash(&human), hash(&llm));
}

#[test]
fn malformed_override_is_rejected() {
    let mut s = create_session("x").unwrap();
    let err = s
        .override_json(SlotName::Concurrency, r#"{"pairs": [["a", "b", "c"]]}"#)
        .unwrap_err();
    match err {
        SessionError::Schema(v) => assert_eq!(v.pointer, "/pairs/0"),
        other => panic!("{other:?}"),
    }
    assert!(s.versions(SlotName::Concurrency).is_empty());
}

#[test]
fn bicycle_session_round_trips_through_store() {
    let dir = tempfile::tempdir().unwrap();
    let s = session_with("bicycle", &[Step::Paths, Step::Concurrency, Step::Loops]);
    let path = save_session(&s, dir.path()).unwrap();
    assert!(path.join("exports/model-v3.bpmn").exists());
    assert!(path.join("audit/000003.json").exists());
    let back = load_session(dir.path(), s.id()).unwrap();
    assert_eq!(back, s);
    assert_eq!(hash(&back), hash(&s));
}

#[test]
fn provenance_reaches_description() {
    let s = session_with("bicycle", &[Step::Paths, Step::Concurrency, Step::Loops]);
    for v in s.versions(SlotName::Model) {
        let mut frontier = v.parents.clone();
        let mut reached = false;
        while let Some(p) = frontier.pop() {
            if p.slot == SlotName::Description {
                reached = true;
            }
            frontier.extend(s.version(p.slot, p.version).unwrap().parents.iter().copied());
        }
        assert!(reached, "model v{}", v.version);
    }
}

#[test]
fn replay_miss_is_audited_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = create_session(&description("car")).unwrap();
    let err = run_step(&mut s, Step::Paths, &pragmos_core::llm_gateway::ProviderConfig::replay(dir.path())).unwrap_err();
    assert!(matches!(err, SessionError::Gateway(GatewayError::ReplayMiss(_))));
    assert_eq!(err.family(), ErrorFamily::Provider);
    assert_eq!(s.audit().len(), 1);
    assert!(!s.audit()[0].parsed_ok);
    assert_eq!(s.status(Step::Paths), StepStatus::Error);
    assert!(s.versions(SlotName::Paths).is_empty());
}

/// Gives the listed answers in order, then repeats the last.
struct Sequence(Mutex<Vec<String>>);

impl ChatModel for Sequence {
    fn complete(&self, _prompt: &str) -> Result<String, GatewayError> {
        let mut answers = self.0.lock().unwrap();
        Ok(if answers.len() > 1 { answers.remove(0) } else { answers[0].clone() })
    }
}

#[test]
fn malformed_answer_is_retried_with_repair_note() {
    let model = Sequence(Mutex::new(vec![
        "I am not sure.".into(),
        r#"{"paths": [["x", "y"]]}"#.into(),
    ]));
    let mut s = create_session("d").unwrap();
    run_step_with(&mut s, Step::Paths, &model, 2).unwrap();
    assert_eq!(s.audit().len(), 2);
    assert!(!s.audit()[0].parsed_ok);
    assert_eq!(s.audit()[1].attempt, 2);
    assert!(s.audit()[1].prompt_text.contains("could not be used"));
    assert!(s.audit()[1].parsed_ok);
}

#[test]
fn unknown_labels_exhaust_retries() {
    let mut s = create_session("d").unwrap();
    let paths = Sequence(Mutex::new(vec![r#"{"paths": [["x", "y"]]}"#.into()]));
    run_step_with(&mut s, Step::Paths, &paths, 0).unwrap();
    let bad = Sequence(Mutex::new(vec![r#"{"pairs": [["x", "z"]]}"#.into()]));
    let err = run_step_with(&mut s, Step::Concurrency, &bad, 1).unwrap_err();
    assert!(matches!(err, SessionError::Gateway(GatewayError::MalformedResponse(ref d)) if d.contains('z')));
    assert_eq!(s.audit().len(), 3);
    assert_eq!(s.status(Step::Concurrency), StepStatus::Error);
    assert_eq!(s.audit()[2].step, PromptStep::Concurrency);
}

#[test]
fn cyclic_paths_call_for_abstraction() {
    let mut s = create_session(&description("repair")).unwrap();
    let err = run_step(&mut s, Step::Paths, &replay("repair")).unwrap_err();
    assert_eq!(err.code(), "cyclic_causality");
    assert_eq!(s.status(Step::Paths), StepStatus::Error);
    assert!(s.applicable(Step::Abstraction));
    assert!(matches!(
        run_step(&mut s, Step::Concurrency, &replay("repair")),
        Err(SessionError::NotReady { .. })
    ));
    run_step(&mut s, Step::Abstraction, &replay("repair")).unwrap();
    assert_eq!(s.status(Step::Paths), StepStatus::Current);
    assert_eq!(s.status(Step::Abstraction), StepStatus::Current);
    assert!(s.model_artifact(None).is_some());
}

#[test]
fn rerunning_paths_makes_later_steps_stale() {
    let mut s = session_with("bicycle", &[Step::Paths, Step::Concurrency, Step::Loops]);
    let first = hash(&s);
    let p = s.current(SlotName::Paths).unwrap().value.clone();
    s.override_artifact(p).unwrap();
    assert_eq!(s.status(Step::Concurrency), StepStatus::Stale);
    assert_eq!(s.status(Step::Loops), StepStatus::Stale);
    run_step(&mut s, Step::Paths, &replay("bicycle")).unwrap();
    // stale refinements are left out until re-run
    assert_ne!(hash(&s), first);
    run_step(&mut s, Step::Concurrency, &replay("bicycle")).unwrap();
    run_step(&mut s, Step::Loops, &replay("bicycle")).unwrap();
    assert_eq!(hash(&s), first);
    let expected = structure_hash(&m_model(&s));
    assert_eq!(expected, first);
}

fn m_model(s: &SessionState) -> pragmos_core::synthesis::ProcessModel {
    s.model_artifact(None).unwrap().model.clone()
}

#[test]
fn skip_session_inserts_silent_branch() {
    let s = session_with("skip", &[Step::Paths, Step::Resolve]);
    assert_eq!(canonical_form(s.mdt().unwrap()), canonical_form(&expected_tree("skip")));
    let Some(Artifact::Alignment(a)) = s.current(SlotName::Alignment).map(|v| v.value.clone()) else {
        panic!()
    };
    assert_eq!(a.resolutions.len(), 1);
    let _ = PathsArtifact::default();
}
