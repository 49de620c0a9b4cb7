//! One PASS/FAIL line per acceptance criterion. Exits nonzero if any fails.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pragmos_core::bpmn_io::{export_artifact_json, import_artifact_json, SlotName};
use pragmos_core::mdt::{decompose, LoopMode, MdtNode, ModuleKind};
use pragmos_core::relations::{slugify, ActivityId, ExecutionPath};
use pragmos_core::session::{create_session, run_step, SessionState, Step};
use pragmos_core::synthesis::{structure_hash, synthesize, ProcessModel};
use pragmos_core::verification::{check_soundness, conforms, enumerate_traces};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn FnOnce() -> Outcome + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Ids of a fixture's letters, as the expectation table names them.
fn letter_ids(name: &str, letters: &str) -> BTreeSet<ActivityId> {
    let (_, labels) = expected(name);
    letters.chars().map(|c| ActivityId::new(slugify(labels[c.to_string().as_str()]))).collect()
}

fn node<'a>(tree: &'a MdtNode, name: &str, letters: &str) -> Result<&'a MdtNode, String> {
    tree.find(&letter_ids(name, letters))
        .ok_or_else(|| format!("{name}: no node over {{{letters}}}"))
}

fn hash_matches(s: &SessionState, name: &str) -> Result<(), String> {
    let m = s.model_artifact(None).ok_or("no model")?;
    let want = structure_hash(&synthesize(&expected_tree(name), &m.activities).map_err(|e| e.to_string())?);
    ensure(m.structure_hash == want, || format!("{name}: hash {} != {want}", m.structure_hash))
}

fn input_paths(s: &SessionState) -> Vec<ExecutionPath> {
    s.effective_paths().expect("paths").paths
}

fn car() -> Outcome {
    let start = Instant::now();
    let s = replayed_session("car");
    hash_matches(&s, "car")?;
    let m = s.model_artifact(None).unwrap();
    let traces = enumerate_traces(&m.model, 0).map_err(|e| e.to_string())?;
    let inputs: BTreeSet<Vec<ActivityId>> = input_paths(&s).iter().map(|p| p.steps().to_vec()).collect();
    ensure(inputs.len() == 3 && traces == inputs, || format!("traces {traces:?}"))?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(1), || format!("took {took:?}"))?;
    Ok(format!("3 traces, {took:?}"))
}

fn bicycle() -> Outcome {
    let s = replayed_session("bicycle");
    hash_matches(&s, "bicycle")?;
    let tree = s.mdt().ok_or("no tree")?;
    ensure(node(tree, "bicycle", "de")?.kind == ModuleKind::CompleteAnd, || "d,e not parallel".into())?;
    let fi = node(tree, "bicycle", "fghi")?;
    ensure(fi.kind == ModuleKind::CompleteAnd, || "loop and i not parallel".into())?;
    let body = node(tree, "bicycle", "fgh")?;
    ensure(body.loop_mode == LoopMode::Repeat, || "f,g,h is not a repeat loop".into())?;
    ensure(node(tree, "bicycle", "gh")?.kind == ModuleKind::CompleteXor, || "g,h not exclusive".into())?;
    let b = letter_ids("bicycle", "b");
    let outer = tree
        .children
        .iter()
        .find(|c| c.descendants().is_superset(&b))
        .ok_or("b missing")?;
    ensure(outer.kind == ModuleKind::CompleteXor && outer.descendants().len() > 1, || "b not in outer XOR".into())?;
    let m = s.model_artifact(None).unwrap();
    ensure(conforms(&input_paths(&s), &m.model, 1).map_err(|e| e.to_string())?.conforms, || {
        "paths do not conform".into()
    })?;
    Ok(format!("{} model versions", s.versions(SlotName::Model).len()))
}

fn exam() -> Outcome {
    let cfg = replay("exam");
    let mut s = create_session(&description("exam")).map_err(|e| e.to_string())?;
    for step in [Step::Paths, Step::Concurrency, Step::Loops] {
        run_step(&mut s, step, &cfg).map_err(|e| format!("{step}: {e}"))?;
    }
    let paths = input_paths(&s);
    let before = s.model_artifact(None).ok_or("no model")?.model.clone();
    let first = conforms(&paths[..1], &before, 1).map_err(|e| e.to_string())?;
    ensure(!first.conforms, || "repeat model already accepts path 1".into())?;
    run_step(&mut s, Step::Resolve, &cfg).map_err(|e| e.to_string())?;
    let tree = s.mdt().unwrap();
    ensure(node(tree, "exam", "de")?.loop_mode == LoopMode::While, || "loop is not while".into())?;
    let after = &s.model_artifact(None).unwrap().model;
    ensure(conforms(&paths, after, 1).map_err(|e| e.to_string())?.conforms, || "paths do not conform".into())?;
    Ok("repeat rejected path 1, while accepts both".into())
}

fn skip() -> Outcome {
    let s = replayed_session("skip");
    hash_matches(&s, "skip")?;
    let tree = s.mdt().unwrap();
    let bc = letter_ids("skip", "bc");
    let xor = tree
        .children
        .iter()
        .find(|c| c.descendants().is_superset(&bc))
        .ok_or("b,c missing")?;
    ensure(
        xor.kind == ModuleKind::CompleteXor
            && xor.children.len() == 2
            && xor.children.iter().any(|c| c.silent)
            && xor.children.iter().any(|c| c.kind == ModuleKind::Linear && c.descendants() == &bc),
        || format!("not XOR{{linear{{b,c}}, tau}}: {xor:?}"),
    )?;
    let traces = enumerate_traces(&s.model_artifact(None).unwrap().model, 0).map_err(|e| e.to_string())?;
    let want: BTreeSet<Vec<ActivityId>> = ["abcd", "ad"]
        .iter()
        .map(|w| w.chars().map(|c| letter_ids("skip", &c.to_string()).pop_first().unwrap()).collect())
        .collect();
    ensure(traces == want, || format!("traces {traces:?}"))?;
    Ok("traces {abcd, ad}".into())
}

fn module_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d6f64);
    let mut internal = 0;
    for i in 0..600 {
        let n = rng.gen_range(1..=8);
        let org = random_org(&mut rng, n);
        let tree = decompose(&org).map_err(|e| format!("org {i}: {e}"))?;
        let v = module_violations(&org, &tree);
        ensure(v.is_empty(), || format!("org {i}: {v:?}"))?;
        internal += tree.node_count() - org.nodes().len();
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!("600 orgs, {internal} internal nodes, {took:?}"))
}

fn round_trip(models: &mut Vec<ProcessModel>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7274);
    for i in 0..250 {
        let tree = random_mdt(&mut rng, 6);
        let (model, same) = trace_round_trip(&tree).map_err(|e| format!("tree {i}: {e}"))?;
        ensure(same, || format!("tree {i} not trace equivalent: {tree:?}"))?;
        models.push(model);
    }
    Ok("250 trees".into())
}

fn soundness(mut models: Vec<ProcessModel>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x736e64);
    for _ in 0..200 {
        let mut tree = random_mdt(&mut rng, 7);
        sprinkle_loops(&mut rng, &mut tree);
        models.push(synthesize(&tree, &id_table(&tree)).map_err(|e| e.to_string())?);
    }
    for name in FIXTURES {
        let s = replayed_session(name);
        for v in s.versions(SlotName::Model) {
            let pragmos_core::bpmn_io::Artifact::Model(m) = &v.value else { unreachable!() };
            models.push(m.model.clone());
        }
        let m = &s.model_artifact(None).unwrap().model;
        ensure(conforms(&input_paths(&s), m, 1).map_err(|e| e.to_string())?.conforms, || {
            format!("{name}: paths do not conform")
        })?;
    }
    for (i, m) in models.iter().enumerate() {
        let r = check_soundness(m).map_err(|e| format!("model {i}: {e}"))?;
        ensure(r.is_sound(), || format!("model {i}: {r:?}"))?;
    }
    Ok(format!("{} models, {} fixtures conform", models.len(), FIXTURES.len()))
}

fn artifacts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a736f6e);
    for slot in SlotName::ALL {
        for i in 0..250 {
            let a = random_artifact(&mut rng, slot);
            let back = import_artifact_json(slot, &export_artifact_json(&a)).map_err(|e| format!("{slot} {i}: {e}"))?;
            ensure(back == a, || format!("{slot} {i} changed"))?;
        }
    }
    Ok(format!("250 per slot, {} slots", SlotName::ALL.len()))
}

fn main() {
    let mut models = Vec::new();
    let checks: Vec<(&str, Check)> = vec![
        ("car dealership end to end", Box::new(car)),
        ("bicycle manufacturer", Box::new(bicycle)),
        ("online exam while loop", Box::new(exam)),
        ("skip insertion", Box::new(skip)),
        ("module oracle", Box::new(module_oracle)),
        ("trace round trip", Box::new(|| round_trip(&mut models))),
    ];
    let mut failed = 0;
    let mut report = |i: usize, name: &str, f: Check| {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {}. {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {}. {name}: {why}", i + 1)
            }
        }
    };
    for (i, (name, f)) in checks.into_iter().enumerate() {
        report(i, name, f);
    }
    report(6, "soundness", Box::new(move || soundness(models)));
    report(7, "artifact round trip", Box::new(artifacts));
    if failed > 0 {
        println!("{failed} of 8 criteria failed");
        std::process::exit(1);
    }
}
