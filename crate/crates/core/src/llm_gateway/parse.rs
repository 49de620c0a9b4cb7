use serde_json::Value;

use super::{GatewayError, PromptStep};
use crate::abstraction::{AbstractionEntry, AbstractionTable};
use crate::bpmn_io::{LoopsArtifact, PairsArtifact, PathsArtifact};
use crate::relations::{fresh_id, slugify, ActivityId};
use crate::session::Provenance;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedArtifact {
    Paths(PathsArtifact),
    Pairs(PairsArtifact),
    Loops(LoopsArtifact),
    Abstraction(AbstractionTable),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub artifact: ParsedArtifact,
    /// Labels not found among the known activities, in order of appearance.
    pub unknown_labels: Vec<String>,
}

/// JSON values in a response: fenced blocks if any parse, otherwise every
/// top-level object or array found in the text.
fn json_values(raw: &str) -> Vec<Value> {
    let fenced: Vec<Value> = raw
        .split("```")
        .skip(1)
        .step_by(2)
        .filter_map(|block| {
            let body = block.strip_prefix("json").unwrap_or(block);
            serde_json::from_str(body.trim()).ok()
        })
        .collect();
    if !fenced.is_empty() {
        return fenced;
    }
    let mut found = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let c = raw.as_bytes()[i];
        if c == b'{' || c == b'[' {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            if let Some(Ok(v)) = stream.next() {
                found.push(v);
                i += stream.byte_offset();
                continue;
            }
        }
        i += 1;
    }
    found
}

fn malformed(detail: impl Into<String>) -> GatewayError {
    GatewayError::MalformedResponse(detail.into())
}

fn label_list(v: &Value, what: &str) -> Result<Vec<String>, GatewayError> {
    let items = v.as_array().ok_or_else(|| malformed(format!("{what} is not a list")))?;
    items
        .iter()
        .map(|s| {
            s.as_str()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| malformed(format!("{what} holds a non-label entry {s}")))
        })
        .collect()
}

fn list_of_lists(v: &Value, what: &str) -> Result<Vec<Vec<String>>, GatewayError> {
    let items = v.as_array().ok_or_else(|| malformed(format!("{what} is not a list")))?;
    items.iter().map(|i| label_list(i, what)).collect()
}

fn field<'a>(values: &'a [Value], key: &str) -> Option<&'a Value> {
    values.first().and_then(|v| v.get(key))
}

/// Extracts and validates the answer for `step`.
///
/// Labels are trimmed and otherwise kept verbatim. For the pair and loop
/// steps, labels missing from `activities` are reported; for the
/// abstraction step, `activities` are the ids new entries must avoid.
pub fn parse_artifact(step: PromptStep, raw: &str, activities: &[String]) -> Result<Parsed, GatewayError> {
    let values = json_values(raw);
    if values.is_empty() {
        return Err(malformed("no JSON value found"));
    }
    let artifact = match step {
        PromptStep::Paths => {
            let paths = if let Some(p) = field(&values, "paths") {
                list_of_lists(p, "paths")?
            } else if values[0].as_array().is_some_and(|a| a.iter().all(Value::is_array)) {
                list_of_lists(&values[0], "paths")?
            } else {
                // one flat list per path
                values
                    .iter()
                    .take_while(|v| v.as_array().is_some_and(|a| a.iter().all(Value::is_string)))
                    .map(|v| label_list(v, "path"))
                    .collect::<Result<_, _>>()?
            };
            if paths.is_empty() || paths.iter().any(Vec::is_empty) {
                return Err(malformed("expected at least one nonempty path"));
            }
            ParsedArtifact::Paths(PathsArtifact { paths })
        }
        PromptStep::Concurrency => {
            let v = field(&values, "pairs").unwrap_or(&values[0]);
            let pairs = list_of_lists(v, "pairs")?
                .into_iter()
                .map(|p| match <[String; 2]>::try_from(p) {
                    Ok([a, b]) => Ok((a, b)),
                    Err(p) => Err(malformed(format!("pair with {} entries", p.len()))),
                })
                .collect::<Result<_, _>>()?;
            ParsedArtifact::Pairs(PairsArtifact { pairs })
        }
        PromptStep::Loops => {
            let v = field(&values, "loops").unwrap_or(&values[0]);
            let loops = list_of_lists(v, "loops")?;
            if loops.iter().any(Vec::is_empty) {
                return Err(malformed("empty loop block"));
            }
            ParsedArtifact::Loops(LoopsArtifact { loops })
        }
        PromptStep::Abstraction => {
            let v = field(&values, "entries").unwrap_or(&values[0]);
            let items = v.as_array().ok_or_else(|| malformed("entries is not a list"))?;
            let mut taken: Vec<ActivityId> = activities.iter().map(|a| ActivityId::new(a.as_str())).collect();
            let mut entries = Vec::with_capacity(items.len());
            for item in items {
                let label = item
                    .get("label")
                    .and_then(Value::as_str)
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| malformed("entry without label"))?
                    .to_string();
                let variants = list_of_lists(item.get("variants").unwrap_or(&Value::Null), "variants")?;
                if variants.is_empty() || variants.iter().any(Vec::is_empty) {
                    return Err(malformed(format!("entry `{label}` has no usable variant")));
                }
                let id = fresh_id(&slugify(&label), |id| taken.contains(id));
                taken.push(id.clone());
                entries.push(AbstractionEntry { id, label, variants });
            }
            ParsedArtifact::Abstraction(AbstractionTable {
                entries,
                provenance: Some(Provenance::Llm),
            })
        }
    };
    let mut unknown_labels = Vec::new();
    let mut check = |l: &String| {
        if !activities.contains(l) && !unknown_labels.contains(l) {
            unknown_labels.push(l.clone());
        }
    };
    match &artifact {
        ParsedArtifact::Pairs(p) => p.pairs.iter().for_each(|(a, b)| {
            check(a);
            check(b);
        }),
        ParsedArtifact::Loops(l) => l.loops.iter().flatten().for_each(check),
        _ => {}
    }
    Ok(Parsed {
        artifact,
        unknown_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pairs_from_fenced_block() {
        let raw = "Sure.\n```json\n{\"pairs\": [[\" Inform Storehouse \", \"Inform Engineering\"], [\"x\", \"y\"]]}\n```\nDone.";
        let parsed = parse_artifact(PromptStep::Concurrency, raw, &labels(&["Inform Storehouse", "Inform Engineering"])).unwrap();
        let ParsedArtifact::Pairs(p) = parsed.artifact else { panic!() };
        assert_eq!(p.pairs[0], ("Inform Storehouse".to_string(), "Inform Engineering".to_string()));
        assert_eq!(parsed.unknown_labels, labels(&["x", "y"]));
    }

    #[test]
    fn empty_loop_answer() {
        let parsed = parse_artifact(PromptStep::Loops, "[]", &labels(&["a"])).unwrap();
        assert_eq!(parsed.artifact, ParsedArtifact::Loops(LoopsArtifact::default()));
    }

    #[test]
    fn flat_path_lists() {
        let raw = "Path 1: [\"a\", \"b\"]\nPath 2: [\"a\", \"c\"]";
        let parsed = parse_artifact(PromptStep::Paths, raw, &[]).unwrap();
        assert_eq!(
            parsed.artifact,
            ParsedArtifact::Paths(PathsArtifact {
                paths: vec![labels(&["a", "b"]), labels(&["a", "c"])]
            })
        );
    }

    #[test]
    fn malformed_answers() {
        for (step, raw) in [
            (PromptStep::Paths, "no json here"),
            (PromptStep::Paths, "{\"paths\": []}"),
            (PromptStep::Concurrency, "{\"pairs\": [[\"a\", \"b\", \"c\"]]}"),
            (PromptStep::Loops, "{\"loops\": [[1, 2]]}"),
            (PromptStep::Abstraction, "{\"entries\": [{\"variants\": [[\"a\"]]}]}"),
        ] {
            assert!(
                matches!(parse_artifact(step, raw, &labels(&["a"])), Err(GatewayError::MalformedResponse(_))),
                "{raw}"
            );
        }
    }

    #[test]
    fn abstraction_ids_avoid_existing() {
        let raw = "{\"entries\": [{\"label\": \"Fix\", \"variants\": [[\"a\"]]}, {\"label\": \"Fix\", \"variants\": [[\"b\"]]}]}";
        let parsed = parse_artifact(PromptStep::Abstraction, raw, &labels(&["fix"])).unwrap();
        let ParsedArtifact::Abstraction(t) = parsed.artifact else { panic!() };
        let ids: Vec<&str> = t.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["fix-2", "fix-3"]);
    }
}
