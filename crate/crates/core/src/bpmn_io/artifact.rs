use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::AbstractionTable;
use crate::entanglement::{AlignmentReport, Resolution};
use crate::mdt::{MdtNode, NestedLoop};
use crate::relations::{ActivityTable, Org};
use crate::synthesis::ProcessModel;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotName {
    Description,
    Paths,
    Org,
    Concurrency,
    Loops,
    Mdt,
    Alignment,
    Abstraction,
    Model,
}

impl SlotName {
    pub const ALL: [SlotName; 9] = [
        SlotName::Description,
        SlotName::Paths,
        SlotName::Org,
        SlotName::Concurrency,
        SlotName::Loops,
        SlotName::Mdt,
        SlotName::Alignment,
        SlotName::Abstraction,
        SlotName::Model,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SlotName::Description => "description",
            SlotName::Paths => "paths",
            SlotName::Org => "org",
            SlotName::Concurrency => "concurrency",
            SlotName::Loops => "loops",
            SlotName::Mdt => "mdt",
            SlotName::Alignment => "alignment",
            SlotName::Abstraction => "abstraction",
            SlotName::Model => "model",
        }
    }
}

impl fmt::Display for SlotName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlotName {
    type Err = String;

    fn from_str(s: &str) -> Result<SlotName, String> {
        SlotName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown slot `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionArtifact {
    pub description: String,
}

/// Execution paths as label sequences.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsArtifact {
    pub paths: Vec<Vec<String>>,
}

/// Activity pairs reported concurrent, by label.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsArtifact {
    pub pairs: Vec<(String, String)>,
}

/// Loop blocks, each a set of labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopsArtifact {
    pub loops: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentArtifact {
    pub reports: Vec<AlignmentReport>,
    pub resolutions: Vec<Resolution>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArtifact {
    pub activities: ActivityTable,
    pub model: ProcessModel,
    pub structure_hash: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// The tree together with any nesting between loop blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdtArtifact {
    pub tree: MdtNode,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nested_loops: Vec<NestedLoop>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Artifact {
    Description(DescriptionArtifact),
    Paths(PathsArtifact),
    Org(Org),
    Concurrency(PairsArtifact),
    Loops(LoopsArtifact),
    Mdt(MdtArtifact),
    Alignment(AlignmentArtifact),
    Abstraction(AbstractionTable),
    Model(Box<ModelArtifact>),
}

impl Artifact {
    pub fn slot(&self) -> SlotName {
        match self {
            Artifact::Description(_) => SlotName::Description,
            Artifact::Paths(_) => SlotName::Paths,
            Artifact::Org(_) => SlotName::Org,
            Artifact::Concurrency(_) => SlotName::Concurrency,
            Artifact::Loops(_) => SlotName::Loops,
            Artifact::Mdt(_) => SlotName::Mdt,
            Artifact::Alignment(_) => SlotName::Alignment,
            Artifact::Abstraction(_) => SlotName::Abstraction,
            Artifact::Model(_) => SlotName::Model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema violation at {pointer}: {detail}")]
pub struct SchemaViolation {
    /// JSON pointer to the offending value (empty for the document root).
    pub pointer: String,
    pub detail: String,
}

pub fn export_artifact_json(value: &Artifact) -> String {
    serde_json::to_string_pretty(value).expect("artifacts serialize")
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T, SchemaViolation> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut pointer = String::new();
        for seg in e.path().iter() {
            use serde_path_to_error::Segment;
            match seg {
                Segment::Seq { index } => pointer.push_str(&format!("/{index}")),
                Segment::Map { key } | Segment::Enum { variant: key } => {
                    pointer.push('/');
                    pointer.push_str(&key.replace('~', "~0").replace('/', "~1"));
                }
                Segment::Unknown => {}
            }
        }
        SchemaViolation {
            pointer,
            detail: e.into_inner().to_string(),
        }
    })
}

pub fn import_artifact_json(slot: SlotName, text: &str) -> Result<Artifact, SchemaViolation> {
    let value = match slot {
        SlotName::Description => {
            let d: DescriptionArtifact = parse(text)?;
            if d.description.trim().is_empty() {
                return Err(SchemaViolation {
                    pointer: "/description".into(),
                    detail: "description is empty".into(),
                });
            }
            Artifact::Description(d)
        }
        SlotName::Paths => {
            let p: PathsArtifact = parse(text)?;
            check_label_lists(&p.paths, "paths")?;
            Artifact::Paths(p)
        }
        SlotName::Org => Artifact::Org(parse(text)?),
        SlotName::Concurrency => {
            let p: PairsArtifact = parse(text)?;
            for (i, (a, b)) in p.pairs.iter().enumerate() {
                if a.trim().is_empty() || b.trim().is_empty() {
                    return Err(SchemaViolation {
                        pointer: format!("/pairs/{i}"),
                        detail: "empty label".into(),
                    });
                }
            }
            Artifact::Concurrency(p)
        }
        SlotName::Loops => {
            let l: LoopsArtifact = parse(text)?;
            check_label_lists(&l.loops, "loops")?;
            Artifact::Loops(l)
        }
        SlotName::Mdt => Artifact::Mdt(parse(text)?),
        SlotName::Alignment => Artifact::Alignment(parse(text)?),
        SlotName::Abstraction => Artifact::Abstraction(parse(text)?),
        SlotName::Model => Artifact::Model(Box::new(parse(text)?)),
    };
    Ok(value)
}

fn check_label_lists(lists: &[Vec<String>], field: &str) -> Result<(), SchemaViolation> {
    for (i, list) in lists.iter().enumerate() {
        if list.is_empty() {
            return Err(SchemaViolation {
                pointer: format!("/{field}/{i}"),
                detail: "empty list".into(),
            });
        }
        if let Some(j) = list.iter().position(|l| l.trim().is_empty()) {
            return Err(SchemaViolation {
                pointer: format!("/{field}/{i}/{j}"),
                detail: "empty label".into(),
            });
        }
    }
    Ok(())
}
