//! BPMN 2.0 XML export and artifact JSON interchange.

mod artifact;

use std::collections::BTreeMap;

use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, Event};
use quick_xml::{Reader, Writer};
use thiserror::Error;

use crate::relations::{ActivityId, ActivityTable};
use crate::synthesis::{FlowNode, FlowNodeKind, GatewayRole, NodeId, ProcessModel};

pub use artifact::{
    export_artifact_json, import_artifact_json, AlignmentArtifact, Artifact, DescriptionArtifact, LoopsArtifact,
    MdtArtifact, ModelArtifact, PairsArtifact, PathsArtifact, SchemaViolation, SlotName,
};

pub const BPMN_NS: &str = "http://www.omg.org/spec/BPMN/20100524/MODEL";

fn element_name(kind: FlowNodeKind) -> &'static str {
    match kind {
        FlowNodeKind::Start => "startEvent",
        FlowNodeKind::End => "endEvent",
        FlowNodeKind::Task => "task",
        FlowNodeKind::XorGateway => "exclusiveGateway",
        FlowNodeKind::AndGateway => "parallelGateway",
    }
}

/// Serializes the model as a single BPMN process without diagram interchange.
///
/// Flow nodes come in id order, followed by the sequence flows in model
/// order, so equal models give byte-identical documents.
pub fn export_bpmn_xml(model: &ProcessModel, activities: &ActivityTable) -> String {
    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    let write = |w: &mut Writer<Vec<u8>>, e: Event<'_>| w.write_event(e).expect("writing to a Vec cannot fail");
    write(&mut w, Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)));
    write(
        &mut w,
        Event::Start(BytesStart::new("definitions").with_attributes([
            ("xmlns", BPMN_NS),
            ("id", "definitions"),
            ("targetNamespace", "urn:pragmos"),
        ])),
    );
    write(
        &mut w,
        Event::Start(BytesStart::new("process").with_attributes([("id", "process"), ("isExecutable", "false")])),
    );
    for node in model.nodes() {
        let id = node.id.to_string();
        let mut el = BytesStart::new(element_name(node.kind)).with_attributes([("id", id.as_str())]);
        if let Some(a) = &node.activity {
            el.push_attribute(("name", activities.label(a).unwrap_or(a.as_str())));
        }
        if let Some(role) = node.gateway_role {
            let dir = match role {
                GatewayRole::Split => "Diverging",
                GatewayRole::Join => "Converging",
            };
            el.push_attribute(("gatewayDirection", dir));
        }
        write(&mut w, Event::Empty(el));
    }
    for (i, (a, b)) in model.flows().iter().enumerate() {
        let (id, src, dst) = (format!("f{i}"), a.to_string(), b.to_string());
        write(
            &mut w,
            Event::Empty(BytesStart::new("sequenceFlow").with_attributes([
                ("id", id.as_str()),
                ("sourceRef", src.as_str()),
                ("targetRef", dst.as_str()),
            ])),
        );
    }
    write(&mut w, Event::End(BytesEnd::new("process")));
    write(&mut w, Event::End(BytesEnd::new("definitions")));
    let mut xml = String::from_utf8(w.into_inner()).expect("utf-8 output");
    xml.push('\n');
    xml
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BpmnImportError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("unsupported or invalid BPMN: {0}")]
    Invalid(String),
}

/// Reads back a document in the exported subset (ids `n<k>` are kept, other
/// ids are numbered in document order). Task names become activities.
pub fn import_bpmn_xml(xml: &str) -> Result<(ProcessModel, ActivityTable), BpmnImportError> {
    let mut reader = Reader::from_str(xml);
    reader.config_mut().trim_text(true);
    let mut raw_nodes: Vec<(String, FlowNodeKind, Option<String>, Option<String>)> = Vec::new();
    let mut raw_flows: Vec<(String, String)> = Vec::new();
    loop {
        let event = reader.read_event().map_err(|e| BpmnImportError::Xml(e.to_string()))?;
        let e = match &event {
            Event::Start(e) | Event::Empty(e) => e,
            Event::Eof => break,
            _ => continue,
        };
        let attr = |name: &str| -> Result<Option<String>, BpmnImportError> {
            match e.try_get_attribute(name).map_err(|err| BpmnImportError::Xml(err.to_string()))? {
                Some(a) => Ok(Some(
                    a.unescape_value()
                        .map_err(|err| BpmnImportError::Xml(err.to_string()))?
                        .into_owned(),
                )),
                None => Ok(None),
            }
        };
        let kind = match e.local_name().as_ref() {
            b"startEvent" => FlowNodeKind::Start,
            b"endEvent" => FlowNodeKind::End,
            b"task" => FlowNodeKind::Task,
            b"exclusiveGateway" => FlowNodeKind::XorGateway,
            b"parallelGateway" => FlowNodeKind::AndGateway,
            b"sequenceFlow" => {
                let src = attr("sourceRef")?.ok_or_else(|| BpmnImportError::Invalid("flow without sourceRef".into()))?;
                let dst = attr("targetRef")?.ok_or_else(|| BpmnImportError::Invalid("flow without targetRef".into()))?;
                raw_flows.push((src, dst));
                continue;
            }
            _ => continue,
        };
        let id = attr("id")?.ok_or_else(|| BpmnImportError::Invalid("flow node without id".into()))?;
        raw_nodes.push((id, kind, attr("name")?, attr("gatewayDirection")?));
    }

    let mut ids: BTreeMap<String, NodeId> = BTreeMap::new();
    let mut next = raw_nodes
        .iter()
        .filter_map(|(id, ..)| id.parse::<NodeId>().ok())
        .map(|n| n.0 + 1)
        .max()
        .unwrap_or(0);
    for (id, ..) in &raw_nodes {
        let nid = match id.parse::<NodeId>() {
            Ok(n) => n,
            Err(_) => {
                next += 1;
                NodeId(next - 1)
            }
        };
        if ids.insert(id.clone(), nid).is_some() {
            return Err(BpmnImportError::Invalid(format!("duplicate id {id}")));
        }
    }
    let flows = raw_flows
        .iter()
        .map(|(a, b)| match (ids.get(a), ids.get(b)) {
            (Some(x), Some(y)) => Ok((*x, *y)),
            _ => Err(BpmnImportError::Invalid(format!("flow {a} -> {b} references an unknown node"))),
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut activities = ActivityTable::new();
    let mut nodes = Vec::with_capacity(raw_nodes.len());
    for (id, kind, name, direction) in raw_nodes {
        let nid = ids[&id];
        let activity = match kind {
            FlowNodeKind::Task => {
                let label = name.filter(|n| !n.trim().is_empty()).unwrap_or_else(|| id.clone());
                Some(match activities.id_of(&label) {
                    Some(existing) => existing.clone(),
                    None => activities.insert_label(&label),
                })
            }
            _ => None,
        };
        let gateway_role = match kind {
            FlowNodeKind::XorGateway | FlowNodeKind::AndGateway => Some(match direction.as_deref() {
                Some("Diverging") => GatewayRole::Split,
                Some("Converging") => GatewayRole::Join,
                _ if flows.iter().filter(|(_, b)| *b == nid).count() > 1 => GatewayRole::Join,
                _ => GatewayRole::Split,
            }),
            _ => None,
        };
        nodes.push(FlowNode {
            id: nid,
            kind,
            activity,
            gateway_role,
        });
    }
    let model = ProcessModel::new(nodes, flows).map_err(BpmnImportError::Invalid)?;
    Ok((model, activities))
}

/// Ids of tasks whose activity is not in the table.
pub fn unknown_tasks(model: &ProcessModel, activities: &ActivityTable) -> Vec<ActivityId> {
    model
        .tasks()
        .filter_map(|t| t.activity.clone())
        .filter(|a| !activities.contains(a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdt::{decompose, MdtNode};
    use crate::relations::{dfg_to_org, normalize_activities, paths_to_dfg};
    use crate::synthesis::{structure_hash, synthesize};

    fn car() -> (ProcessModel, ActivityTable) {
        let n = normalize_activities(&[
            vec!["Buy", "Pay", "Leave & go"],
            vec!["Buy", "Test", "Sign", "Deliver"],
            vec!["Buy", "Sign", "Test", "Deliver"],
        ])
        .unwrap();
        let mdt = decompose(&dfg_to_org(&paths_to_dfg(&n.paths)).unwrap()).unwrap();
        (synthesize(&mdt, &n.activities).unwrap(), n.activities)
    }

    #[test]
    fn car_element_counts() {
        let (model, acts) = car();
        let xml = export_bpmn_xml(&model, &acts);
        assert_eq!(xml.matches("<task ").count(), 6);
        assert_eq!(xml.matches("<exclusiveGateway ").count(), 2);
        assert_eq!(xml.matches("<parallelGateway ").count(), 2);
        assert!(xml.contains("name=\"Leave &amp; go\""));
        assert!(!xml.contains("BPMNDiagram"));
        assert_eq!(xml, export_bpmn_xml(&model, &acts));
    }

    #[test]
    fn single_task_document() {
        let mut acts = ActivityTable::new();
        let x = acts.insert_label("X");
        let model = synthesize(&MdtNode::leaf(x), &acts).unwrap();
        let xml = export_bpmn_xml(&model, &acts);
        assert_eq!(xml.matches("<sequenceFlow ").count(), 2);
        assert_eq!(xml.matches("Event ").count(), 2);
    }

    #[test]
    fn import_round_trip() {
        let (model, acts) = car();
        let (back, back_acts) = import_bpmn_xml(&export_bpmn_xml(&model, &acts)).unwrap();
        assert_eq!(back, model);
        assert_eq!(back_acts.ids(), acts.ids());
        assert_eq!(structure_hash(&back), structure_hash(&model));
    }

    #[test]
    fn import_rejects_garbage() {
        assert!(import_bpmn_xml("<definitions><process>").is_err());
        assert!(matches!(
            import_bpmn_xml("<definitions><process><task id=\"t\"/></process></definitions>"),
            Err(BpmnImportError::Invalid(_))
        ));
    }
}
