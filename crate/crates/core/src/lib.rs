//! Turns process descriptions into block-structured BPMN models through
//! inspectable intermediate artifacts.

pub mod mdt;
pub mod relations;
pub mod synthesis;
pub mod verification;
pub mod entanglement;
pub mod abstraction;
pub mod session;
pub mod bpmn_io;
pub mod llm_gateway;
