//! Engine for turning chat-model output into loadable, editable draw.io diagrams.
//!
//! The crate is organised bottom-up: [`model`] holds the in-memory diagram,
//! [`codec`] moves it to and from mxfile XML, [`validator`] repairs raw model
//! output, [`verify`] checks semantic coverage, [`layout`] places
//! coordinate-free shapes, [`prompt`] and [`provider`] talk to the model,
//! [`stream`] runs the two-phase streaming machine, [`history`] versions
//! snapshots and [`pipeline`] wires a full generation round together.

pub mod codec;
pub mod history;
pub mod layout;
pub mod lexer;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod provider;
pub mod stream;
pub mod validator;
pub mod verify;

pub use codec::{check_wellformed, parse, serialize, ParseIssue, ParseIssueKind};
pub use model::{Cell, CellKind, Diagram, DiagramDiff, Geometry, ModelError, Violation};
