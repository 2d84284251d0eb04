//! In-memory draw.io diagram: cells, geometry, integrity checking and diffing.
//!
//! A [`Diagram`] is an immutable snapshot. The editing operations
//! ([`Diagram::add_vertex`], [`Diagram::add_edge`]) return a new value and
//! leave the receiver untouched.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

/// Id of the mandatory root cell.
pub const ROOT_ID: &str = "0";
/// Id of the mandatory default layer.
pub const LAYER_ID: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Edge geometries are relative and usually degenerate.
    #[serde(default)]
    pub relative: bool,
    /// Child elements of `<mxGeometry>` (points, arrays) kept verbatim.
    #[serde(default)]
    pub children: Vec<String>,
}

impl Geometry {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            x,
            y,
            width,
            height,
            relative: false,
            children: Vec::new(),
        }
    }

    /// The `relative="1"` geometry draw.io expects on connectors.
    pub fn relative_edge() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            width: 0.0,
            height: 0.0,
            relative: true,
            children: Vec::new(),
        }
    }

    pub fn has_area(&self) -> bool {
        self.width > 0.0 && self.height > 0.0
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.width.is_finite() && self.height.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Root,
    Layer,
    Vertex,
    Edge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub label: String,
    pub style: String,
    pub kind: CellKind,
    pub parent_id: Option<String>,
    pub geometry: Option<Geometry>,
    pub source_id: Option<String>,
    pub target_id: Option<String>,
    /// Attributes outside the modeled set, in document order.
    #[serde(default)]
    pub extra_attrs: Vec<(String, String)>,
    /// Unknown child elements of the `<mxCell>`, verbatim.
    #[serde(default)]
    pub annotations: Vec<String>,
    /// Unknown sibling nodes that followed this cell inside `<root>`, verbatim.
    #[serde(default)]
    pub trailing: Vec<String>,
}

impl Cell {
    fn bare(id: impl Into<String>, kind: CellKind, parent_id: Option<String>) -> Self {
        Self {
            id: id.into(),
            label: String::new(),
            style: String::new(),
            kind,
            parent_id,
            geometry: None,
            source_id: None,
            target_id: None,
            extra_attrs: Vec::new(),
            annotations: Vec::new(),
            trailing: Vec::new(),
        }
    }

    pub fn root() -> Self {
        Self::bare(ROOT_ID, CellKind::Root, None)
    }

    pub fn layer() -> Self {
        Self::bare(LAYER_ID, CellKind::Layer, Some(ROOT_ID.to_string()))
    }

    /// A vertex on the default layer. `geometry` may be absent for shapes the
    /// layout engine should place.
    pub fn vertex(
        id: impl Into<String>,
        label: impl Into<String>,
        style: impl Into<String>,
        geometry: Option<Geometry>,
    ) -> Self {
        let mut cell = Self::bare(id, CellKind::Vertex, Some(LAYER_ID.to_string()));
        cell.label = label.into();
        cell.style = style.into();
        cell.geometry = geometry;
        cell
    }

    pub fn edge(
        id: impl Into<String>,
        label: impl Into<String>,
        source_id: Option<String>,
        target_id: Option<String>,
    ) -> Self {
        let mut cell = Self::bare(id, CellKind::Edge, Some(LAYER_ID.to_string()));
        cell.label = label.into();
        cell.style = DEFAULT_EDGE_STYLE.to_string();
        cell.geometry = Some(Geometry::relative_edge());
        cell.source_id = source_id;
        cell.target_id = target_id;
        cell
    }

    pub fn is_vertex(&self) -> bool {
        self.kind == CellKind::Vertex
    }

    pub fn is_edge(&self) -> bool {
        self.kind == CellKind::Edge
    }
}

const DEFAULT_EDGE_STYLE: &str = "edgeStyle=orthogonalEdgeStyle;rounded=0;html=1;endArrow=classic;";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid geometry: width and height must be finite and > 0 (got {width}x{height})")]
    InvalidGeometry { width: f64, height: f64 },
    #[error("unknown edge endpoint: {0}")]
    UnknownEndpoint(String),
}

/// One broken structural invariant, as reported by [`Diagram::integrity_check`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Violation {
    /// The root ("0") or default layer ("1") cell is absent or malformed.
    MissingSkeleton(String),
    DuplicateId(String),
    /// A cell names a parent id no cell carries.
    OrphanParent(String),
    /// A cell appears before its parent in document order.
    ChildBeforeParent { child: String, parent: String },
    /// A second parentless cell besides the root.
    ExtraRoot(String),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MissingSkeleton(d) => write!(f, "missing skeleton: {d}"),
            Violation::DuplicateId(id) => write!(f, "duplicate id {id:?}"),
            Violation::OrphanParent(p) => write!(f, "parent {p:?} does not exist"),
            Violation::ChildBeforeParent { child, parent } => {
                write!(f, "cell {child:?} appears before its parent {parent:?}")
            }
            Violation::ExtraRoot(id) => write!(f, "cell {id:?} has no parent"),
        }
    }
}

/// A draw.io diagram page.
///
/// Equality compares document content (name, page id, cells, root-level
/// extras). `revision` is a local edit counter and is not part of the
/// document, so it is ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagram {
    pub name: String,
    /// The `<diagram id>` attribute, when one was present.
    #[serde(default)]
    pub page_id: Option<String>,
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub revision: u64,
    /// Unknown nodes that preceded the first cell inside `<root>`, verbatim.
    #[serde(default)]
    pub leading: Vec<String>,
}

impl PartialEq for Diagram {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.page_id == other.page_id
            && self.cells == other.cells
            && self.leading == other.leading
    }
}

impl Diagram {
    /// The canonical two-cell skeleton: root "0" and layer "1".
    pub fn new_empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            page_id: None,
            cells: vec![Cell::root(), Cell::layer()],
            revision: 0,
            leading: Vec::new(),
        }
    }

    pub fn cell(&self, id: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn vertices(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.is_vertex())
    }

    pub fn edges(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.is_edge())
    }

    /// Next decimal id: one past the largest numeric id in the diagram,
    /// including ids that only appear inside verbatim annotations.
    pub fn fresh_id(&self) -> String {
        let mut max: Option<u128> = None;
        let mut bump = |v: u128| max = Some(max.map_or(v, |m| m.max(v)));
        for cell in &self.cells {
            if let Some(v) = numeric_id(&cell.id) {
                bump(v);
            }
            for raw in cell.annotations.iter().chain(&cell.trailing) {
                embedded_numeric_ids(raw).for_each(&mut bump);
            }
        }
        for raw in &self.leading {
            embedded_numeric_ids(raw).for_each(&mut bump);
        }
        match max {
            Some(m) => m.saturating_add(1).to_string(),
            None => "0".to_string(),
        }
    }

    pub fn add_vertex(
        &self,
        label: &str,
        style: &str,
        geometry: Geometry,
    ) -> Result<(Diagram, String), ModelError> {
        if !geometry.has_area() || !geometry.is_finite() {
            return Err(ModelError::InvalidGeometry {
                width: geometry.width,
                height: geometry.height,
            });
        }
        let id = self.fresh_id();
        let mut next = self.clone();
        next.cells.push(Cell::vertex(id.clone(), label, style, Some(geometry)));
        next.revision += 1;
        Ok((next, id))
    }

    pub fn add_edge(
        &self,
        source_id: &str,
        target_id: &str,
        label: &str,
    ) -> Result<(Diagram, String), ModelError> {
        for endpoint in [source_id, target_id] {
            if !self.cell(endpoint).is_some_and(Cell::is_vertex) {
                return Err(ModelError::UnknownEndpoint(endpoint.to_string()));
            }
        }
        let id = self.fresh_id();
        let mut next = self.clone();
        next.cells.push(Cell::edge(
            id.clone(),
            label,
            Some(source_id.to_string()),
            Some(target_id.to_string()),
        ));
        next.revision += 1;
        Ok((next, id))
    }

    /// Every structural invariant violation; empty iff the diagram is well-formed.
    pub fn integrity_check(&self) -> Vec<Violation> {
        let mut out = Vec::new();

        match self.cell(ROOT_ID) {
            Some(c) if c.kind == CellKind::Root && c.parent_id.is_none() => {}
            Some(_) => out.push(Violation::MissingSkeleton(format!(
                "cell {ROOT_ID:?} is not a parentless root"
            ))),
            None => out.push(Violation::MissingSkeleton(format!("no root cell {ROOT_ID:?}"))),
        }
        match self.cell(LAYER_ID) {
            Some(c) if c.kind == CellKind::Layer && c.parent_id.as_deref() == Some(ROOT_ID) => {}
            Some(_) => out.push(Violation::MissingSkeleton(format!(
                "cell {LAYER_ID:?} is not a layer under {ROOT_ID:?}"
            ))),
            None => out.push(Violation::MissingSkeleton(format!("no layer cell {LAYER_ID:?}"))),
        }

        let mut seen = HashSet::new();
        let mut reported = HashSet::new();
        for cell in &self.cells {
            if !seen.insert(cell.id.as_str()) && reported.insert(cell.id.as_str()) {
                out.push(Violation::DuplicateId(cell.id.clone()));
            }
        }

        let first_index: HashMap<&str, usize> = self
            .cells
            .iter()
            .enumerate()
            .rev()
            .map(|(i, c)| (c.id.as_str(), i))
            .collect();
        for (i, cell) in self.cells.iter().enumerate() {
            match &cell.parent_id {
                None if cell.id != ROOT_ID => out.push(Violation::ExtraRoot(cell.id.clone())),
                None => {}
                Some(parent) => match first_index.get(parent.as_str()) {
                    None => out.push(Violation::OrphanParent(parent.clone())),
                    Some(&pi) if pi >= i => out.push(Violation::ChildBeforeParent {
                        child: cell.id.clone(),
                        parent: parent.clone(),
                    }),
                    Some(_) => {}
                },
            }
        }
        out
    }

    pub fn is_well_formed(&self) -> bool {
        self.integrity_check().is_empty()
    }

    /// Id-based change summary from `self` to `newer`.
    ///
    /// A shared cell whose label and geometry both changed is listed under
    /// `relabeled` only, keeping the four lists disjoint.
    pub fn diff(&self, newer: &Diagram) -> DiagramDiff {
        let old_by_id: HashMap<&str, &Cell> = self.cells.iter().map(|c| (c.id.as_str(), c)).collect();
        let new_ids: HashSet<&str> = newer.cells.iter().map(|c| c.id.as_str()).collect();
        let mut diff = DiagramDiff::default();
        let mut visited = HashSet::new();

        for cell in &newer.cells {
            if !visited.insert(cell.id.as_str()) {
                continue;
            }
            match old_by_id.get(cell.id.as_str()) {
                None => diff.added.push(cell.id.clone()),
                Some(old) if old.label != cell.label => diff.relabeled.push(Relabel {
                    id: cell.id.clone(),
                    old: old.label.clone(),
                    new: cell.label.clone(),
                }),
                Some(old) if old.geometry != cell.geometry => diff.moved.push(Move {
                    id: cell.id.clone(),
                    old: old.geometry.clone(),
                    new: cell.geometry.clone(),
                }),
                Some(_) => {}
            }
        }
        let mut removed_seen = HashSet::new();
        for cell in &self.cells {
            if !new_ids.contains(cell.id.as_str()) && removed_seen.insert(cell.id.as_str()) {
                diff.removed.push(cell.id.clone());
            }
        }
        diff
    }
}

fn numeric_id(id: &str) -> Option<u128> {
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    id.parse().ok()
}

fn embedded_numeric_ids(raw: &str) -> impl Iterator<Item = u128> + '_ {
    raw.match_indices("id=").filter_map(move |(pos, _)| {
        // Only whole `id` attribute names, not `parentid=` and friends.
        let before = raw[..pos].chars().next_back();
        if before.is_some_and(|c| !c.is_whitespace()) {
            return None;
        }
        let rest = &raw[pos + 3..];
        let quote = rest.chars().next().filter(|c| *c == '"' || *c == '\'')?;
        let value = rest[1..].split(quote).next()?;
        numeric_id(value)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relabel {
    pub id: String,
    pub old: String,
    pub new: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub id: String,
    pub old: Option<Geometry>,
    pub new: Option<Geometry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagramDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub relabeled: Vec<Relabel>,
    pub moved: Vec<Move>,
}

impl DiagramDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.relabeled.is_empty() && self.moved.is_empty()
    }

    pub fn changed_count(&self) -> usize {
        self.added.len() + self.removed.len() + self.relabeled.len() + self.moved.len()
    }
}
