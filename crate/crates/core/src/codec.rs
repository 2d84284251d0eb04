//! draw.io XML <-> [`Diagram`].
//!
//! Parsing accepts a full `<mxfile><diagram><mxGraphModel>` document or a
//! bare `<mxGraphModel>`. Only the first `<diagram>` page is modeled.
//! Elements outside the modeled set are kept verbatim on the nearest cell so
//! real files survive a round trip.
//!
//! Serialization is canonical: fixed attribute order, two-space indentation,
//! no `<mxfile>` host metadata.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{Cell, CellKind, Diagram, Geometry, Violation, LAYER_ID, ROOT_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseIssueKind {
    NotWellFormed,
    MissingRootModel,
    MissingSkeleton,
    BadAttribute,
    /// `<diagram>` carries a compressed (base64 + deflate) payload.
    CompressedPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseIssue {
    pub kind: ParseIssueKind,
    /// 1-based (line, column).
    pub location: Option<(u32, u32)>,
    pub message: String,
}

impl ParseIssue {
    fn new(kind: ParseIssueKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            location: None,
            message: message.into(),
        }
    }

    fn at(kind: ParseIssueKind, doc: &roxmltree::Document<'_>, pos: usize, message: impl Into<String>) -> Self {
        let p = doc.text_pos_at(pos);
        Self {
            kind,
            location: Some((p.row, p.col)),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.location {
            Some((line, col)) => write!(f, "{}:{}: {}", line, col, self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SerializeError {
    #[error("diagram violates structural invariants: {0:?}")]
    IntegrityViolation(Vec<Violation>),
}

/// Structural-validity predicate: empty iff `text` is well-formed XML holding
/// an `<mxGraphModel>` with the 0/1 skeleton.
pub fn check_wellformed(text: &str) -> Vec<ParseIssue> {
    match parse(text) {
        Ok(_) => Vec::new(),
        Err(issues) => issues,
    }
}

/// Byte-level entry point; invalid UTF-8 is reported, never panics.
pub fn parse_bytes(bytes: &[u8]) -> Result<Diagram, Vec<ParseIssue>> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse(text),
        Err(e) => Err(vec![ParseIssue::new(
            ParseIssueKind::NotWellFormed,
            format!("invalid UTF-8 at byte {}", e.valid_up_to()),
        )]),
    }
}

pub fn parse(text: &str) -> Result<Diagram, Vec<ParseIssue>> {
    let doc = roxmltree::Document::parse(text).map_err(|e| {
        let pos = e.pos();
        vec![ParseIssue {
            kind: ParseIssueKind::NotWellFormed,
            location: Some((pos.row, pos.col)),
            message: e.to_string(),
        }]
    })?;

    let top = doc.root_element();
    let (name, page_id, model) = match top.tag_name().name() {
        "mxGraphModel" => ("Page-1".to_string(), None, top),
        "mxfile" => {
            let page = top
                .children()
                .find(|n| n.has_tag_name("diagram"))
                .ok_or_else(|| vec![ParseIssue::at(ParseIssueKind::MissingRootModel, &doc, top.range().start, "<mxfile> has no <diagram>")])?;
            let model = match page.children().find(|n| n.has_tag_name("mxGraphModel")) {
                Some(m) => m,
                None => {
                    let payload = page.children().any(|n| n.is_text() && !n.text().unwrap_or("").trim().is_empty());
                    let (kind, msg) = if payload {
                        (ParseIssueKind::CompressedPayload, "compressed <diagram> payloads are not supported")
                    } else {
                        (ParseIssueKind::MissingRootModel, "<diagram> has no <mxGraphModel>")
                    };
                    return Err(vec![ParseIssue::at(kind, &doc, page.range().start, msg)]);
                }
            };
            (
                page.attribute("name").unwrap_or("").to_string(),
                page.attribute("id").map(str::to_string),
                model,
            )
        }
        other => {
            return Err(vec![ParseIssue::at(
                ParseIssueKind::MissingRootModel,
                &doc,
                top.range().start,
                format!("expected <mxfile> or <mxGraphModel>, found <{other}>"),
            )])
        }
    };

    let root = model
        .children()
        .find(|n| n.has_tag_name("root"))
        .ok_or_else(|| vec![ParseIssue::at(ParseIssueKind::MissingSkeleton, &doc, model.range().start, "<mxGraphModel> has no <root>")])?;

    let mut diagram = Diagram {
        name,
        page_id,
        cells: Vec::new(),
        revision: 0,
        leading: Vec::new(),
    };
    let mut issues = Vec::new();
    for node in root.children() {
        if node.is_text() {
            continue;
        }
        if node.has_tag_name("mxCell") {
            match parse_cell(&doc, node, text) {
                Ok(cell) => diagram.cells.push(cell),
                Err(issue) => issues.push(issue),
            }
            continue;
        }
        let raw = text[node.range()].to_string();
        match diagram.cells.last_mut() {
            Some(cell) => cell.trailing.push(raw),
            None => diagram.leading.push(raw),
        }
    }
    if !issues.is_empty() {
        return Err(issues);
    }

    let skeleton_ok = diagram.cell(ROOT_ID).is_some_and(|c| c.kind == CellKind::Root)
        && diagram
            .cell(LAYER_ID)
            .is_some_and(|c| c.kind == CellKind::Layer && c.parent_id.as_deref() == Some(ROOT_ID));
    if !skeleton_ok {
        return Err(vec![ParseIssue::at(
            ParseIssueKind::MissingSkeleton,
            &doc,
            root.range().start,
            "missing root cell \"0\" or layer cell \"1\" (parent \"0\")",
        )]);
    }
    Ok(diagram)
}

fn parse_cell(doc: &roxmltree::Document<'_>, node: roxmltree::Node<'_, '_>, text: &str) -> Result<Cell, ParseIssue> {
    let bad = |msg: String| ParseIssue::at(ParseIssueKind::BadAttribute, doc, node.range().start, msg);
    let id = node
        .attribute("id")
        .ok_or_else(|| bad("<mxCell> without id".into()))?
        .to_string();
    if id.is_empty() {
        return Err(bad("<mxCell> with empty id".into()));
    }
    let flag = |name: &str| node.attribute(name) == Some("1");
    let parent_id = node.attribute("parent").map(str::to_string);
    let kind = match (flag("vertex"), flag("edge")) {
        (true, true) => return Err(bad(format!("cell {id:?} is both vertex and edge"))),
        (true, false) => CellKind::Vertex,
        (false, true) => CellKind::Edge,
        (false, false) if parent_id.is_none() => CellKind::Root,
        (false, false) => CellKind::Layer,
    };

    let mut extra_attrs = Vec::new();
    for attr in node.attributes() {
        match attr.name() {
            "id" | "value" | "style" | "parent" | "source" | "target" => {}
            "vertex" if kind == CellKind::Vertex => {}
            "edge" if kind == CellKind::Edge => {}
            name => extra_attrs.push((name.to_string(), attr.value().to_string())),
        }
    }

    let mut geometry = None;
    let mut annotations = Vec::new();
    for child in node.children() {
        if child.is_text() {
            continue;
        }
        if child.has_tag_name("mxGeometry") && child.attribute("as") == Some("geometry") && geometry.is_none() {
            geometry = Some(parse_geometry(doc, child, text)?);
        } else {
            annotations.push(text[child.range()].to_string());
        }
    }

    Ok(Cell {
        id,
        label: node.attribute("value").unwrap_or("").to_string(),
        style: node.attribute("style").unwrap_or("").to_string(),
        kind,
        parent_id,
        geometry,
        source_id: node.attribute("source").map(str::to_string),
        target_id: node.attribute("target").map(str::to_string),
        extra_attrs,
        annotations,
        trailing: Vec::new(),
    })
}

fn parse_geometry(doc: &roxmltree::Document<'_>, node: roxmltree::Node<'_, '_>, text: &str) -> Result<Geometry, ParseIssue> {
    let num = |name: &str| -> Result<f64, ParseIssue> {
        match node.attribute(name) {
            None => Ok(0.0),
            Some(raw) => raw.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                ParseIssue::at(
                    ParseIssueKind::BadAttribute,
                    doc,
                    node.range().start,
                    format!("mxGeometry {name}={raw:?} is not a finite number"),
                )
            }),
        }
    };
    Ok(Geometry {
        x: num("x")?,
        y: num("y")?,
        width: num("width")?,
        height: num("height")?,
        relative: node.attribute("relative") == Some("1"),
        children: node
            .children()
            .filter(|n| !n.is_text())
            .map(|n| text[n.range()].to_string())
            .collect(),
    })
}

const MODEL_ATTRS: &str = r#"dx="1426" dy="797" grid="1" gridSize="10" guides="1" tooltips="1" connect="1" arrows="1" fold="1" page="1" pageScale="1" pageWidth="850" pageHeight="1100" math="0" shadow="0""#;

pub fn serialize(d: &Diagram) -> Result<String, SerializeError> {
    let violations = d.integrity_check();
    if !violations.is_empty() {
        return Err(SerializeError::IntegrityViolation(violations));
    }
    let mut out = String::with_capacity(256 + d.cells.len() * 160);
    out.push_str("<mxfile>\n");
    out.push_str("  <diagram");
    push_attr(&mut out, "name", &d.name);
    if let Some(id) = &d.page_id {
        push_attr(&mut out, "id", id);
    }
    out.push_str(">\n");
    let _ = writeln!(out, "    <mxGraphModel {MODEL_ATTRS}>");
    out.push_str("      <root>\n");
    for raw in &d.leading {
        push_verbatim(&mut out, 8, raw);
    }
    for cell in &d.cells {
        write_cell(&mut out, cell);
        for raw in &cell.trailing {
            push_verbatim(&mut out, 8, raw);
        }
    }
    out.push_str("      </root>\n");
    out.push_str("    </mxGraphModel>\n");
    out.push_str("  </diagram>\n");
    out.push_str("</mxfile>\n");
    Ok(out)
}

fn write_cell(out: &mut String, cell: &Cell) {
    out.push_str("        <mxCell");
    push_attr(out, "id", &cell.id);
    let shape = matches!(cell.kind, CellKind::Vertex | CellKind::Edge);
    if shape || !cell.label.is_empty() {
        push_attr(out, "value", &cell.label);
    }
    if shape || !cell.style.is_empty() {
        push_attr(out, "style", &cell.style);
    }
    match cell.kind {
        CellKind::Vertex => push_attr(out, "vertex", "1"),
        CellKind::Edge => push_attr(out, "edge", "1"),
        CellKind::Root | CellKind::Layer => {}
    }
    if let Some(p) = &cell.parent_id {
        push_attr(out, "parent", p);
    }
    if let Some(s) = &cell.source_id {
        push_attr(out, "source", s);
    }
    if let Some(t) = &cell.target_id {
        push_attr(out, "target", t);
    }
    for (k, v) in &cell.extra_attrs {
        push_attr(out, k, v);
    }
    if cell.geometry.is_none() && cell.annotations.is_empty() {
        out.push_str(" />\n");
        return;
    }
    out.push_str(">\n");
    if let Some(g) = &cell.geometry {
        write_geometry(out, g);
    }
    for raw in &cell.annotations {
        push_verbatim(out, 10, raw);
    }
    out.push_str("        </mxCell>\n");
}

fn write_geometry(out: &mut String, g: &Geometry) {
    out.push_str("          <mxGeometry");
    for (name, v) in [("x", g.x), ("y", g.y), ("width", g.width), ("height", g.height)] {
        if v != 0.0 {
            push_attr(out, name, &v.to_string());
        }
    }
    if g.relative {
        push_attr(out, "relative", "1");
    }
    push_attr(out, "as", "geometry");
    if g.children.is_empty() {
        out.push_str(" />\n");
        return;
    }
    out.push_str(">\n");
    for raw in &g.children {
        push_verbatim(out, 12, raw);
    }
    out.push_str("          </mxGeometry>\n");
}

fn push_attr(out: &mut String, name: &str, value: &str) {
    out.push(' ');
    out.push_str(name);
    out.push_str("=\"");
    escape_attr_into(out, value);
    out.push('"');
}

fn push_verbatim(out: &mut String, indent: usize, raw: &str) {
    out.extend(std::iter::repeat_n(' ', indent));
    out.push_str(raw);
    out.push('\n');
}

/// Attribute-value escaping: the five predefined entities, plus character
/// references for whitespace that attribute normalization would otherwise
/// fold into spaces. Characters XML 1.0 cannot carry become U+FFFD.
pub fn escape_attr(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    escape_attr_into(&mut out, value);
    out
}

fn escape_attr_into(out: &mut String, value: &str) {
    for c in value.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            '\t' => out.push_str("&#9;"),
            c if is_xml_char(c) => out.push(c),
            _ => out.push('\u{FFFD}'),
        }
    }
}

fn is_xml_char(c: char) -> bool {
    matches!(c, '\u{20}'..='\u{D7FF}' | '\u{E000}'..='\u{FFFD}' | '\u{10000}'..='\u{10FFFF}')
}
