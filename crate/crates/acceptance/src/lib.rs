//! Fixture generators and helpers for the acceptance suite.

use std::path::{Path, PathBuf};

use drawgen_core::{parse, CellKind, Diagram, Geometry};
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Every `*.drawio.xml` in the committed corpus, sorted by name.
pub fn corpus() -> Vec<(String, String)> {
    files_with_suffix(&workspace_root().join("crates/core/tests/fixtures/corpus"), ".drawio.xml")
}

/// Scripted model responses bundled with the CLI, sorted by path.
pub fn response_fixtures() -> Vec<(String, String)> {
    let cli = workspace_root().join("crates/cli");
    let mut out = files_with_suffix(&cli.join("bench/mock/responses"), ".txt");
    out.extend(
        files_with_suffix(&cli.join("tests/fixtures/perfect/responses"), ".txt")
            .into_iter()
            .map(|(n, t)| (format!("perfect/{n}"), t)),
    );
    out.extend(files_with_suffix(&cli.join("tests/fixtures"), ".response.txt"));
    out
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Vec<(String, String)> {
    let mut files: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.is_file() && p.to_string_lossy().ends_with(suffix))
        .map(|p| {
            let name = p.file_name().expect("file name").to_string_lossy().into_owned();
            let text = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (name, text)
        })
        .collect();
    files.sort();
    files
}

const LABELS: &[&str] = &[
    "A",
    "Web Server",
    "R&D",
    "x < y > z",
    "say \"hi\"",
    "it's",
    "<b>bold</b> text",
    "two\nlines",
    "tab\there",
    "ünïcödé ✓",
    "  padded  ",
    "",
    "&amp; already escaped",
    "100%",
];

const STYLES: &[&str] = &[
    "",
    "rounded=1;whiteSpace=wrap;html=1;",
    "shape=cylinder3;whiteSpace=wrap;html=1;boundedLbl=1;",
    "ellipse;whiteSpace=wrap;html=1;fillColor=#dae8fc;strokeColor=#6c8ebf;",
    "swimlane;startSize=23;",
    "text;html=1;align=center;",
];

const EDGE_STYLES: &[&str] = &["", "edgeStyle=orthogonalEdgeStyle;rounded=0;html=1;", "endArrow=none;dashed=1;"];

const EXTRA_ATTRS: &[(&str, &str)] = &[
    ("tooltip", "see docs & notes"),
    ("link", "https://example.com/?a=1&b=2"),
    ("collapsed", "1"),
    ("connectable", "0"),
];

fn coordinate(rng: &mut impl Rng) -> f64 {
    (rng.random_range(-400..4000) as f64) / 2.0
}

/// A random structurally valid diagram exercising escaping, nesting,
/// unmodeled attributes and edge geometry.
pub fn random_diagram(rng: &mut impl Rng) -> Diagram {
    let names = ["Page-1", "Ops & <Infra>", "Seite \"2\""];
    let mut d = Diagram::new_empty(*names.choose(rng).expect("non-empty"));
    if rng.random_bool(0.3) {
        d.page_id = Some(format!("pg-{}", rng.random_range(0..1000)));
    }
    let n = rng.random_range(0..12);
    let mut vertices: Vec<String> = Vec::new();
    for _ in 0..n {
        let g = Geometry::new(
            coordinate(rng),
            coordinate(rng),
            rng.random_range(1..400) as f64 / 2.0,
            rng.random_range(1..200) as f64 / 2.0,
        );
        let label = *LABELS.choose(rng).expect("non-empty");
        let style = *STYLES.choose(rng).expect("non-empty");
        let (next, id) = d.add_vertex(label, style, g).expect("positive area");
        d = next;
        let parent = if !vertices.is_empty() && rng.random_bool(0.2) {
            vertices.choose(rng).cloned()
        } else {
            None
        };
        let cell = d.cells.last_mut().expect("just added");
        if let Some(p) = parent {
            cell.parent_id = Some(p);
        }
        if rng.random_bool(0.25) {
            let (k, v) = *EXTRA_ATTRS.choose(rng).expect("non-empty");
            cell.extra_attrs.push((k.to_string(), v.to_string()));
        }
        vertices.push(id);
    }
    if !vertices.is_empty() {
        for _ in 0..rng.random_range(0..=n) {
            let s = vertices.choose(rng).expect("non-empty").clone();
            let t = vertices.choose(rng).expect("non-empty").clone();
            let label = if rng.random_bool(0.3) { *LABELS.choose(rng).expect("non-empty") } else { "" };
            let (next, _) = d.add_edge(&s, &t, label).expect("endpoints exist");
            d = next;
            let cell = d.cells.last_mut().expect("just added");
            cell.style = EDGE_STYLES.choose(rng).expect("non-empty").to_string();
            if rng.random_bool(0.3) {
                cell.geometry = Some(Geometry::relative_edge());
            }
        }
    }
    if rng.random_bool(0.15) {
        let mut layer = drawgen_core::Cell::layer();
        layer.id = "layer-2".into();
        d.cells.push(layer);
    }
    d
}

/// The damage classes the repair passes target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    UnescapedAmpersand,
    DeletedCloseTag,
    DanglingEdgeRef,
    StrippedSkeleton,
    /// Unescaped `&` together with a missing `</root>`.
    Combined,
}

pub const CORRUPTIONS: [Corruption; 5] = [
    Corruption::UnescapedAmpersand,
    Corruption::DeletedCloseTag,
    Corruption::DanglingEdgeRef,
    Corruption::StrippedSkeleton,
    Corruption::Combined,
];

fn replace_nth_value(text: &str, with: &str) -> String {
    // First non-empty value attribute gets an unescaped ampersand.
    let mut search = 0;
    while let Some(pos) = text[search..].find("value=\"") {
        let start = search + pos + "value=\"".len();
        if !text[start..].starts_with('"') {
            return format!("{}{with}{}", &text[..start], &text[start..]);
        }
        search = start;
    }
    text.replacen("<root>", &format!("<root><!-- {with} -->"), 1)
}

fn drop_close_tag(text: &str, variant: usize) -> String {
    let tag = ["</root>", "</mxCell>", "</mxGraphModel>"][variant % 3];
    match text.rfind(tag) {
        Some(pos) => format!("{}{}", &text[..pos], &text[pos + tag.len()..]),
        None => text.to_string(),
    }
}

fn dangle_edge(text: &str) -> String {
    if let Some(pos) = text.find("edge=\"1\"") {
        // Point the first edge at a cell that does not exist.
        let line_end = text[pos..].find('>').map(|e| pos + e).unwrap_or(text.len());
        let line = &text[pos..line_end];
        if let Some(t) = line.find("target=\"") {
            let vstart = pos + t + "target=\"".len();
            let vend = vstart + text[vstart..].find('"').expect("closing quote");
            return format!("{}ghost-404{}", &text[..vstart], &text[vend..]);
        }
    }
    text.replacen(
        "</root>",
        r#"<mxCell id="dangling-edge" edge="1" parent="1" source="ghost-1" target="ghost-2"><mxGeometry relative="1" as="geometry" /></mxCell></root>"#,
        1,
    )
}

fn strip_skeleton(text: &str) -> String {
    let mut out = text.to_string();
    for cell in [
        r#"<mxCell id="0" />"#,
        r#"<mxCell id="0"/>"#,
        r#"<mxCell id="1" parent="0" />"#,
        r#"<mxCell id="1" parent="0"/>"#,
    ] {
        out = out.replacen(cell, "", 1);
    }
    out
}

/// Applies one corruption. `variant` varies which close tag is deleted.
pub fn corrupt(text: &str, kind: Corruption, variant: usize) -> String {
    match kind {
        Corruption::UnescapedAmpersand => replace_nth_value(text, "Q&A "),
        Corruption::DeletedCloseTag => drop_close_tag(text, variant),
        Corruption::DanglingEdgeRef => dangle_edge(text),
        Corruption::StrippedSkeleton => strip_skeleton(text),
        Corruption::Combined => drop_close_tag(&replace_nth_value(text, "Q&A "), 0),
    }
}

/// Ids of the vertices in a clean document.
pub fn vertex_ids(text: &str) -> Vec<String> {
    parse(text)
        .map(|d| d.cells.iter().filter(|c| c.kind == CellKind::Vertex).map(|c| c.id.clone()).collect())
        .unwrap_or_default()
}

/// Splits into pieces of `size` characters; `None` means one piece.
pub fn chunk(text: &str, size: Option<usize>) -> Vec<String> {
    match size {
        None => vec![text.to_string()],
        Some(n) => {
            let chars: Vec<char> = text.chars().collect();
            chars.chunks(n).map(|c| c.iter().collect()).collect()
        }
    }
}

/// Checks `text* phase? repair? (diagram|error) done` over event names.
pub fn event_order_ok(names: &[&str]) -> bool {
    let mut i = 0;
    while names.get(i) == Some(&"text") {
        i += 1;
    }
    if names.get(i) == Some(&"phase") {
        i += 1;
    }
    if names.get(i) == Some(&"repair") {
        i += 1;
    }
    matches!(names.get(i), Some(&"diagram") | Some(&"error")) && names.get(i + 1) == Some(&"done") && names.len() == i + 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn order_checker() {
        assert!(event_order_ok(&["text", "text", "phase", "repair", "diagram", "done"]));
        assert!(event_order_ok(&["error", "done"]));
        assert!(!event_order_ok(&["text", "done"]));
        assert!(!event_order_ok(&["phase", "text", "diagram", "done"]));
        assert!(!event_order_ok(&["diagram", "done", "text"]));
    }

    #[test]
    fn random_diagrams_are_valid() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        for _ in 0..50 {
            assert!(random_diagram(&mut rng).integrity_check().is_empty());
        }
    }

    #[test]
    fn corruptions_change_the_text() {
        for (name, text) in corpus() {
            for kind in CORRUPTIONS {
                assert_ne!(corrupt(&text, kind, 0), text, "{name} {kind:?}");
            }
        }
    }

    #[test]
    fn chunking_preserves_text() {
        let t = "ab✓cd";
        assert_eq!(chunk(t, Some(2)), vec!["ab", "✓c", "d"]);
        assert_eq!(chunk(t, None).concat(), t);
    }
}
