//! Post-generation validation and correction of raw model output.
//!
//! [`validate_and_correct`] extracts the XML document from a response, checks
//! it, and runs [`repair`] when needed. Repair is a fixed sequence of local
//! passes; whatever they cannot fix is reported as residual issues, and the
//! caller escalates with [`build_self_correction_prompt`].

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::{check_wellformed, ParseIssue, ParseIssueKind};
use crate::lexer::{is_entity_at, Lexer, RegionScanner, Token, TokenKind};
use crate::model::{LAYER_ID, ROOT_ID};
use crate::prompt::{build_system_prompt, ChatTurn, PromptBundle, PromptConfig};

/// Stable issue identifiers, shared with the service API and CLI output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueCategory {
    NoXmlFound,
    UnescapedChar,
    MismatchedTag,
    MissingRequiredAttr,
    DanglingEdgeRef,
    MissingSkeleton,
    /// A cell names a parent that does not exist.
    BrokenHierarchy,
    /// Residual parser error outside the classes the passes repair.
    NotWellFormed,
}

impl IssueCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueCategory::NoXmlFound => "no_xml_found",
            IssueCategory::UnescapedChar => "unescaped_char",
            IssueCategory::MismatchedTag => "mismatched_tag",
            IssueCategory::MissingRequiredAttr => "missing_required_attr",
            IssueCategory::DanglingEdgeRef => "dangling_edge_ref",
            IssueCategory::MissingSkeleton => "missing_skeleton",
            IssueCategory::BrokenHierarchy => "broken_hierarchy",
            IssueCategory::NotWellFormed => "not_well_formed",
        }
    }

    fn describe(self) -> &'static str {
        match self {
            IssueCategory::NoXmlFound => "no <mxfile> or <mxGraphModel> document found",
            IssueCategory::UnescapedChar => "unescaped special character",
            IssueCategory::MismatchedTag => "mismatched or unclosed tag",
            IssueCategory::MissingRequiredAttr => "missing required attribute",
            IssueCategory::DanglingEdgeRef => "edge refers to a cell id that does not exist",
            IssueCategory::MissingSkeleton => "missing root/layer skeleton cells",
            IssueCategory::BrokenHierarchy => "cell parent does not exist",
            IssueCategory::NotWellFormed => "document is not well-formed XML",
        }
    }
}

impl std::fmt::Display for IssueCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub category: IssueCategory,
    pub detail: String,
    /// True only when a pass actually changed the text for this issue.
    pub repaired: bool,
}

impl Issue {
    fn fixed(category: IssueCategory, detail: impl Into<String>) -> Self {
        Self {
            category,
            detail: detail.into(),
            repaired: true,
        }
    }

    fn residual(category: IssueCategory, detail: impl Into<String>) -> Self {
        Self {
            category,
            detail: detail.into(),
            repaired: false,
        }
    }
}

impl From<&ParseIssue> for Issue {
    fn from(p: &ParseIssue) -> Self {
        let category = match p.kind {
            ParseIssueKind::MissingSkeleton | ParseIssueKind::MissingRootModel => IssueCategory::MissingSkeleton,
            ParseIssueKind::NotWellFormed | ParseIssueKind::BadAttribute | ParseIssueKind::CompressedPayload => {
                IssueCategory::NotWellFormed
            }
        };
        Issue::residual(category, p.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    CleanFirstPass,
    RepairedLocally,
    NeedsReprompt,
    Failed,
}

impl OutcomeStatus {
    pub fn is_usable(self) -> bool {
        matches!(self, OutcomeStatus::CleanFirstPass | OutcomeStatus::RepairedLocally)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub status: OutcomeStatus,
    /// Loadable XML; present exactly when the status is usable.
    pub xml: Option<String>,
    pub issues: Vec<Issue>,
    pub passes_applied: Vec<String>,
    /// The raw document cut out of the response, before repair.
    pub extracted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no <mxfile> or <mxGraphModel> element in response")]
pub struct NoXmlFound;

/// Cuts the first `<mxfile>`/`<mxGraphModel>` document out of a response,
/// dropping prose and code fences around it.
pub fn extract_xml(response: &str) -> Result<&str, NoXmlFound> {
    let mut scanner = RegionScanner::new();
    scanner.advance(response, true);
    let start = scanner.start.ok_or(NoXmlFound)?;
    match scanner.end {
        Some(end) => Ok(&response[start..end]),
        None => {
            let region = &response[start..];
            let last_tag = region.rfind('>').map_or(0, |p| p + 1);
            let cut = region[last_tag..].find("```").map_or(region.len(), |p| last_tag + p);
            Ok(region[..cut].trim_end())
        }
    }
}

pub const PASS_ESCAPE: &str = "escape_chars";
pub const PASS_TAGS: &str = "balance_tags";
pub const PASS_SKELETON: &str = "inject_skeleton";
pub const PASS_ATTRS: &str = "fill_required_attrs";
pub const PASS_EDGE_REFS: &str = "drop_dangling_refs";

#[derive(Debug, Clone, PartialEq)]
pub struct RepairResult {
    pub text: String,
    pub issues: Vec<Issue>,
    pub passes_applied: Vec<String>,
}

type Pass = fn(&str, &mut Vec<Issue>) -> String;

/// Best-effort local repair. Passes run in a fixed order: escaping, tag
/// balancing, skeleton injection, required attributes, dangling edge
/// references. Issues the passes could not fix come back with
/// `repaired == false`.
pub fn repair(text: &str) -> RepairResult {
    let mut issues = Vec::new();
    let mut passes_applied = Vec::new();
    let passes: [(&str, Pass); 5] = [
        (PASS_ESCAPE, escape_pass),
        (PASS_TAGS, balance_pass),
        (PASS_SKELETON, skeleton_pass),
        (PASS_ATTRS, attrs_pass),
        (PASS_EDGE_REFS, edge_ref_pass),
    ];
    let mut current = text.to_string();
    for (name, pass) in passes {
        let before = issues.len();
        current = pass(&current, &mut issues);
        if issues.len() > before {
            passes_applied.push(name.to_string());
        }
    }
    issues.extend(check_wellformed(&current).iter().map(Issue::from));
    RepairResult {
        text: current,
        issues,
        passes_applied,
    }
}

pub fn validate_and_correct(response: &str) -> CorrectionOutcome {
    let extracted = match extract_xml(response) {
        Ok(x) => x,
        Err(e) => {
            return CorrectionOutcome {
                status: OutcomeStatus::Failed,
                xml: None,
                issues: vec![Issue::residual(IssueCategory::NoXmlFound, e.to_string())],
                passes_applied: Vec::new(),
                extracted: None,
            }
        }
    };
    let repaired = repair(extracted);
    let residual = repaired.issues.iter().any(|i| !i.repaired);
    let status = if residual {
        OutcomeStatus::NeedsReprompt
    } else if repaired.issues.is_empty() {
        OutcomeStatus::CleanFirstPass
    } else {
        OutcomeStatus::RepairedLocally
    };
    CorrectionOutcome {
        status,
        xml: status.is_usable().then(|| repaired.text.clone()),
        issues: repaired.issues,
        passes_applied: repaired.passes_applied,
        extracted: Some(extracted.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelfCorrectionError {
    #[error("self-correction needs at least one issue")]
    EmptyIssueList,
}

pub const PREVIOUS_OUTPUT_BEGIN: &str = "<<<PREVIOUS_OUTPUT>>>";
pub const PREVIOUS_OUTPUT_END: &str = "<<<END_PREVIOUS_OUTPUT>>>";

/// Re-prompt asking the model to re-emit a corrected document. Uses the same
/// system prompt as generation.
pub fn build_self_correction_prompt(
    bad_text: &str,
    issues: &[Issue],
    cfg: &PromptConfig,
) -> Result<PromptBundle, SelfCorrectionError> {
    if issues.is_empty() {
        return Err(SelfCorrectionError::EmptyIssueList);
    }
    let mut user = String::from("Your previous output is not a loadable draw.io diagram. Problems found:\n");
    for issue in issues {
        user.push_str(&format!("- [{}] {}: {}\n", issue.category, issue.category.describe(), issue.detail));
    }
    user.push_str("\nPrevious output:\n");
    user.push_str(PREVIOUS_OUTPUT_BEGIN);
    user.push('\n');
    user.push_str(bad_text);
    if !bad_text.ends_with('\n') {
        user.push('\n');
    }
    user.push_str(PREVIOUS_OUTPUT_END);
    user.push_str("\n\nReturn the complete corrected XML document only, with no explanation.");
    Ok(PromptBundle::new(vec![
        ChatTurn::system(build_system_prompt(cfg)),
        ChatTurn::user(user),
    ]))
}

/// Number of `<mxCell vertex="1">` start tags, by lenient tokenization.
pub fn count_vertex_tags(text: &str) -> usize {
    Lexer::new(text)
        .filter(|t| t.start_name() == Some("mxCell") && t.attr(text, "vertex") == Some("1"))
        .count()
}

fn apply_edits(src: &str, mut edits: Vec<(Range<usize>, String)>) -> String {
    edits.sort_by_key(|(r, _)| (r.start, r.end));
    let mut out = String::with_capacity(src.len() + 64);
    let mut at = 0;
    for (range, replacement) in edits {
        debug_assert!(range.start >= at, "overlapping edits");
        out.push_str(&src[at..range.start]);
        out.push_str(&replacement);
        at = range.end;
    }
    out.push_str(&src[at..]);
    out
}

fn escape_segment(segment: &str, what: &str, out: &mut String, issues: &mut Vec<Issue>) {
    for (i, c) in segment.char_indices() {
        match c {
            '&' if !is_entity_at(segment, i) => {
                out.push_str("&amp;");
                issues.push(Issue::fixed(IssueCategory::UnescapedChar, format!("bare '&' in {what}")));
            }
            '<' => {
                out.push_str("&lt;");
                issues.push(Issue::fixed(IssueCategory::UnescapedChar, format!("bare '<' in {what}")));
            }
            c => out.push(c),
        }
    }
}

fn escape_pass(src: &str, issues: &mut Vec<Issue>) -> String {
    let mut out = String::with_capacity(src.len() + 16);
    for tok in Lexer::new(src) {
        let raw = &src[tok.range.clone()];
        match &tok.kind {
            TokenKind::Text => escape_segment(raw, "text", &mut out, issues),
            TokenKind::StartTag { attrs, .. } => {
                let mut at = tok.range.start;
                for attr in attrs.iter().filter(|a| a.quoted) {
                    out.push_str(&src[at..attr.value.start]);
                    let what = format!("attribute {:?}", attr.name);
                    escape_segment(&src[attr.value.clone()], &what, &mut out, issues);
                    at = attr.value.end;
                }
                out.push_str(&src[at..tok.range.end]);
            }
            _ => out.push_str(raw),
        }
    }
    out
}

/// Elements that never legitimately contain `child`; an open one is closed
/// implicitly when `child` starts.
fn closes_implicitly(open: &str, child: &str) -> bool {
    match child {
        "mxCell" => matches!(open, "mxCell" | "mxGeometry" | "mxPoint" | "Array"),
        "mxGeometry" => matches!(open, "mxGeometry" | "mxPoint" | "Array"),
        "mxPoint" => open == "mxPoint",
        _ => false,
    }
}

fn balance_pass(src: &str, issues: &mut Vec<Issue>) -> String {
    let mut out = String::with_capacity(src.len() + 32);
    let mut stack: Vec<String> = Vec::new();
    for tok in Lexer::new(src) {
        let raw = &src[tok.range.clone()];
        match &tok.kind {
            TokenKind::StartTag { name, self_closing, .. } => {
                while stack.last().is_some_and(|top| closes_implicitly(top, name)) {
                    let top = stack.pop().unwrap_or_default();
                    issues.push(Issue::fixed(
                        IssueCategory::MismatchedTag,
                        format!("unclosed <{top}> closed before <{name}>"),
                    ));
                    out.push_str(&format!("</{top}>"));
                }
                out.push_str(raw);
                if !self_closing {
                    stack.push(name.clone());
                }
            }
            TokenKind::EndTag { name } => {
                if stack.last() == Some(name) {
                    stack.pop();
                    out.push_str(raw);
                } else if let Some(idx) = stack.iter().rposition(|n| n == name) {
                    while stack.len() > idx + 1 {
                        let top = stack.pop().unwrap_or_default();
                        issues.push(Issue::fixed(
                            IssueCategory::MismatchedTag,
                            format!("unclosed <{top}> closed before </{name}>"),
                        ));
                        out.push_str(&format!("</{top}>"));
                    }
                    stack.pop();
                    out.push_str(raw);
                } else {
                    issues.push(Issue::fixed(IssueCategory::MismatchedTag, format!("orphan </{name}> dropped")));
                }
            }
            TokenKind::Incomplete => {
                let preview: String = raw.chars().take(24).collect();
                issues.push(Issue::fixed(
                    IssueCategory::MismatchedTag,
                    format!("truncated markup {preview:?} dropped"),
                ));
            }
            TokenKind::Text | TokenKind::Markup => out.push_str(raw),
        }
    }
    while let Some(top) = stack.pop() {
        issues.push(Issue::fixed(IssueCategory::MismatchedTag, format!("missing </{top}> added")));
        out.push_str(&format!("</{top}>"));
    }
    out
}

/// Tokens annotated with the name of their enclosing element.
struct Scoped {
    tok: Token,
    parent: Option<String>,
    /// Index of the matching end token for non-self-closing start tags.
    close: Option<usize>,
}

fn scoped_tokens(src: &str) -> Vec<Scoped> {
    let mut out: Vec<Scoped> = Vec::new();
    let mut stack: Vec<(String, usize)> = Vec::new();
    for tok in Lexer::new(src) {
        let parent = stack.last().map(|(n, _)| n.clone());
        let idx = out.len();
        match &tok.kind {
            TokenKind::StartTag { name, self_closing: false, .. } => stack.push((name.clone(), idx)),
            TokenKind::EndTag { name } => {
                if let Some(pos) = stack.iter().rposition(|(n, _)| n == name) {
                    let (_, open_idx) = stack[pos];
                    stack.truncate(pos);
                    out[open_idx].close = Some(idx);
                }
            }
            _ => {}
        }
        let parent = match &tok.kind {
            TokenKind::EndTag { .. } => stack.last().map(|(n, _)| n.clone()),
            _ => parent,
        };
        out.push(Scoped { tok, parent, close: None });
    }
    out
}

const SKELETON_XML: &str = r#"<mxCell id="0" /><mxCell id="1" parent="0" />"#;
const LAYER_XML: &str = r#"<mxCell id="1" parent="0" />"#;
const ROOT_CELL_XML: &str = r#"<mxCell id="0" />"#;

fn is_root_cell(s: &Scoped, src: &str) -> bool {
    s.tok.start_name() == Some("mxCell") && s.parent.as_deref() == Some("root") && s.tok.attr(src, "id").is_some()
}

fn skeleton_pass(src: &str, issues: &mut Vec<Issue>) -> String {
    let toks = scoped_tokens(src);
    let find = |name: &str| toks.iter().position(|s| s.tok.start_name() == Some(name));
    let self_closing = |s: &Scoped| matches!(s.tok.kind, TokenKind::StartTag { self_closing: true, .. });
    let mut edits = Vec::new();

    let Some(model_idx) = find("mxGraphModel") else {
        // A <diagram> with no content at all gets an empty model.
        if let Some(d) = find("diagram") {
            let page = &toks[d];
            let empty = match page.close {
                Some(c) => toks[d + 1..c].iter().all(|s| s.tok.kind == TokenKind::Text && src[s.tok.range.clone()].trim().is_empty()),
                None => self_closing(page),
            };
            if empty {
                let model = format!("<mxGraphModel><root>{SKELETON_XML}</root></mxGraphModel>");
                let edit = match page.close {
                    Some(c) => (toks[c].tok.range.start..toks[c].tok.range.start, model),
                    None => {
                        let r = page.tok.range.clone();
                        let open = src[r.clone()].trim_end_matches("/>").trim_end().to_string();
                        (r, format!("{open}>{model}</diagram>"))
                    }
                };
                edits.push(edit);
                issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "empty <diagram> given a <mxGraphModel>"));
            }
        }
        return apply_edits(src, edits);
    };

    let model = &toks[model_idx];
    if self_closing(model) {
        let r = model.tok.range.clone();
        let open = src[r.clone()].trim_end_matches("/>").trim_end().to_string();
        edits.push((r, format!("{open}><root>{SKELETON_XML}</root></mxGraphModel>")));
        issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "empty <mxGraphModel> given a <root> with skeleton cells"));
        return apply_edits(src, edits);
    }
    let model_end = model.close.unwrap_or(toks.len());
    let root_idx = toks[model_idx + 1..model_end]
        .iter()
        .position(|s| s.tok.start_name() == Some("root") && s.parent.as_deref() == Some("mxGraphModel"))
        .map(|p| p + model_idx + 1);

    let Some(root_idx) = root_idx else {
        let after_open = model.tok.range.end;
        edits.push((after_open..after_open, format!("<root>{SKELETON_XML}")));
        let before_close = model.close.map_or(src.len(), |c| toks[c].tok.range.start);
        edits.push((before_close..before_close, "</root>".to_string()));
        issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "missing <root> element added around the cells"));
        return apply_edits(src, edits);
    };

    let root = &toks[root_idx];
    if self_closing(root) {
        edits.push((root.tok.range.clone(), format!("<root>{SKELETON_XML}</root>")));
        issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "empty <root> given skeleton cells"));
        return apply_edits(src, edits);
    }
    let root_end = root.close.unwrap_or(toks.len());
    let cells: Vec<&Scoped> = toks[root_idx + 1..root_end].iter().filter(|s| is_root_cell(s, src)).collect();
    let zero = cells.iter().find(|s| s.tok.attr(src, "id") == Some(ROOT_ID));
    let has_one = cells.iter().any(|s| s.tok.attr(src, "id") == Some(LAYER_ID));
    let after_root = root.tok.range.end;
    match (zero, has_one) {
        (Some(_), true) => {}
        (None, true) => {
            edits.push((after_root..after_root, ROOT_CELL_XML.to_string()));
            issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "root cell \"0\" added"));
        }
        (None, false) => {
            edits.push((after_root..after_root, SKELETON_XML.to_string()));
            issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "root cell \"0\" added"));
            issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "layer cell \"1\" added"));
        }
        (Some(z), false) => {
            let at = z.close.map_or(z.tok.range.end, |c| toks[c].tok.range.end);
            edits.push((at..at, LAYER_XML.to_string()));
            issues.push(Issue::fixed(IssueCategory::MissingSkeleton, "layer cell \"1\" added"));
        }
    }
    apply_edits(src, edits)
}

fn all_ids<'a>(toks: &[Scoped], src: &'a str) -> HashSet<&'a str> {
    toks.iter().filter_map(|s| s.tok.attr(src, "id")).collect()
}

fn attrs_pass(src: &str, issues: &mut Vec<Issue>) -> String {
    let toks = scoped_tokens(src);
    let ids = all_ids(&toks, src);
    let mut next_id = ids
        .iter()
        .filter(|id| !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()))
        .filter_map(|id| id.parse::<u128>().ok())
        .max()
        .map_or(2, |m| m.saturating_add(1));
    let mut edits = Vec::new();
    for s in &toks {
        if s.tok.start_name() != Some("mxCell") || s.parent.as_deref() != Some("root") {
            continue;
        }
        let TokenKind::StartTag { attrs, .. } = &s.tok.kind else { continue };
        let insert_at = s.tok.range.start + "<mxCell".len();
        let id = match s.tok.attr(src, "id") {
            Some(id) if !id.is_empty() => id.to_string(),
            _ => {
                let id = next_id.to_string();
                next_id += 1;
                if let Some(a) = attrs.iter().find(|a| a.name == "id") {
                    edits.push((a.range.clone(), format!("id=\"{id}\"")));
                } else {
                    edits.push((insert_at..insert_at, format!(" id=\"{id}\"")));
                }
                issues.push(Issue::fixed(IssueCategory::MissingRequiredAttr, format!("cell without id given id {id:?}")));
                id
            }
        };
        if id == ROOT_ID {
            continue;
        }
        match attrs.iter().find(|a| a.name == "parent") {
            None => {
                edits.push((insert_at..insert_at, format!(" parent=\"{LAYER_ID}\"")));
                issues.push(Issue::fixed(
                    IssueCategory::MissingRequiredAttr,
                    format!("cell {id:?} without parent attached to layer {LAYER_ID:?}"),
                ));
            }
            Some(a) => {
                let parent = &src[a.value.clone()];
                if !ids.contains(parent) {
                    edits.push((a.range.clone(), format!("parent=\"{LAYER_ID}\"")));
                    issues.push(Issue::fixed(
                        IssueCategory::BrokenHierarchy,
                        format!("cell {id:?} had unknown parent {parent:?}; reattached to layer {LAYER_ID:?}"),
                    ));
                }
            }
        }
    }
    apply_edits(src, edits)
}

fn edge_ref_pass(src: &str, issues: &mut Vec<Issue>) -> String {
    let toks = scoped_tokens(src);
    let ids = all_ids(&toks, src);
    let mut edits = Vec::new();
    for s in &toks {
        if s.tok.start_name() != Some("mxCell") || s.tok.attr(src, "edge") != Some("1") {
            continue;
        }
        let TokenKind::StartTag { attrs, .. } = &s.tok.kind else { continue };
        for attr in attrs.iter().filter(|a| a.name == "source" || a.name == "target") {
            let value = &src[attr.value.clone()];
            if ids.contains(value) {
                continue;
            }
            let mut start = attr.range.start;
            while start > s.tok.range.start && src.as_bytes()[start - 1].is_ascii_whitespace() {
                start -= 1;
            }
            edits.push((start..attr.range.end, String::new()));
            let edge = s.tok.attr(src, "id").unwrap_or("?");
            issues.push(Issue::fixed(
                IssueCategory::DanglingEdgeRef,
                format!("{value}: edge {edge:?} {} removed", attr.name),
            ));
        }
    }
    apply_edits(src, edits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::parse;
    use proptest::prelude::*;

    const VALID: &str = r#"<mxfile>
  <diagram name="Page-1">
    <mxGraphModel>
      <root>
        <mxCell id="0" />
        <mxCell id="1" parent="0" />
        <mxCell id="2" value="Web" style="rounded=1;" vertex="1" parent="1">
          <mxGeometry x="40" y="40" width="120" height="60" as="geometry" />
        </mxCell>
        <mxCell id="3" value="DB" style="shape=cylinder;" vertex="1" parent="1">
          <mxGeometry x="240" y="40" width="120" height="60" as="geometry" />
        </mxCell>
        <mxCell id="4" value="" edge="1" parent="1" source="2" target="3">
          <mxGeometry relative="1" as="geometry" />
        </mxCell>
      </root>
    </mxGraphModel>
  </diagram>
</mxfile>"#;

    #[test]
    fn extract_strips_prose_and_fences() {
        let wrapped = format!("Here is your diagram:\n```xml\n{VALID}\n```\nEnjoy!");
        assert_eq!(extract_xml(&wrapped).unwrap(), VALID);
        assert_eq!(extract_xml(VALID).unwrap(), VALID);
        assert_eq!(extract_xml("Sorry, I cannot draw that."), Err(NoXmlFound));
    }

    #[test]
    fn extract_unterminated_stops_before_fence() {
        let text = "```xml\n<mxGraphModel><root><mxCell id=\"0\"/>\n```\n";
        assert_eq!(extract_xml(text).unwrap(), "<mxGraphModel><root><mxCell id=\"0\"/>");
    }

    #[test]
    fn unescaped_ampersand_in_label() {
        let text = VALID.replace(r#"value="Web""#, r#"value="A & B""#);
        let r = repair(&text);
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].category, IssueCategory::UnescapedChar);
        assert!(r.issues[0].repaired);
        assert!(r.text.contains(r#"value="A &amp; B""#));
        assert_eq!(r.passes_applied, [PASS_ESCAPE]);
        assert_eq!(parse(&r.text).unwrap().cell("2").unwrap().label, "A & B");
    }

    #[test]
    fn markup_in_label_is_escaped() {
        let text = VALID.replace(r#"value="Web""#, r#"value="<b>Web</b>""#);
        let r = repair(&text);
        assert!(r.issues.iter().all(|i| i.repaired));
        assert_eq!(parse(&r.text).unwrap().cell("2").unwrap().label, "<b>Web</b>");
    }

    #[test]
    fn missing_final_close_tag() {
        let text = VALID.trim_end().strip_suffix("</mxfile>").unwrap();
        let r = repair(text);
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].category, IssueCategory::MismatchedTag);
        assert!(check_wellformed(&r.text).is_empty());
    }

    #[test]
    fn unclosed_cell_before_sibling() {
        let text = VALID.replace(
            "<mxGeometry x=\"40\" y=\"40\" width=\"120\" height=\"60\" as=\"geometry\" />\n        </mxCell>",
            "<mxGeometry x=\"40\" y=\"40\" width=\"120\" height=\"60\" as=\"geometry\" />",
        );
        let r = repair(&text);
        assert!(r.issues.iter().all(|i| i.repaired), "{:?}", r.issues);
        let d = parse(&r.text).unwrap();
        assert_eq!(d.vertices().count(), 2);
    }

    #[test]
    fn orphan_close_dropped() {
        let text = VALID.replace("<mxCell id=\"1\" parent=\"0\" />", "<mxCell id=\"1\" parent=\"0\" /></mxGeometry>");
        let r = repair(&text);
        assert_eq!(r.issues.len(), 1);
        assert!(r.issues[0].detail.contains("orphan"));
        assert!(check_wellformed(&r.text).is_empty());
    }

    #[test]
    fn dangling_target_removed() {
        let text = VALID.replace(r#"target="3""#, r#"target="42""#);
        let r = repair(&text);
        assert_eq!(r.issues.len(), 1);
        assert_eq!(r.issues[0].category, IssueCategory::DanglingEdgeRef);
        assert!(r.issues[0].detail.starts_with("42"));
        let edge = parse(&r.text).unwrap().cell("4").unwrap().clone();
        assert_eq!(edge.target_id, None);
        assert_eq!(edge.source_id.as_deref(), Some("2"));
    }

    #[test]
    fn skeleton_injected() {
        let text = VALID
            .replace("<mxCell id=\"0\" />\n", "")
            .replace("<mxCell id=\"1\" parent=\"0\" />\n", "");
        let r = repair(&text);
        assert_eq!(r.issues.iter().filter(|i| i.category == IssueCategory::MissingSkeleton).count(), 2);
        assert!(check_wellformed(&r.text).is_empty());

        let only_layer_missing = VALID.replace("<mxCell id=\"1\" parent=\"0\" />\n", "");
        let r = repair(&only_layer_missing);
        assert_eq!(r.issues.len(), 1);
        assert!(check_wellformed(&r.text).is_empty());
    }

    #[test]
    fn root_element_synthesized_around_bare_cells() {
        let text = r#"<mxGraphModel><mxCell id="2" value="A" vertex="1" parent="1"><mxGeometry width="10" height="10" as="geometry"/></mxCell></mxGraphModel>"#;
        let r = repair(text);
        let d = parse(&r.text).unwrap();
        assert_eq!(d.vertices().count(), 1);
    }

    #[test]
    fn missing_ids_and_parents_synthesized() {
        let text = VALID.replace(r#"<mxCell id="3" value="DB""#, r#"<mxCell value="DB""#).replace(r#" vertex="1" parent="1">"#, r#" vertex="1">"#);
        let r = repair(&text);
        let d = parse(&r.text).unwrap();
        assert_eq!(d.vertices().count(), 2);
        assert!(d.integrity_check().is_empty());
        // The edge pointed at the id that was removed.
        let cats: Vec<IssueCategory> = r.issues.iter().map(|i| i.category).collect();
        assert_eq!(
            cats,
            [
                IssueCategory::MissingRequiredAttr,
                IssueCategory::MissingRequiredAttr,
                IssueCategory::MissingRequiredAttr,
                IssueCategory::DanglingEdgeRef
            ]
        );
        assert_eq!(d.vertices().nth(1).unwrap().id, "5");
    }

    #[test]
    fn unknown_parent_reattached() {
        let text = VALID.replace(r#"value="DB" style="shape=cylinder;" vertex="1" parent="1""#, r#"value="DB" style="shape=cylinder;" vertex="1" parent="77""#);
        let r = repair(&text);
        assert_eq!(r.issues[0].category, IssueCategory::BrokenHierarchy);
        assert!(parse(&r.text).unwrap().integrity_check().is_empty());
    }

    #[test]
    fn user_object_cells_are_left_alone() {
        let text = VALID.replace(
            "<mxCell id=\"4\"",
            "<UserObject label=\"x\" id=\"9\"><mxCell vertex=\"1\" parent=\"1\"><mxGeometry width=\"5\" height=\"5\" as=\"geometry\" /></mxCell></UserObject>\n<mxCell id=\"4\"",
        );
        let out = validate_and_correct(&text);
        assert_eq!(out.status, OutcomeStatus::CleanFirstPass, "{:?}", out.issues);
    }

    #[test]
    fn duplicate_attribute_is_residual() {
        let text = VALID.replace(r#"<mxCell id="3" value="DB""#, r#"<mxCell id="3" id="5" value="DB""#);
        let out = validate_and_correct(&text);
        assert_eq!(out.status, OutcomeStatus::NeedsReprompt);
        assert!(out.xml.is_none());
        assert!(out.issues.iter().any(|i| !i.repaired && i.category == IssueCategory::NotWellFormed));
    }

    #[test]
    fn outcome_statuses() {
        let clean = validate_and_correct(VALID);
        assert_eq!(clean.status, OutcomeStatus::CleanFirstPass);
        assert!(clean.issues.is_empty());
        assert_eq!(clean.xml.as_deref(), Some(VALID));

        let wrapped = format!("Sure! Here it is:\n\n{}\n\nLet me know.", VALID.replace("value=\"Web\"", "value=\"R&D\""));
        let repaired = validate_and_correct(&wrapped);
        assert_eq!(repaired.status, OutcomeStatus::RepairedLocally);
        assert_eq!(repaired.issues.len(), 1);
        assert!(check_wellformed(repaired.xml.as_deref().unwrap()).is_empty());

        let failed = validate_and_correct("I cannot help with that");
        assert_eq!(failed.status, OutcomeStatus::Failed);
        assert_eq!(failed.issues[0].category, IssueCategory::NoXmlFound);
    }

    #[test]
    fn self_correction_prompt_embeds_text_and_issues() {
        let cfg = PromptConfig::default();
        let bad = VALID.replace("</mxfile>", "");
        let issues = vec![Issue::residual(IssueCategory::MismatchedTag, "missing </mxfile>")];
        let bundle = build_self_correction_prompt(&bad, &issues, &cfg).unwrap();
        assert_eq!(bundle.turns.len(), 2);
        assert_eq!(bundle.turns[0].text, build_system_prompt(&cfg));
        let user = &bundle.turns[1].text;
        assert!(user.contains(&bad));
        assert!(user.contains("mismatched or unclosed tag"));
        assert!(bundle.token_estimate <= cfg.token_budget);
        assert_eq!(
            build_self_correction_prompt(&bad, &[], &cfg).unwrap_err(),
            SelfCorrectionError::EmptyIssueList
        );
    }

    /// Corruptions of one valid document, one per repairable error class.
    fn corruptions() -> Vec<String> {
        vec![
            VALID.replace("value=\"Web\"", "value=\"Web & App\""),
            VALID.replace("value=\"DB\"", "value=\"<i>DB</i> & cache\""),
            VALID.trim_end().strip_suffix("</mxfile>").unwrap().to_string(),
            VALID.replace("</root>", ""),
            VALID.replace(r#"source="2""#, r#"source="99""#),
            VALID.replace("<mxCell id=\"0\" />", ""),
            VALID.replace("</mxCell>\n        <mxCell id=\"3\"", "<mxCell id=\"3\""),
            VALID[..VALID.len() / 2].to_string(),
        ]
    }

    #[test]
    fn repair_is_idempotent_and_keeps_vertices() {
        for text in corruptions() {
            let once = repair(&text);
            let twice = repair(&once.text);
            assert_eq!(twice.text, once.text, "not a fixpoint for {text}");
            assert!(twice.issues.is_empty(), "{:?}", twice.issues);
            assert_eq!(count_vertex_tags(&once.text), count_vertex_tags(&text));
        }
    }

    proptest! {
        #[test]
        fn repair_fixpoint_on_random_damage(cut in 0usize..VALID.len(), drop_len in 0usize..40, junk in "[&<>\"a-z ]{0,6}") {
            let cut = (0..=cut).rev().find(|c| VALID.is_char_boundary(*c)).unwrap();
            let end = (cut + drop_len).min(VALID.len());
            let text = format!("{}{}{}", &VALID[..cut], junk, &VALID[end..]);
            let once = repair(&text);
            let twice = repair(&once.text);
            prop_assert_eq!(&twice.text, &once.text);
            prop_assert!(count_vertex_tags(&once.text) >= count_vertex_tags(&text));
            let out = validate_and_correct(&text);
            if out.status.is_usable() {
                prop_assert!(parse(out.xml.as_deref().unwrap()).is_ok());
            }
        }
    }
}
