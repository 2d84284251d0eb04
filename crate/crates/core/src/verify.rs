//! Semantic checks: does a diagram contain the requested components and
//! relations, and are all edges anchored.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::model::{Cell, Diagram};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementSpec {
    #[serde(default)]
    pub required_components: Vec<String>,
    #[serde(default)]
    pub required_edges: Vec<(String, String)>,
}

impl RequirementSpec {
    pub fn is_empty(&self) -> bool {
        self.required_components.is_empty() && self.required_edges.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// (required label, matched vertex id)
    pub matched: Vec<(String, String)>,
    pub missing: Vec<String>,
    pub coverage: f64,
    /// (required edge, matched edge cell id)
    pub edge_matched: Vec<((String, String), String)>,
    pub edge_missing: Vec<(String, String)>,
    /// (edge id, reference to a cell that does not exist)
    pub dangling_edges: Vec<(String, String)>,
    /// Nothing was required, so the scores are 1 by definition.
    pub vacuous: bool,
}

impl CoverageReport {
    pub fn semantic_accuracy(&self) -> f64 {
        let total = self.matched.len() + self.missing.len() + self.edge_matched.len() + self.edge_missing.len();
        if total == 0 {
            return 1.0;
        }
        (self.matched.len() + self.edge_matched.len()) as f64 / total as f64
    }
}

/// Case-folded, whitespace-collapsed label text with markup tags removed and
/// common entities decoded.
pub fn normalize_label(label: &str) -> String {
    let mut text = String::with_capacity(label.len());
    let mut in_tag = false;
    for c in label.chars() {
        match c {
            '<' => {
                in_tag = true;
                text.push(' ');
            }
            '>' if in_tag => in_tag = false,
            c if !in_tag => text.push(c),
            _ => {}
        }
    }
    let decoded = text
        .replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&amp;", "&");
    decoded
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

struct Candidate<'a> {
    cell: &'a Cell,
    norm: String,
}

/// Orders candidates independently of their position in the cell list.
fn rank<'a>(a: &'a Candidate<'a>) -> (usize, &'a str, &'a str) {
    (a.norm.len(), a.norm.as_str(), a.cell.id.as_str())
}

fn best<'a>(
    candidates: &'a [Candidate<'a>],
    used: &HashSet<usize>,
    accept: impl Fn(&str) -> bool,
) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(i, c)| !used.contains(i) && accept(&c.norm))
        .min_by(|(_, a), (_, b)| rank(a).cmp(&rank(b)))
        .map(|(i, _)| i)
}

fn is_substring_match(required: &str, candidate: &str) -> bool {
    !required.is_empty() && !candidate.is_empty() && (candidate.contains(required) || required.contains(candidate))
}

/// Matches each required label to at most one distinct vertex: exact
/// normalized matches first, then substring containment either way.
fn match_components<'a>(candidates: &'a [Candidate<'a>], required: &[String]) -> Vec<Option<usize>> {
    let wanted: Vec<String> = required.iter().map(|l| normalize_label(l)).collect();
    let mut used = HashSet::new();
    let mut assignment = vec![None; required.len()];
    for (slot, want) in wanted.iter().enumerate() {
        if let Some(i) = best(candidates, &used, |n| !want.is_empty() && n == want) {
            used.insert(i);
            assignment[slot] = Some(i);
        }
    }
    for (slot, want) in wanted.iter().enumerate() {
        if assignment[slot].is_some() {
            continue;
        }
        if let Some(i) = best(candidates, &used, |n| is_substring_match(want, n)) {
            used.insert(i);
            assignment[slot] = Some(i);
        }
    }
    assignment
}

/// One entry per edge endpoint attribute naming a cell that does not exist.
pub fn check_edge_endpoints(d: &Diagram) -> Vec<(String, String)> {
    let ids: HashSet<&str> = d.cells.iter().map(|c| c.id.as_str()).collect();
    let mut out = Vec::new();
    for edge in d.edges() {
        for end in [&edge.source_id, &edge.target_id].into_iter().flatten() {
            if !ids.contains(end.as_str()) {
                out.push((edge.id.clone(), end.clone()));
            }
        }
    }
    out
}

pub fn check_component_coverage(d: &Diagram, spec: &RequirementSpec) -> CoverageReport {
    let candidates: Vec<Candidate<'_>> = d
        .vertices()
        .map(|cell| Candidate {
            cell,
            norm: normalize_label(&cell.label),
        })
        .collect();
    let assignment = match_components(&candidates, &spec.required_components);

    let mut matched = Vec::new();
    let mut missing = Vec::new();
    for (label, slot) in spec.required_components.iter().zip(&assignment) {
        match slot {
            Some(i) => matched.push((label.clone(), candidates[*i].cell.id.clone())),
            None => missing.push(label.clone()),
        }
    }

    let vertex_for = |label: &str| -> Option<&str> {
        if let Some(pos) = spec.required_components.iter().position(|c| c == label) {
            return assignment[pos].map(|i| candidates[i].cell.id.as_str());
        }
        // Endpoint not listed as a component: match it on its own.
        match_components(&candidates, &[label.to_string()])[0].map(|i| candidates[i].cell.id.as_str())
    };

    let edges: Vec<&Cell> = d.edges().collect();
    let mut consumed = HashSet::new();
    let mut edge_matched = Vec::new();
    let mut edge_missing = Vec::new();
    for (a, b) in &spec.required_edges {
        let found = match (vertex_for(a), vertex_for(b)) {
            (Some(src), Some(tgt)) => edges
                .iter()
                .filter(|e| !consumed.contains(e.id.as_str()))
                .filter(|e| e.source_id.as_deref() == Some(src) && e.target_id.as_deref() == Some(tgt))
                .min_by(|x, y| x.id.cmp(&y.id)),
            _ => None,
        };
        match found {
            Some(edge) => {
                consumed.insert(edge.id.as_str());
                edge_matched.push(((a.clone(), b.clone()), edge.id.clone()));
            }
            None => edge_missing.push((a.clone(), b.clone())),
        }
    }

    let coverage = if spec.required_components.is_empty() {
        1.0
    } else {
        matched.len() as f64 / spec.required_components.len() as f64
    };
    CoverageReport {
        matched,
        missing,
        coverage,
        edge_matched,
        edge_missing,
        dangling_edges: check_edge_endpoints(d),
        vacuous: spec.is_empty(),
    }
}

/// `(matched components + matched edges) / (required components + required edges)`,
/// 1.0 for an empty spec.
pub fn semantic_accuracy(d: &Diagram, spec: &RequirementSpec) -> f64 {
    check_component_coverage(d, spec).semantic_accuracy()
}
