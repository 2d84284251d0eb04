//! Layered placement for vertices that come without coordinates.
//!
//! Longest-path layering over the edge digraph, cycles broken by dropping
//! DFS back edges (cell order), then boxes stacked inside each layer.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{Diagram, Geometry};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Layers advance along x.
    #[default]
    Horizontal,
    /// Layers advance along y.
    Vertical,
}

impl std::str::FromStr for Orientation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "horizontal" | "h" | "lr" => Ok(Orientation::Horizontal),
            "vertical" | "v" | "tb" => Ok(Orientation::Vertical),
            other => Err(format!("unknown orientation {other:?} (expected horizontal or vertical)")),
        }
    }
}

/// Canvas offset of the first placed box.
pub const MARGIN: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub orientation: Orientation,
    pub node_gap: f64,
    pub layer_gap: f64,
    pub default_width: f64,
    pub default_height: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            orientation: Orientation::Horizontal,
            node_gap: 60.0,
            layer_gap: 120.0,
            default_width: 120.0,
            default_height: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid layout config: {0}")]
pub struct LayoutConfigError(pub String);

impl LayoutConfig {
    pub fn validate(&self) -> Result<(), LayoutConfigError> {
        let fields = [
            ("node_gap", self.node_gap),
            ("layer_gap", self.layer_gap),
            ("default_width", self.default_width),
            ("default_height", self.default_height),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(LayoutConfigError(format!("{name} must be a positive number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutWarning {
    /// Vertex placed by the engine.
    pub placed: String,
    /// Vertex with user geometry it overlaps.
    pub existing: String,
}

fn needs_placement(g: Option<&Geometry>) -> bool {
    !g.is_some_and(Geometry::has_area)
}

/// Layer index for every vertex, keyed by id.
pub fn assign_layers(d: &Diagram) -> BTreeMap<String, usize> {
    let verts: Vec<&str> = d.vertices().map(|c| c.id.as_str()).collect();
    let index: HashMap<&str, usize> = verts.iter().enumerate().rev().map(|(i, id)| (*id, i)).collect();
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); verts.len()];
    for e in d.edges() {
        let (Some(s), Some(t)) = (e.source_id.as_deref(), e.target_id.as_deref()) else { continue };
        if let (Some(&a), Some(&b)) = (index.get(s), index.get(t)) {
            if a != b {
                succ[a].push(b);
            }
        }
    }

    // Iterative DFS in cell order; an edge to a vertex still on the stack is a
    // back edge and is ignored. Postorder gives a topological order of the rest.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let mut mark = vec![Mark::New; verts.len()];
    let mut kept: Vec<Vec<usize>> = vec![Vec::new(); verts.len()];
    let mut postorder = Vec::with_capacity(verts.len());
    for start in 0..verts.len() {
        if mark[start] != Mark::New {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        mark[start] = Mark::Active;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if let Some(&w) = succ[v].get(*next) {
                *next += 1;
                match mark[w] {
                    Mark::Active => {}
                    Mark::New => {
                        kept[v].push(w);
                        mark[w] = Mark::Active;
                        stack.push((w, 0));
                    }
                    Mark::Done => kept[v].push(w),
                }
            } else {
                mark[v] = Mark::Done;
                postorder.push(v);
                stack.pop();
            }
        }
    }

    let mut layer = vec![0usize; verts.len()];
    for &v in postorder.iter().rev() {
        for &w in &kept[v] {
            layer[w] = layer[w].max(layer[v] + 1);
        }
    }
    let mut out = BTreeMap::new();
    for (i, id) in verts.iter().enumerate() {
        out.entry(id.to_string()).or_insert(layer[i]);
    }
    out
}

pub fn layout(d: &Diagram, cfg: &LayoutConfig) -> Diagram {
    layout_with_report(d, cfg).0
}

/// Like [`layout`], also reporting placed boxes that overlap user geometry.
pub fn layout_with_report(d: &Diagram, cfg: &LayoutConfig) -> (Diagram, Vec<LayoutWarning>) {
    if !d.vertices().any(|c| needs_placement(c.geometry.as_ref())) {
        return (d.clone(), Vec::new());
    }
    let layers = assign_layers(d);
    let mut slot_in_layer: HashMap<usize, usize> = HashMap::new();
    let mut out = d.clone();
    let mut placed = Vec::new();
    for cell in out.cells.iter_mut() {
        if !cell.is_vertex() || !needs_placement(cell.geometry.as_ref()) {
            continue;
        }
        let layer = layers.get(&cell.id).copied().unwrap_or(0);
        let slot = slot_in_layer.entry(layer).or_insert(0);
        let (w, h) = (cfg.default_width, cfg.default_height);
        let (x, y) = match cfg.orientation {
            Orientation::Horizontal => (
                MARGIN + layer as f64 * (w + cfg.layer_gap),
                MARGIN + *slot as f64 * (h + cfg.node_gap),
            ),
            Orientation::Vertical => (
                MARGIN + *slot as f64 * (w + cfg.node_gap),
                MARGIN + layer as f64 * (h + cfg.layer_gap),
            ),
        };
        *slot += 1;
        let mut g = Geometry::new(x, y, w, h);
        if let Some(old) = &cell.geometry {
            g.children = old.children.clone();
        }
        cell.geometry = Some(g);
        placed.push(cell.id.clone());
    }

    let mut warnings = Vec::new();
    let boxes = |id: &str| out.cell(id).and_then(|c| c.geometry.clone());
    for p in &placed {
        let Some(pg) = boxes(p) else { continue };
        for existing in d.vertices().filter(|c| !needs_placement(c.geometry.as_ref())) {
            if let Some(eg) = &existing.geometry {
                if overlaps(&pg, eg) {
                    warnings.push(LayoutWarning {
                        placed: p.clone(),
                        existing: existing.id.clone(),
                    });
                }
            }
        }
    }
    (out, warnings)
}

/// Axis-aligned open-rectangle intersection.
pub fn overlaps(a: &Geometry, b: &Geometry) -> bool {
    a.x < b.x + b.width && b.x < a.x + a.width && a.y < b.y + b.height && b.y < a.y + a.height
}
