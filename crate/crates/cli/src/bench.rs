//! Benchmark harness: task files, per-task metrics and the aggregate report.
//!
//! Task file schema (TOML, one task per file):
//!
//! ```toml
//! id = "infra-1"
//! category = "infrastructure"        # infrastructure | flowchart | org_chart | wireframe
//! prompt = "Draw a web tier ..."
//! reference_xml_path = "../references/infra-1.drawio.xml"   # optional, relative to this file
//!
//! [requirements]
//! required_components = ["Load Balancer", "Database"]
//! required_edges = [["Load Balancer", "Database"]]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drawgen_core::pipeline::{run_generation, GenerationRequest, PipelineConfig, PipelineError};
use drawgen_core::provider::{Provider, Usage};
use drawgen_core::validator::OutcomeStatus;
use drawgen_core::verify::{check_component_coverage, RequirementSpec};
use drawgen_core::{parse, Diagram};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio_util::sync::CancellationToken;

pub const REPORT_FORMAT: u32 = 1;

/// Report keys that hold wall-clock measurements.
pub const TIMING_FIELDS: [&str; 2] = ["response_seconds", "mean_latency_seconds"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Infrastructure,
    Flowchart,
    OrgChart,
    Wireframe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub category: Category,
    pub prompt: String,
    #[serde(default)]
    pub requirements: RequirementSpec,
    pub reference_xml_path: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid task file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("duplicate task id {0:?}")]
    DuplicateId(String),
    #[error("no task files in {0}")]
    Empty(PathBuf),
}

impl TaskSpec {
    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(path).map_err(|source| TaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut spec: TaskSpec = toml::from_str(&text).map_err(|e| TaskError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if spec.id.trim().is_empty() || spec.prompt.trim().is_empty() {
            return Err(TaskError::Format {
                path: path.to_path_buf(),
                message: "id and prompt must not be empty".into(),
            });
        }
        if let (Some(r), Some(dir)) = (spec.reference_xml_path.as_mut(), path.parent()) {
            if r.is_relative() {
                *r = dir.join(&*r);
            }
        }
        Ok(spec)
    }
}

/// Every `*.toml` in `dir`, ordered by file name.
pub fn load_tasks(dir: &Path) -> Result<Vec<TaskSpec>, TaskError> {
    let read = std::fs::read_dir(dir).map_err(|source| TaskError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = read
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let tasks = paths.iter().map(|p| TaskSpec::load(p)).collect::<Result<Vec<_>, _>>()?;
    if tasks.is_empty() {
        return Err(TaskError::Empty(dir.to_path_buf()));
    }
    let mut ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    ids.sort();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(TaskError::DuplicateId(w[0].to_string()));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokens {
    pub input: u64,
    pub output: u64,
}

impl From<Usage> for Tokens {
    fn from(u: Usage) -> Self {
        Tokens {
            input: u.input_tokens,
            output: u.output_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub id: String,
    pub category: Category,
    pub semantic_accuracy: f64,
    /// The first response loaded without any repair or re-prompt.
    pub structurally_valid: bool,
    /// A loadable diagram came out of the round, after repair or re-prompt.
    pub final_valid: bool,
    pub first_pass: Option<OutcomeStatus>,
    pub correction_iterations: u32,
    pub response_seconds: f64,
    pub tokens: Tokens,
    pub missing_components: Vec<String>,
    pub missing_edges: Vec<(String, String)>,
    /// Accuracy of the task's reference diagram, a check on the task itself.
    pub reference_accuracy: Option<f64>,
    /// Manual 1-5 rating; never computed.
    pub layout_clarity: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks: usize,
    pub mean_accuracy: f64,
    pub validity_rate: f64,
    pub final_validity_rate: f64,
    pub mean_correction_iterations: f64,
    pub mean_latency_seconds: f64,
    pub total_tokens: Tokens,
    pub mean_accuracy_by_category: BTreeMap<Category, f64>,
    pub mean_layout_clarity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub format: u32,
    /// False when tasks ran concurrently, so latencies are not comparable.
    pub timing_comparable: bool,
    pub tasks: Vec<TaskMetrics>,
    pub aggregate: Aggregate,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn aggregate(tasks: &[TaskMetrics]) -> Aggregate {
    let n = tasks.len();
    let rate = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
    let mut by_category: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
    for t in tasks {
        by_category.entry(t.category).or_default().push(t.semantic_accuracy);
    }
    let ratings: Vec<f64> = tasks.iter().filter_map(|t| t.layout_clarity).collect();
    Aggregate {
        tasks: n,
        mean_accuracy: mean(tasks.iter().map(|t| t.semantic_accuracy)),
        validity_rate: rate(tasks.iter().filter(|t| t.structurally_valid).count()),
        final_validity_rate: rate(tasks.iter().filter(|t| t.final_valid).count()),
        mean_correction_iterations: mean(tasks.iter().map(|t| t.correction_iterations as f64)),
        mean_latency_seconds: mean(tasks.iter().map(|t| t.response_seconds)),
        total_tokens: Tokens {
            input: tasks.iter().map(|t| t.tokens.input).sum(),
            output: tasks.iter().map(|t| t.tokens.output).sum(),
        },
        mean_accuracy_by_category: by_category.into_iter().map(|(k, v)| (k, mean(v.into_iter()))).collect(),
        mean_layout_clarity: (!ratings.is_empty()).then(|| mean(ratings.into_iter())),
    }
}

pub async fn run_task(provider: &Provider, cfg: &PipelineConfig, task: &TaskSpec) -> TaskMetrics {
    let started = Instant::now();
    let request = GenerationRequest {
        user_text: task.prompt.clone(),
        ..GenerationRequest::default()
    };
    let result = run_generation(provider, cfg, request, CancellationToken::new(), |_| {}).await;
    let response_seconds = started.elapsed().as_secs_f64();

    let reference_accuracy = task
        .reference_xml_path
        .as_deref()
        .map(|p| match std::fs::read_to_string(p).ok().and_then(|t| parse(&t).ok()) {
            Some(d) => check_component_coverage(&d, &task.requirements).semantic_accuracy(),
            None => 0.0,
        });
    let mut m = TaskMetrics {
        id: task.id.clone(),
        category: task.category,
        semantic_accuracy: 0.0,
        structurally_valid: false,
        final_valid: false,
        first_pass: None,
        correction_iterations: 0,
        response_seconds,
        tokens: Tokens { input: 0, output: 0 },
        missing_components: Vec::new(),
        missing_edges: Vec::new(),
        reference_accuracy,
        layout_clarity: None,
        error: None,
    };
    let diagram = match result {
        Ok(out) => {
            m.first_pass = Some(out.first_pass);
            m.structurally_valid = out.first_pass == OutcomeStatus::CleanFirstPass;
            m.final_valid = true;
            m.correction_iterations = out.correction_iterations;
            m.tokens = out.usage.into();
            out.diagram
        }
        Err(e) => {
            if let PipelineError::Validation {
                first_pass,
                correction_iterations,
                ..
            } = &e
            {
                m.first_pass = Some(*first_pass);
                m.correction_iterations = *correction_iterations;
            }
            m.error = Some(e.to_string());
            Diagram::new_empty("Page-1")
        }
    };
    let coverage = check_component_coverage(&diagram, &task.requirements);
    m.semantic_accuracy = coverage.semantic_accuracy();
    m.missing_components = coverage.missing;
    m.missing_edges = coverage.edge_missing;
    m
}

/// Runs every task, sequentially unless `parallel`.
pub async fn run_bench(provider: &Provider, cfg: &PipelineConfig, tasks: &[TaskSpec], parallel: bool) -> BenchReport {
    let metrics = if parallel {
        futures::future::join_all(tasks.iter().map(|t| run_task(provider, cfg, t))).await
    } else {
        let mut out = Vec::with_capacity(tasks.len());
        for t in tasks {
            out.push(run_task(provider, cfg, t).await);
        }
        out
    };
    BenchReport {
        format: REPORT_FORMAT,
        timing_comparable: !parallel,
        aggregate: aggregate(&metrics),
        tasks: metrics,
    }
}

/// The report as JSON with wall-clock fields removed, for comparing runs.
pub fn strip_timing(report: &BenchReport) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                for f in TIMING_FIELDS {
                    map.remove(f);
                }
                map.values_mut().for_each(strip);
            }
            Value::Array(items) => items.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v = serde_json::to_value(report).expect("report serializes");
    strip(&mut v);
    v
}

fn category_name(c: Category) -> &'static str {
    match c {
        Category::Infrastructure => "infrastructure",
        Category::Flowchart => "flowchart",
        Category::OrgChart => "org_chart",
        Category::Wireframe => "wireframe",
    }
}

/// Aligned text table plus an aggregate line.
pub fn render_table(report: &BenchReport) -> String {
    let mut rows = vec![[
        "task".to_string(),
        "category".to_string(),
        "accuracy".to_string(),
        "first pass".to_string(),
        "corrections".to_string(),
        "seconds".to_string(),
        "tokens in/out".to_string(),
    ]];
    for t in &report.tasks {
        rows.push([
            t.id.clone(),
            category_name(t.category).to_string(),
            format!("{:.3}", t.semantic_accuracy),
            match (t.first_pass, t.final_valid) {
                (None, _) => "error",
                (Some(OutcomeStatus::CleanFirstPass), _) => "clean",
                (Some(OutcomeStatus::RepairedLocally), _) => "repaired",
                (Some(_), true) => "corrected",
                (Some(_), false) => "failed",
            }
            .to_string(),
            t.correction_iterations.to_string(),
            format!("{:.2}", t.response_seconds),
            format!("{}/{}", t.tokens.input, t.tokens.output),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    let a = &report.aggregate;
    let valid = report.tasks.iter().filter(|t| t.structurally_valid).count();
    out.push_str(&format!(
        "\nmean accuracy {:.3}  validity rate {:.2} ({valid}/{})  mean latency {:.2} s  mean corrections {:.2}\n",
        a.mean_accuracy, a.validity_rate, a.tasks, a.mean_latency_seconds, a.mean_correction_iterations
    ));
    out
}
