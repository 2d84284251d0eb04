//! `drawgen` command line: validate, generate, diff and the bench harness.
//!
//! Exit codes: 0 success, 1 residual issues or a non-empty diff, 2 usage or
//! I/O error, 3 provider authentication, 4 provider transport or protocol,
//! 5 no usable diagram after validation and self-correction.

pub mod bench;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use drawgen_core::history::summarize;
use drawgen_core::layout::{LayoutConfig, Orientation};
use drawgen_core::pipeline::{run_generation, GenerationRequest, PipelineConfig, PipelineError};
use drawgen_core::prompt::{ImageAttachment, PromptConfig};
use drawgen_core::provider::{Provider, ProviderConfig, ProviderError, ProviderKind};
use drawgen_core::validator::{validate_and_correct, OutcomeStatus};
use drawgen_core::{check_wellformed, parse, Diagram, DiagramDiff};
use serde_json::json;
use tokio_util::sync::CancellationToken;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RESIDUAL: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_AUTH: i32 = 3;
pub const EXIT_TRANSPORT: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "drawgen", version, about = "Generate, validate and compare draw.io diagrams")]
struct Cli {
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a file and optionally repair it.
    Validate {
        file: PathBuf,
        /// Apply local repairs.
        #[arg(long)]
        fix: bool,
        /// Where to write the repaired XML (stdout when absent).
        #[arg(long, requires = "fix")]
        out: Option<PathBuf>,
    },
    /// Generate a diagram from a prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        /// Reference image to replicate (PNG, JPEG, GIF or WebP).
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        layout: LayoutArgs,
    },
    /// Benchmark harness.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Compare two diagrams by cell id.
    Diff { a: PathBuf, b: PathBuf },
}

#[derive(Debug, Subcommand)]
enum BenchCommand {
    /// Run every task in a directory and write a JSON report.
    Run {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Run tasks concurrently; latencies are then not comparable.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        provider: ProviderArgs,
        #[command(flatten)]
        layout: LayoutArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderChoice {
    Mock,
    Http,
}

#[derive(Debug, Args)]
struct ProviderArgs {
    #[arg(long, value_enum)]
    provider: ProviderChoice,
    /// Mock script (TOML).
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, default_value = "DRAWGEN_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value = "default")]
    model: String,
    #[arg(long, default_value_t = 0.2)]
    temperature: f64,
    #[arg(long, default_value_t = 4096)]
    max_tokens: u32,
}

#[derive(Debug, Args)]
struct LayoutArgs {
    #[arg(long, value_enum, default_value = "horizontal")]
    orientation: OrientationArg,
    #[arg(long)]
    node_gap: Option<f64>,
    #[arg(long)]
    layer_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OrientationArg {
    Horizontal,
    Vertical,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => EXIT_IO,
            CliError::Provider(ProviderError::Auth(_)) => EXIT_AUTH,
            CliError::Provider(ProviderError::Config(_)) => EXIT_IO,
            CliError::Provider(_) => EXIT_TRANSPORT,
            CliError::Validation(_) => EXIT_VALIDATION,
        }
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl ProviderArgs {
    fn config(&self) -> Result<ProviderConfig, CliError> {
        let cfg = match self.provider {
            ProviderChoice::Mock => ProviderConfig {
                script_path: Some(
                    self.script
                        .clone()
                        .ok_or_else(|| CliError::Usage("--provider mock needs --script".into()))?,
                ),
                ..ProviderConfig::default()
            },
            ProviderChoice::Http => ProviderConfig {
                kind: ProviderKind::Http,
                endpoint_url: Some(
                    self.endpoint
                        .clone()
                        .ok_or_else(|| CliError::Usage("--provider http needs --endpoint".into()))?,
                ),
                api_key_env_var_name: Some(self.api_key_env.clone()),
                ..ProviderConfig::default()
            },
        };
        Ok(ProviderConfig {
            model_id: self.model.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_tokens,
            ..cfg
        })
    }
}

impl LayoutArgs {
    fn config(&self) -> Result<LayoutConfig, CliError> {
        let mut cfg = LayoutConfig {
            orientation: match self.orientation {
                OrientationArg::Horizontal => Orientation::Horizontal,
                OrientationArg::Vertical => Orientation::Vertical,
            },
            ..LayoutConfig::default()
        };
        if let Some(g) = self.node_gap {
            cfg.node_gap = g;
        }
        if let Some(g) = self.layer_gap {
            cfg.layer_gap = g;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn pipeline(provider: &ProviderArgs, layout: &LayoutArgs) -> Result<(Provider, PipelineConfig), CliError> {
    let provider_cfg = provider.config()?;
    let layout = layout.config()?;
    let p = Provider::from_config(&provider_cfg)?;
    let mut cfg = PipelineConfig::new(provider_cfg);
    cfg.prompt = PromptConfig {
        alignment: layout.orientation,
        ..PromptConfig::default()
    };
    cfg.layout = layout;
    Ok((p, cfg))
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    json: bool,
}

fn validate(io: &mut Io, file: &Path, fix: bool, out: Option<&Path>) -> Result<i32, CliError> {
    let text = read(file)?;
    let outcome = validate_and_correct(&text);
    let final_ok = if fix { outcome.status.is_usable() } else { check_wellformed(&text).is_empty() };
    let mut written = None;
    if fix {
        if let Some(xml) = &outcome.xml {
            match out {
                Some(p) => {
                    write_file(p, xml)?;
                    written = Some(p.display().to_string());
                }
                // XML goes to stdout, so the report moves to stderr.
                None => {
                    let _ = io.out.write_all(xml.as_bytes());
                }
            }
        }
    }
    let report_to_err = fix && out.is_none();
    let sink: &mut dyn Write = if report_to_err { &mut *io.err } else { &mut *io.out };
    if io.json {
        let report = json!({
            "file": file.display().to_string(),
            "status": outcome.status,
            "well_formed": final_ok,
            "issues": outcome.issues,
            "passes_applied": outcome.passes_applied,
            "written": written,
        });
        let _ = writeln!(sink, "{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        let status = serde_json::to_value(outcome.status).expect("json");
        let _ = writeln!(sink, "{}: {}", file.display(), status.as_str().unwrap_or_default());
        for i in &outcome.issues {
            let mark = if fix && i.repaired { " (repaired)" } else { "" };
            let _ = writeln!(sink, "  - [{}] {}{mark}", i.category.as_str(), i.detail);
        }
        if let Some(w) = &written {
            let _ = writeln!(sink, "repaired XML written to {w}");
        }
    }
    Ok(if final_ok { EXIT_OK } else { EXIT_RESIDUAL })
}

fn pipeline_failure(e: PipelineError) -> CliError {
    match e {
        PipelineError::Provider(p) => CliError::Provider(p),
        PipelineError::Prompt(p) => CliError::Usage(p.to_string()),
        PipelineError::Validation { outcome, correction_iterations, .. } => {
            let issues: Vec<String> = outcome
                .issues
                .iter()
                .filter(|i| !i.repaired)
                .map(|i| format!("[{}] {}", i.category.as_str(), i.detail))
                .collect();
            CliError::Validation(format!(
                "no usable diagram after {correction_iterations} correction(s): {}",
                issues.join("; ")
            ))
        }
        other => CliError::Validation(other.to_string()),
    }
}

fn generate(
    io: &mut Io,
    prompt: &str,
    image: Option<&Path>,
    out: Option<&Path>,
    provider: &ProviderArgs,
    layout: &LayoutArgs,
) -> Result<i32, CliError> {
    let image = match image {
        Some(p) => Some(ImageAttachment::from_bytes(std::fs::read(p).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        })?)),
        None => None,
    };
    let (p, cfg) = pipeline(provider, layout)?;
    let request = GenerationRequest {
        user_text: prompt.to_string(),
        image,
        ..GenerationRequest::default()
    };
    let started = Instant::now();
    let result = runtime().block_on(run_generation(&p, &cfg, request, CancellationToken::new(), |_| {}));
    let elapsed = started.elapsed().as_secs_f64();
    let outcome = result.map_err(pipeline_failure)?;
    if let Some(path) = out {
        write_file(path, &outcome.xml)?;
    }
    if io.json {
        let report = json!({
            "xml": if out.is_none() { Some(&outcome.xml) } else { None },
            "out": out.map(|p| p.display().to_string()),
            "first_pass": outcome.first_pass,
            "correction_iterations": outcome.correction_iterations,
            "repairs": outcome.repairs,
            "layout_warnings": outcome.layout_warnings.len(),
            "elapsed_seconds": elapsed,
            "usage": outcome.usage,
            "description": outcome.description,
        });
        let _ = writeln!(io.out, "{}", serde_json::to_string_pretty(&report).expect("json"));
    } else if out.is_none() {
        let _ = io.out.write_all(outcome.xml.as_bytes());
    }
    let _ = writeln!(io.err, "correction_iterations: {}", outcome.correction_iterations);
    let _ = writeln!(io.err, "elapsed: {elapsed:.3} s");
    let _ = writeln!(
        io.err,
        "tokens: {} in, {} out",
        outcome.usage.input_tokens, outcome.usage.output_tokens
    );
    if outcome.first_pass != OutcomeStatus::CleanFirstPass {
        let _ = writeln!(io.err, "first response: {:?}", outcome.first_pass);
    }
    Ok(EXIT_OK)
}

fn load_diagram(path: &Path) -> Result<Diagram, CliError> {
    let text = read(path)?;
    parse(&text).map_err(|issues| {
        let first = issues.first().map(|i| i.to_string()).unwrap_or_default();
        CliError::Usage(format!("{}: does not parse: {first}", path.display()))
    })
}

fn render_diff(a: &Diagram, b: &Diagram, diff: &DiagramDiff) -> String {
    let label = |d: &Diagram, id: &str| d.cell(id).map(|c| c.label.clone()).unwrap_or_default();
    let kind = |d: &Diagram, id: &str| {
        d.cell(id)
            .map(|c| if c.is_edge() { "edge" } else if c.is_vertex() { "vertex" } else { "cell" })
            .unwrap_or("cell")
    };
    let mut out = String::new();
    if !diff.added.is_empty() {
        out.push_str("added:\n");
        for id in &diff.added {
            out.push_str(&format!("  + {} {id} {:?}\n", kind(b, id), label(b, id)));
        }
    }
    if !diff.removed.is_empty() {
        out.push_str("removed:\n");
        for id in &diff.removed {
            out.push_str(&format!("  - {} {id} {:?}\n", kind(a, id), label(a, id)));
        }
    }
    if !diff.relabeled.is_empty() {
        out.push_str("relabeled:\n");
        for r in &diff.relabeled {
            out.push_str(&format!("  ~ {}: {:?} -> {:?}\n", r.id, r.old, r.new));
        }
    }
    if !diff.moved.is_empty() {
        out.push_str("moved:\n");
        let pos = |g: &Option<drawgen_core::Geometry>| match g {
            Some(g) => format!("({}, {}, {}x{})", g.x, g.y, g.width, g.height),
            None => "(none)".to_string(),
        };
        for m in &diff.moved {
            out.push_str(&format!("  > {}: {} -> {}\n", m.id, pos(&m.old), pos(&m.new)));
        }
    }
    out.push_str(&summarize(a, b));
    out.push('\n');
    out
}

fn diff(io: &mut Io, a: &Path, b: &Path) -> Result<i32, CliError> {
    let da = load_diagram(a)?;
    let db = load_diagram(b)?;
    let d = da.diff(&db);
    if io.json {
        let report = json!({ "empty": d.is_empty(), "summary": summarize(&da, &db), "diff": d });
        let _ = writeln!(io.out, "{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        let _ = io.out.write_all(render_diff(&da, &db, &d).as_bytes());
    }
    Ok(if d.is_empty() { EXIT_OK } else { EXIT_RESIDUAL })
}

fn bench_run(
    io: &mut Io,
    tasks: &Path,
    report: &Path,
    parallel: bool,
    provider: &ProviderArgs,
    layout: &LayoutArgs,
) -> Result<i32, CliError> {
    let specs = bench::load_tasks(tasks).map_err(|e| CliError::Usage(e.to_string()))?;
    let (p, cfg) = pipeline(provider, layout)?;
    let result = runtime().block_on(bench::run_bench(&p, &cfg, &specs, parallel));
    let text = serde_json::to_string_pretty(&result).expect("json");
    write_file(report, &(text.clone() + "\n"))?;
    if io.json {
        let _ = writeln!(io.out, "{text}");
    } else {
        let _ = io.out.write_all(bench::render_table(&result).as_bytes());
        let _ = writeln!(io.out, "report written to {}", report.display());
    }
    Ok(EXIT_OK)
}

/// Runs the CLI with explicit arguments and output streams; returns the exit code.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = stderr.write_all(text.as_bytes());
                EXIT_IO
            } else {
                let _ = stdout.write_all(text.as_bytes());
                EXIT_OK
            };
        }
    };
    let mut io = Io {
        out: stdout,
        err: stderr,
        json: cli.json,
    };
    let result = match &cli.command {
        Command::Validate { file, fix, out } => validate(&mut io, file, *fix, out.as_deref()),
        Command::Generate {
            prompt,
            image,
            out,
            provider,
            layout,
        } => generate(&mut io, prompt, image.as_deref(), out.as_deref(), provider, layout),
        Command::Diff { a, b } => diff(&mut io, a, b),
        Command::Bench {
            command:
                BenchCommand::Run {
                    tasks,
                    report,
                    parallel,
                    provider,
                    layout,
                },
        } => bench_run(&mut io, tasks, report, *parallel, provider, layout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let code = e.code();
            if io.json {
                let body = json!({ "error": { "code": code, "message": e.to_string() } });
                let _ = writeln!(io.err, "{body}");
            } else {
                let _ = writeln!(io.err, "error: {e}");
            }
            code
        }
    }
}
