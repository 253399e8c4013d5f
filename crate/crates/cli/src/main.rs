//! `contrast-forge` command line. JSON results go to stdout, logs to stderr.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use contrast_forge::body_model::{pose_mesh, BodyParams, BodyTemplate};
use contrast_forge::negation::{
    build_negation_set, default_static_negations, LlmClient, RemoteLlmClient, RuleBasedClient,
};
use contrast_forge::preference::{fuse_positive, mock_scorer, score_all, PreferenceScorer, RemoteScorer, ScoreOptions};
use contrast_forge::prompts::{generate_corpus, sample_eval_subset, PromptRecord, PromptTemplate};
use contrast_forge::splat_render::gradcheck::{run_gradcheck, GradCheckConfig};
use contrast_forge::splat_render::{load_ply, render};
use contrast_forge::trainer::{cloud_center, run_trainer, turntable_cameras, TrainConfig, Trainer};
use contrast_forge::Image;

const SCORER_URL_ENV: &str = "CONTRAST_FORGE_SCORER_URL";

#[derive(Parser)]
#[command(name = "contrast-forge", version, about = "Text-to-3D human generation with contrastive preference guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a Gaussian cloud for a prompt and write PLY, turntable and report.
    Generate(GenerateArgs),
    /// Render turntable PNGs from a PLY file.
    Render(RenderArgs),
    /// Prompt corpus tools.
    #[command(subcommand)]
    Prompts(PromptsCommand),
    /// Print the negation set built for a prompt.
    Negate(NegateArgs),
    /// Finite-difference check of the renderer gradients.
    Gradcheck(GradcheckArgs),
    /// Score an image against a text with remote or mock scorers.
    Score(ScoreArgs),
    /// Serve the mock scorer endpoints until killed.
    MockServe(MockServeArgs),
    /// Run the scorer protocol conformance suite against an endpoint.
    Conformance(ConformanceArgs),
    /// Write the bundled body template (JSON) and optionally its rest mesh (OBJ).
    BodyExport(BodyExportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    prompt: String,
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` config override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample cameras and walk the schedule without rendering.
    #[arg(long)]
    dry_run: bool,
    /// Start from the full-scale defaults (100k splats, 1024², batch 4).
    #[arg(long)]
    full_scale: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ply: PathBuf,
    #[arg(long, default_value = "turntable")]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    views: usize,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long, default_value_t = 1.75)]
    distance: f64,
    #[arg(long, default_value_t = 55.0)]
    fovy: f64,
    /// Gray level of the background.
    #[arg(long, default_value_t = 1.0)]
    background: f64,
}

#[derive(Subcommand)]
enum PromptsCommand {
    /// Generate unique prompts from the template.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        template: Option<PathBuf>,
        /// Write JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw an evaluation subset from a JSON-lines corpus.
    Sample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct NegateArgs {
    #[arg(long)]
    prompt: String,
    /// Remote `/analyze` endpoint; defaults to the bundled rule-based client.
    #[arg(long)]
    llm_url: Option<String>,
    /// Static negative phrase; repeatable. Defaults to the built-in list.
    #[arg(long = "static", value_name = "PHRASE")]
    static_phrases: Vec<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print per-scene details.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    text: String,
    /// Scorer id; repeatable. Defaults to every mock scorer.
    #[arg(long = "model")]
    models: Vec<String>,
    /// Scorer endpoint; falls back to $CONTRAST_FORGE_SCORER_URL, then to mocks.
    #[arg(long)]
    url: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args)]
struct MockServeArgs {
    #[arg(long, default_value = "127.0.0.1:8765")]
    addr: String,
}

#[derive(Args)]
struct ConformanceArgs {
    #[arg(long)]
    url: String,
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args)]
struct BodyExportArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    obj: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // help and version exit 0, usage errors exit 2
        Err(e) => e.exit(),
    };
    match dispatch(cli.command) {
        Ok(Outcome { value, success }) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("JSON value serializes"));
            if success {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}

struct Outcome {
    value: Value,
    success: bool,
}

impl From<Value> for Outcome {
    fn from(value: Value) -> Self {
        Self { value, success: true }
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Render(a) => render_ply(a).map(Into::into),
        Command::Prompts(c) => prompts(c).map(Into::into),
        Command::Negate(a) => negate(a).map(Into::into),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Score(a) => score(a).map(Into::into),
        Command::MockServe(a) => mock_serve(a).map(Into::into),
        Command::Conformance(a) => conformance(a),
        Command::BodyExport(a) => body_export(a).map(Into::into),
    }
}

fn generate(a: GenerateArgs) -> Result<Outcome> {
    let base = if a.full_scale { TrainConfig::full_scale() } else { TrainConfig::default() };
    let file = match &a.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Ok(url) = std::env::var(SCORER_URL_ENV) {
        overrides.push(format!("scorer_url={}", toml_string(&url)));
    }
    overrides.extend(a.overrides.iter().cloned());
    if let Some(n) = a.iterations {
        overrides.push(format!("iterations={n}"));
    }
    if let Some(r) = a.resolution {
        overrides.push(format!("resolution={r}"));
    }
    if let Some(s) = a.seed {
        overrides.push(format!("seed={s}"));
    }
    if a.dry_run {
        overrides.push("dry_run=true".into());
    }
    let config = TrainConfig::layered(&base, &file, &overrides)?;
    let mut trainer = Trainer::new(config, &a.prompt)?;
    let result = run_trainer(&mut trainer, &a.out);
    let report = trainer.report();
    let summary = json!({
        "out": a.out,
        "prompt": report.prompt,
        "iterations": report.iterations_run,
        "initial_splats": report.initial_splats,
        "final_splats": report.final_splats,
        "skipped_steps": report.skipped_steps,
        "events": report.events,
        "outputs": report.outputs,
        "negation": report.negation.as_ref().map(|n| n.text.clone()),
        "aborted": report.aborted,
    });
    if let Err(e) = result {
        log::error!("run aborted: {e}");
        return Ok(Outcome { value: summary, success: false });
    }
    Ok(summary.into())
}

fn toml_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

fn render_ply(a: RenderArgs) -> Result<Value> {
    if a.views == 0 || a.resolution == 0 {
        bail!("views and resolution must be positive");
    }
    let cloud = load_ply(&a.ply).with_context(|| format!("loading {}", a.ply.display()))?;
    let cams = turntable_cameras(cloud_center(&cloud), a.distance, a.fovy, a.resolution, a.views);
    std::fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    for (k, cam) in cams.iter().enumerate() {
        let path = a.out.join(format!("turntable_{k:03}.png"));
        render(&cloud, cam, [a.background; 3])?.to_image().write_png(&path)?;
        files.push(path);
    }
    Ok(json!({ "splats": cloud.len(), "images": files }))
}

fn read_corpus(path: &Path) -> Result<Vec<PromptRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn prompts(c: PromptsCommand) -> Result<Value> {
    match c {
        PromptsCommand::Gen { n, seed, template, out } => {
            let loaded;
            let template = match template {
                Some(p) => {
                    loaded = PromptTemplate::load(&p)?;
                    &loaded
                }
                None => PromptTemplate::bundled(),
            };
            let corpus = generate_corpus(template, n, seed)?;
            match out {
                Some(path) => {
                    let lines: Vec<String> = corpus.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
                    std::fs::write(&path, lines.join("\n") + "\n")?;
                    Ok(json!({ "written": path, "count": corpus.len() }))
                }
                None => Ok(serde_json::to_value(corpus)?),
            }
        }
        PromptsCommand::Sample { corpus, k, seed } => {
            let records = read_corpus(&corpus)?;
            Ok(serde_json::to_value(sample_eval_subset(&records, k, seed)?)?)
        }
    }
}

fn negate(a: NegateArgs) -> Result<Value> {
    let client: Box<dyn LlmClient> = match &a.llm_url {
        Some(url) => Box::new(RemoteLlmClient::new(url, Duration::from_secs(60))),
        None => Box::new(RuleBasedClient::bundled().clone()),
    };
    let static_phrases = if a.static_phrases.is_empty() { default_static_negations() } else { a.static_phrases };
    let set = build_negation_set(&a.prompt, client.as_ref(), &static_phrases)?;
    Ok(serde_json::to_value(set)?)
}

fn gradcheck(a: GradcheckArgs) -> Result<Outcome> {
    if a.scenes == 0 || a.tol.is_nan() || a.tol <= 0.0 {
        bail!("--scenes must be positive and --tol must be > 0");
    }
    let cfg = GradCheckConfig { scenes: a.scenes, tolerance: a.tol, seed: a.seed, ..GradCheckConfig::default() };
    let report = run_gradcheck(&cfg)?;
    let failed: Vec<usize> = report.scenes.iter().filter(|s| !s.passed).map(|s| s.scene).collect();
    let mut value = json!({
        "scenes": report.scenes.len(),
        "tolerance": a.tol,
        "max_relative_error": report.max_relative_error,
        "failed_scenes": failed,
        "passed": report.passed,
    });
    if a.verbose {
        value["details"] = serde_json::to_value(&report.scenes)?;
    }
    Ok(Outcome { value, success: report.passed })
}

fn score(a: ScoreArgs) -> Result<Value> {
    let image = Image::read_png(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let url = a.url.or_else(|| std::env::var(SCORER_URL_ENV).ok());
    let models: Vec<String> = if a.models.is_empty() {
        match &url {
            Some(_) => bail!("--model is required with a remote scorer endpoint"),
            None => contrast_forge::preference::MOCK_SCORER_IDS.iter().map(|s| s.to_string()).collect(),
        }
    } else {
        a.models
    };
    let timeout = Duration::from_secs(a.timeout);
    let scorers: Vec<Box<dyn PreferenceScorer>> = models
        .iter()
        .map(|m| match &url {
            Some(u) => Ok(Box::new(RemoteScorer::new(u, m, timeout)) as Box<dyn PreferenceScorer>),
            None => mock_scorer(m),
        })
        .collect::<Result<_, _>>()?;
    let signals = score_all(&scorers, &image, &a.text, ScoreOptions::default())?;
    let fused = fuse_positive(&signals, true)?;
    let rows: Vec<Value> = signals
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "scorer": s.scorer,
                "score": s.score,
                "quantized": fused.quantized[i],
                "weight": fused.weights[i],
                "gradient_norm": s.gradient.norm(),
            })
        })
        .collect();
    Ok(json!({ "endpoint": url, "text": a.text, "scores": rows }))
}

fn mock_serve(a: MockServeArgs) -> Result<Value> {
    let server = contrast_forge::mock_server::MockServer::start(&a.addr)?;
    // announce on stdout before blocking so scripts can pick up the port
    println!("{}", json!({ "url": server.url() }));
    log::info!("mock scorer listening on {}", server.url());
    server.join();
    Ok(json!({ "stopped": true }))
}

fn conformance(a: ConformanceArgs) -> Result<Outcome> {
    let report = contrast_forge::conformance::run(&a.url, Duration::from_secs(a.timeout));
    let success = report.passed;
    Ok(Outcome { value: serde_json::to_value(report)?, success })
}

fn body_export(a: BodyExportArgs) -> Result<Value> {
    let template = BodyTemplate::bundled();
    template.save(&a.out)?;
    if let Some(obj) = &a.obj {
        let mesh = pose_mesh(&template, &BodyParams::neutral(&template))?;
        let mut text = String::new();
        for v in &mesh.vertices {
            text.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2]));
        }
        for f in &mesh.faces {
            text.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
        }
        std::fs::write(obj, text)?;
    }
    Ok(json!({
        "template": a.out,
        "obj": a.obj,
        "vertices": template.vertex_count(),
        "joints": template.joint_count(),
    }))
}
