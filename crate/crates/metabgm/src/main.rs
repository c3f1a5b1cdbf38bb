//! Command-line entry point.
//!
//! Subcommands cover the full loop: `serve` runs the live collector plus
//! pipeline, `simulate`/`replay` drive the synthetic world, `run` executes
//! the pipeline offline over a scenario, `eval` scores hypothesis files and
//! `dataset` builds instruction-tuning pairs. Logs and the final JSON summary
//! go to stderr; data goes to the configured sinks or stdout.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use metabgm::backend::{MockBackend, RemoteBackend, TextBackend};
use metabgm::dataset;
use metabgm::eval::{
    evaluate_systems, render_csv, render_table, Aggregation, EvalPair, DEFAULT_BETA,
};
use metabgm::genstage::GenParams;
use metabgm::ingest::{start_collector, CollectorConfig};
use metabgm::pipeline::{
    run_pipeline, CollectorSource, PipelineConfig, SimSource, Sink, SinkSpec,
};
use metabgm::sim::{load_scenario, replay_to_collector, simulate_stream};
use metabgm::template::PromptTemplate;

const NARRATIVE_TEMPLATE: &str = include_str!("../assets/templates/narrative.json");
const MUSIC_TEMPLATE: &str = include_str!("../assets/templates/music.json");
const MATCHING_TEMPLATE: &str = include_str!("../assets/templates/matching.json");

#[derive(Parser)]
#[command(name = "metabgm", version, about = "Scene-aware music description pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    SentenceMean,
    Corpus,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::SentenceMean => Aggregation::SentenceMean,
            AggregationArg::Corpus => Aggregation::Corpus,
        }
    }
}

/// Options shared by the pipeline-running commands; every flag overrides the
/// matching config-file field.
#[derive(Args)]
struct PipelineArgs {
    /// JSON config file; flags take precedence over its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sink: "-" for stdout, an http(s) URL, or a JSONL file path. Repeatable.
    #[arg(long = "out")]
    outs: Vec<String>,
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Base URL for the remote backend (API key from METABGM_API_KEY).
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_segments: Option<u64>,
    #[arg(long)]
    window_seconds: Option<f64>,
    #[arg(long)]
    narrative_template: Option<PathBuf>,
    #[arg(long)]
    music_template: Option<PathBuf>,
    /// Strip per-run timing from emitted records (byte-stable output).
    #[arg(long)]
    canonical: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the ingestion collector alone, emitting closed window batches.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7501")]
        bind: String,
        #[arg(long, default_value_t = 10.0)]
        window_seconds: f64,
        #[arg(long, default_value_t = 4096)]
        queue_capacity: usize,
        /// Batch output: "-" for stdout or a JSONL file path.
        #[arg(long, default_value = "-")]
        out: String,
        #[arg(long)]
        max_windows: Option<u64>,
    },
    /// Run the full pipeline, offline over a scenario or live from a
    /// collector bound with --bind.
    Run {
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Bind an ingestion endpoint and consume its windows live.
        #[arg(long)]
        bind: Option<String>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Emit a scenario's snapshot stream as JSON lines.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Output file; "-" or absent writes to stdout.
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Stream a scenario's snapshots to a running collector over TCP.
    Replay {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        endpoint: String,
        /// 0 sends as fast as possible; 1 replays in real time.
        #[arg(long, default_value_t = 0.0)]
        time_scale: f64,
    },
    /// Score hypothesis files against references.
    Eval {
        /// Hypothesis file as NAME=PATH (or bare PATH). Repeatable.
        #[arg(long = "hyp", required = true)]
        hyps: Vec<String>,
        /// Reference file, line-aligned with the hypotheses. Repeatable for
        /// multiple references per line.
        #[arg(long = "ref", required = true)]
        refs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "sentence-mean")]
        aggregation: AggregationArg,
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
        #[arg(long, default_value_t = DEFAULT_BETA)]
        beta: f64,
    },
    /// Build instruction-tuning pairs.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Synthesize pairs from a scenario parameter grid.
    Synth {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Reverse-pair existing music captions against a scene pool.
    Reverse {
        /// Captions: plain text or JSONL with a "caption" key, one per line.
        #[arg(long)]
        captions: PathBuf,
        /// Comma-separated scene names forming the pool.
        #[arg(long)]
        scenes: String,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the rejection report (JSON). Defaults to stderr.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Config-file shape for the pipeline commands.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    window_seconds: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    backend: Option<String>,
    #[serde(default)]
    base_url: Option<String>,
    #[serde(default)]
    narrative_template: Option<PathBuf>,
    #[serde(default)]
    music_template: Option<PathBuf>,
    #[serde(default)]
    sinks: Option<Vec<SinkSpec>>,
    #[serde(default)]
    max_segments: Option<u64>,
    #[serde(default)]
    canonical_output: Option<bool>,
    #[serde(default)]
    queue_capacity: Option<usize>,
    #[serde(default)]
    scenario: Option<PathBuf>,
    #[serde(default)]
    bind: Option<String>,
}

struct ResolvedPipeline {
    backend: Box<dyn TextBackend>,
    sinks: Vec<Sink>,
    config: PipelineConfig,
    window_seconds: f64,
    queue_capacity: usize,
    scenario: Option<PathBuf>,
    bind: Option<String>,
}

fn fail(detail: impl std::fmt::Display) -> Box<dyn std::error::Error> {
    detail.to_string().into()
}

fn parse_sink(spec: &str) -> SinkSpec {
    if spec == "-" {
        SinkSpec::Stdout
    } else if spec.starts_with("http://") || spec.starts_with("https://") {
        SinkSpec::HttpPost(spec.to_string())
    } else {
        SinkSpec::JsonlFile(PathBuf::from(spec))
    }
}

fn load_template(
    path: Option<&Path>,
    embedded: &str,
    name: &str,
) -> Result<PromptTemplate, Box<dyn std::error::Error>> {
    match path {
        Some(p) => PromptTemplate::load(p).map_err(fail),
        None => serde_json::from_str(embedded)
            .map_err(|e| fail(format!("embedded {name} template: {e}"))),
    }
}

fn resolve_pipeline(args: &PipelineArgs) -> Result<ResolvedPipeline, Box<dyn std::error::Error>> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| fail(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&raw)
                .map_err(|e| fail(format!("config {}: {e}", path.display())))?
        }
        None => FileConfig::default(),
    };

    let backend_kind = match (&args.backend, file.backend.as_deref()) {
        (Some(kind), _) => *kind,
        (None, Some("remote")) => BackendKind::Remote,
        (None, Some("mock")) | (None, None) => BackendKind::Mock,
        (None, Some(other)) => return Err(fail(format!("unknown backend {other:?}"))),
    };
    let seed = args.seed.or(file.seed);
    let backend: Box<dyn TextBackend> = match backend_kind {
        BackendKind::Mock => Box::new(MockBackend::new(seed.unwrap_or(0))),
        BackendKind::Remote => {
            let base_url = args
                .base_url
                .clone()
                .or(file.base_url)
                .ok_or_else(|| fail("remote backend requires --base-url"))?;
            Box::new(RemoteBackend::from_env(base_url, "METABGM_API_KEY"))
        }
    };

    let mut sink_specs: Vec<SinkSpec> = args.outs.iter().map(|s| parse_sink(s)).collect();
    if sink_specs.is_empty() {
        sink_specs = file.sinks.unwrap_or_else(|| vec![SinkSpec::Stdout]);
    }
    let sinks = sink_specs
        .iter()
        .map(Sink::open)
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?;

    let narrative_template = load_template(
        args.narrative_template
            .as_deref()
            .or(file.narrative_template.as_deref()),
        NARRATIVE_TEMPLATE,
        "narrative",
    )?;
    let music_template = load_template(
        args.music_template
            .as_deref()
            .or(file.music_template.as_deref()),
        MUSIC_TEMPLATE,
        "music",
    )?;

    let params = GenParams {
        model: args
            .model
            .clone()
            .or(file.model)
            .unwrap_or_else(|| "mock".into()),
        seed,
        ..GenParams::default()
    };

    Ok(ResolvedPipeline {
        backend,
        sinks,
        config: PipelineConfig {
            params,
            narrative_template,
            music_template,
            max_segments: args.max_segments.or(file.max_segments),
            canonical_output: args.canonical || file.canonical_output.unwrap_or(false),
        },
        window_seconds: args.window_seconds.or(file.window_seconds).unwrap_or(10.0),
        queue_capacity: file.queue_capacity.unwrap_or(4096),
        scenario: file.scenario,
        bind: file.bind,
    })
}

fn cmd_run(
    scenario_flag: Option<&Path>,
    bind_flag: Option<&str>,
    args: &PipelineArgs,
) -> Result<(), Box<dyn std::error::Error>> {
    let mut resolved = resolve_pipeline(args)?;
    let scenario_path = scenario_flag.map(Path::to_path_buf).or(resolved.scenario.take());
    let bind = bind_flag.map(str::to_string).or(resolved.bind.take());

    let summary = match (scenario_path, bind) {
        (Some(path), _) => {
            let scenario = load_scenario(&path).map_err(fail)?;
            let mut source =
                SimSource::from_scenario(&scenario, resolved.window_seconds).map_err(fail)?;
            run_pipeline(
                &mut source,
                resolved.backend.as_ref(),
                &mut resolved.sinks,
                &resolved.config,
            )
            .map_err(fail)?
        }
        (None, Some(bind)) => {
            let handle = start_collector(&CollectorConfig {
                bind,
                window_seconds: resolved.window_seconds,
                queue_capacity: resolved.queue_capacity,
                ..CollectorConfig::default()
            })
            .map_err(fail)?;
            log::info!("collector listening on {}", handle.local_addr());
            eprintln!(
                "{}",
                json!({"command": "run", "listening": handle.local_addr().to_string()})
            );
            let mut source = CollectorSource::new(&handle);
            let summary = run_pipeline(
                &mut source,
                resolved.backend.as_ref(),
                &mut resolved.sinks,
                &resolved.config,
            )
            .map_err(fail)?;
            let stats = handle.stats();
            handle.stop();
            eprintln!("{}", json!({"command": "run", "ingest": stats}));
            summary
        }
        (None, None) => return Err(fail("run needs a snapshot source: --scenario or --bind")),
    };
    eprintln!("{}", json!({"command": "run", "summary": summary}));
    Ok(())
}

/// Collector only: accept snapshots and emit each closed window batch as one
/// JSON line, until intake goes idle.
fn cmd_serve(
    bind: &str,
    window_seconds: f64,
    queue_capacity: usize,
    out: &str,
    max_windows: Option<u64>,
) -> Result<(), Box<dyn std::error::Error>> {
    let handle = start_collector(&CollectorConfig {
        bind: bind.to_string(),
        window_seconds,
        queue_capacity,
        ..CollectorConfig::default()
    })
    .map_err(fail)?;
    log::info!("collector listening on {}", handle.local_addr());
    eprintln!("{}", json!({"command": "serve", "listening": handle.local_addr().to_string()}));

    let mut writer: Box<dyn Write> = if out == "-" {
        Box::new(std::io::stdout().lock())
    } else {
        Box::new(std::fs::File::create(out).map_err(|e| fail(format!("{out}: {e}")))?)
    };
    let patience = std::time::Duration::from_millis(
        handle.window_ms().saturating_mul(3).max(5_000),
    );
    let mut windows = 0u64;
    loop {
        if max_windows.is_some_and(|max| windows >= max) {
            break;
        }
        match handle.next_segment(std::time::Instant::now() + patience) {
            Ok(batch) => {
                serde_json::to_writer(&mut writer, &batch)?;
                writer.write_all(b"\n")?;
                writer.flush()?;
                windows += 1;
            }
            Err(_) => break,
        }
    }
    let stats = handle.stats();
    handle.stop();
    eprintln!("{}", json!({"command": "serve", "windows": windows, "ingest": stats}));
    Ok(())
}

fn cmd_simulate(scenario_path: &Path, out: &str) -> Result<(), Box<dyn std::error::Error>> {
    let scenario = load_scenario(scenario_path).map_err(fail)?;
    let snapshots = simulate_stream(&scenario).map_err(fail)?;
    let mut writer: Box<dyn Write> = if out == "-" {
        Box::new(std::io::stdout().lock())
    } else {
        Box::new(std::fs::File::create(out).map_err(|e| fail(format!("{out}: {e}")))?)
    };
    for snapshot in &snapshots {
        serde_json::to_writer(&mut writer, snapshot)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    eprintln!("{}", json!({"command": "simulate", "emitted": snapshots.len()}));
    Ok(())
}

fn cmd_replay(
    scenario_path: &Path,
    endpoint: &str,
    time_scale: f64,
) -> Result<(), Box<dyn std::error::Error>> {
    let scenario = load_scenario(scenario_path).map_err(fail)?;
    let report = replay_to_collector(&scenario, endpoint, time_scale).map_err(fail)?;
    eprintln!("{}", json!({"command": "replay", "report": report}));
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let raw = std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    Ok(raw.lines().map(str::to_string).collect())
}

fn cmd_eval(
    hyps: &[String],
    refs: &[PathBuf],
    aggregation: Aggregation,
    format: OutputFormat,
    beta: f64,
) -> Result<(), Box<dyn std::error::Error>> {
    let ref_columns: Vec<Vec<String>> = refs
        .iter()
        .map(|p| read_lines(p))
        .collect::<Result<_, _>>()?;
    let n = ref_columns[0].len();
    if ref_columns.iter().any(|c| c.len() != n) {
        return Err(fail("reference files disagree on line count"));
    }

    let mut systems = Vec::new();
    for hyp in hyps {
        let (name, path) = match hyp.split_once('=') {
            Some((name, path)) => (name.to_string(), PathBuf::from(path)),
            None => {
                let path = PathBuf::from(hyp);
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| hyp.clone());
                (name, path)
            }
        };
        let lines = read_lines(&path)?;
        if lines.len() != n {
            return Err(fail(format!(
                "{}: {} lines, references have {n}",
                path.display(),
                lines.len()
            )));
        }
        let pairs: Vec<EvalPair> = lines
            .into_iter()
            .enumerate()
            .map(|(i, hypothesis)| EvalPair {
                id: i.to_string(),
                hypothesis,
                references: ref_columns.iter().map(|c| c[i].clone()).collect(),
            })
            .collect();
        systems.push((name, pairs));
    }

    let report = evaluate_systems(&systems, aggregation, beta).map_err(fail)?;
    match format {
        OutputFormat::Table => print!("{}", render_table(&report, true)),
        OutputFormat::Csv => print!("{}", render_csv(&report)),
        OutputFormat::Json => println!("{}", serde_json::to_string(&report)?),
    }
    Ok(())
}

fn cmd_dataset(command: &DatasetCommand) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        DatasetCommand::Synth { grid, out, seed } => {
            let grid = dataset::GridSpec::load(grid).map_err(fail)?;
            let backend = MockBackend::new(seed.unwrap_or(0));
            let narrative = load_template(None, NARRATIVE_TEMPLATE, "narrative")?;
            let music = load_template(None, MUSIC_TEMPLATE, "music")?;
            let params = GenParams {
                seed: *seed,
                ..GenParams::default()
            };
            let pairs = dataset::synthesize_pairs(&grid, &backend, &narrative, &music, &params)
                .map_err(fail)?;
            dataset::export_pairs(&pairs, out).map_err(fail)?;
            eprintln!("{}", json!({"command": "dataset synth", "pairs": pairs.len()}));
        }
        DatasetCommand::Reverse {
            captions,
            scenes,
            out,
            report,
            seed,
        } => {
            let captions = dataset::load_captions(captions).map_err(fail)?;
            let names: Vec<String> = scenes
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            let pool = dataset::scene_pool_from_names(&names);
            let backend = MockBackend::new(seed.unwrap_or(0));
            let matching = load_template(None, MATCHING_TEMPLATE, "matching")?;
            let params = GenParams {
                seed: *seed,
                ..GenParams::default()
            };
            let outcome = dataset::reverse_pair(&captions, &pool, &backend, &matching, &params)
                .map_err(fail)?;
            dataset::export_pairs(&outcome.pairs, out).map_err(fail)?;
            let rejection_report = json!({
                "command": "dataset reverse",
                "pairs": outcome.pairs.len(),
                "rejections": outcome.rejections,
            });
            if let Some(path) = report {
                std::fs::write(path, serde_json::to_string_pretty(&rejection_report)?)
                    .map_err(|e| fail(format!("{}: {e}", path.display())))?;
            }
            eprintln!("{rejection_report}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();

    let result = match &cli.command {
        Command::Serve {
            bind,
            window_seconds,
            queue_capacity,
            out,
            max_windows,
        } => cmd_serve(bind, *window_seconds, *queue_capacity, out, *max_windows),
        Command::Run {
            scenario,
            bind,
            pipeline,
        } => cmd_run(scenario.as_deref(), bind.as_deref(), pipeline),
        Command::Simulate { scenario, out } => cmd_simulate(scenario, out),
        Command::Replay {
            scenario,
            endpoint,
            time_scale,
        } => cmd_replay(scenario, endpoint, *time_scale),
        Command::Eval {
            hyps,
            refs,
            aggregation,
            format,
            beta,
        } => cmd_eval(hyps, refs, (*aggregation).into(), *format, *beta),
        Command::Dataset { command } => cmd_dataset(command),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
