//! The segment loop: window close, characterize, narrative, music
//! description, dispatch, with anchor propagation.
//!
//! On a per-segment stage failure the loop never aborts: it emits a degraded
//! record that reuses the previous segment's description (continuity over
//! silence) and carries the error note. A failure on the very first segment,
//! with nothing to reuse, falls back to a fixed neutral description.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::TextBackend;
use crate::genstage::{
    generate_music_description, generate_narrative, GenParams, MusicDescription, NarrativeText,
};
use crate::ingest::{aggregate, CollectorHandle, SegmentBatch, SegmentError};
use crate::scene::{characterize, detect_mode, CharacterizedData, ContextMode, SceneSnapshot};
use crate::sim::{simulate_stream, Scenario, SimError};
use crate::template::PromptTemplate;

pub const SCHEMA_VERSION: u32 = 1;

/// Output when the first segment fails before any description exists.
pub const FALLBACK_DESCRIPTION: &str =
    "The music is calm and steady, holding a soft neutral tone.";

/// One pipeline cycle's full provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub schema_version: u32,
    pub window_index: u64,
    pub t_start: u64,
    pub t_end: u64,
    pub aggregated_snapshot: SceneSnapshot,
    pub characterized: CharacterizedData,
    pub mode: ContextMode,
    pub narrative: NarrativeText,
    pub description: MusicDescription,
    pub anchor_window: Option<u64>,
    pub stage_latencies_ms: BTreeMap<String, f64>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", content = "target", rename_all = "snake_case")]
pub enum SinkSpec {
    JsonlFile(PathBuf),
    HttpPost(String),
    Stdout,
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("sink unavailable: {0}")]
    SinkUnavailable(String),
}

pub enum Sink {
    JsonlFile { path: PathBuf, file: File },
    HttpPost { url: String, client: reqwest::blocking::Client },
    Stdout,
}

impl Sink {
    pub fn open(spec: &SinkSpec) -> Result<Self, SinkError> {
        match spec {
            SinkSpec::JsonlFile(path) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| SinkError::SinkUnavailable(format!("{}: {e}", path.display())))?;
                Ok(Sink::JsonlFile { path: path.clone(), file })
            }
            SinkSpec::HttpPost(url) => Ok(Sink::HttpPost {
                url: url.clone(),
                client: reqwest::blocking::Client::builder()
                    .timeout(std::time::Duration::from_secs(10))
                    .build()
                    .expect("reqwest client"),
            }),
            SinkSpec::Stdout => Ok(Sink::Stdout),
        }
    }

    /// JsonlFile appends one canonical-JSON line; HttpPost sends the record
    /// and accepts any 2xx; Stdout prints only the description text.
    pub fn emit(&mut self, record: &SegmentRecord) -> Result<(), SinkError> {
        match self {
            Sink::JsonlFile { path, file } => {
                let line = canonical_json_line(record);
                writeln!(file, "{line}")
                    .map_err(|e| SinkError::SinkUnavailable(format!("{}: {e}", path.display())))
            }
            Sink::HttpPost { url, client } => {
                let response = client
                    .post(url.as_str())
                    .json(record)
                    .send()
                    .map_err(|e| SinkError::SinkUnavailable(e.to_string()))?;
                if response.status().is_success() {
                    Ok(())
                } else {
                    Err(SinkError::SinkUnavailable(format!(
                        "HTTP {} from {url}",
                        response.status()
                    )))
                }
            }
            Sink::Stdout => {
                println!("{}", record.description.text);
                Ok(())
            }
        }
    }
}

fn sort_value(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut sorted = serde_json::Map::new();
            for key in keys {
                sorted.insert(key.clone(), sort_value(&map[key]));
            }
            Value::Object(sorted)
        }
        Value::Array(items) => Value::Array(items.iter().map(sort_value).collect()),
        other => other.clone(),
    }
}

/// Canonical JSON: recursively sorted keys, serde's fixed float formatting.
/// Byte-stable across runs for deterministic inputs.
pub fn canonical_json_line(record: &SegmentRecord) -> String {
    let value = serde_json::to_value(record).expect("record serializes");
    serde_json::to_string(&sort_value(&value)).expect("canonical json")
}

/// Where segment batches come from: a live collector or a simulated stream.
pub trait SegmentSource {
    fn next_batch(&mut self) -> Option<SegmentBatch>;

    /// Worst wall-clock lateness of window delivery against the nominal
    /// boundary, in milliseconds. Zero for offline sources.
    fn max_boundary_skew_ms(&self) -> f64 {
        0.0
    }
}

/// Pre-windowed batches from a simulated scenario.
pub struct SimSource {
    batches: std::collections::VecDeque<SegmentBatch>,
}

impl SimSource {
    pub fn from_scenario(scenario: &Scenario, window_seconds: f64) -> Result<Self, SimError> {
        let snapshots = simulate_stream(scenario)?;
        let window_ms = ((window_seconds * 1000.0).round() as u64).max(1);
        let last_window = snapshots
            .last()
            .map_or(0, |snapshot| snapshot.timestamp / window_ms);
        let mut batches: Vec<SegmentBatch> = (0..=last_window)
            .map(|index| SegmentBatch {
                window_index: index,
                t_start: index * window_ms,
                t_end: (index + 1) * window_ms,
                snapshots: Vec::new(),
            })
            .collect();
        for snapshot in snapshots {
            let index = (snapshot.timestamp / window_ms) as usize;
            batches[index].snapshots.push(snapshot);
        }
        Ok(Self { batches: batches.into() })
    }
}

impl SegmentSource for SimSource {
    fn next_batch(&mut self) -> Option<SegmentBatch> {
        self.batches.pop_front()
    }
}

/// Live batches from a running collector.
pub struct CollectorSource<'a> {
    handle: &'a CollectorHandle,
    patience: std::time::Duration,
    max_skew_ms: f64,
}

impl<'a> CollectorSource<'a> {
    pub fn new(handle: &'a CollectorHandle) -> Self {
        let patience =
            std::time::Duration::from_millis(handle.window_ms().saturating_mul(3).max(5_000));
        Self {
            handle,
            patience,
            max_skew_ms: 0.0,
        }
    }
}

impl SegmentSource for CollectorSource<'_> {
    fn next_batch(&mut self) -> Option<SegmentBatch> {
        match self.handle.next_segment(Instant::now() + self.patience) {
            Ok(batch) => {
                // Lateness only: data-complete and drain closes legitimately
                // deliver ahead of the wall boundary.
                let boundary = self.handle.epoch() + std::time::Duration::from_millis(batch.t_end);
                let late_ms = Instant::now()
                    .saturating_duration_since(boundary)
                    .as_secs_f64()
                    * 1000.0;
                self.max_skew_ms = self.max_skew_ms.max(late_ms);
                Some(batch)
            }
            Err(SegmentError::TimedOut) | Err(SegmentError::CollectorStopped) => None,
        }
    }

    fn max_boundary_skew_ms(&self) -> f64 {
        self.max_skew_ms
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub params: GenParams,
    pub narrative_template: PromptTemplate,
    pub music_template: PromptTemplate,
    pub max_segments: Option<u64>,
    /// Strip per-run timing from emitted records so golden files are
    /// byte-stable. The run summary still reports latencies.
    pub canonical_output: bool,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("fatal config: {0}")]
    FatalConfig(String),
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct StagePercentiles {
    pub p50_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct RunSummary {
    pub segments: u64,
    pub failures: u64,
    pub sink_failures: u64,
    pub stages: BTreeMap<String, StagePercentiles>,
    /// Per-segment wall time minus backend time.
    pub overhead: StagePercentiles,
    /// Wall-clock skew of window delivery against the nominal boundary, as
    /// a fraction of the window; only meaningful for live sources.
    pub max_boundary_skew_ms: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn percentiles(mut values: Vec<f64>) -> StagePercentiles {
    values.sort_by(|a, b| a.total_cmp(b));
    StagePercentiles {
        p50_ms: percentile(&values, 0.50),
        p95_ms: percentile(&values, 0.95),
    }
}

/// Runs the full segment loop over a batch source until the source is
/// exhausted or `max_segments` is reached.
pub fn run_pipeline(
    source: &mut dyn SegmentSource,
    backend: &dyn TextBackend,
    sinks: &mut [Sink],
    config: &PipelineConfig,
) -> Result<RunSummary, PipelineError> {
    if sinks.is_empty() {
        return Err(PipelineError::FatalConfig("at least one sink is required".into()));
    }

    let mut summary = RunSummary::default();
    let mut narrative_ms = Vec::new();
    let mut description_ms = Vec::new();
    let mut emit_ms = Vec::new();
    let mut overheads = Vec::new();

    let mut previous_snapshot: Option<SceneSnapshot> = None;
    let mut previous_description: Option<(MusicDescription, u64)> = None;

    while let Some(batch) = source.next_batch() {
        if config
            .max_segments
            .is_some_and(|max| summary.segments >= max)
        {
            break;
        }
        let segment_start = Instant::now();
        let window_index = batch.window_index;

        let aggregated = match aggregate(&batch, previous_snapshot.as_ref()) {
            Ok(snapshot) => snapshot,
            Err(_) => {
                // Nothing ever received: synthesize a neutral placeholder so
                // the record stream stays contiguous.
                log::warn!("window {window_index}: no data and no prior state");
                placeholder_snapshot(batch.t_start)
            }
        };
        let mode = detect_mode(&aggregated);
        let characterized = characterize(&aggregated, mode);

        let mut error_note = None;
        let mut backend_total = 0.0;

        let narrative_start = Instant::now();
        let narrative_result = generate_narrative(
            &characterized,
            window_index,
            &config.narrative_template,
            backend,
            &config.params,
        );
        let narrative_elapsed = narrative_start.elapsed().as_secs_f64() * 1000.0;

        let (narrative, description) = match narrative_result {
            Ok(narrative_outcome) => {
                backend_total += narrative_outcome.backend_ms;
                narrative_ms.push(narrative_elapsed);
                let description_start = Instant::now();
                let anchor = previous_description
                    .as_ref()
                    .map(|(description, window)| (description, *window));
                let music_result = generate_music_description(
                    &narrative_outcome.narrative,
                    anchor,
                    &config.music_template,
                    backend,
                    &config.params,
                );
                description_ms.push(description_start.elapsed().as_secs_f64() * 1000.0);
                match music_result {
                    Ok(music_outcome) => {
                        backend_total += music_outcome.backend_ms;
                        (narrative_outcome.narrative, music_outcome.description)
                    }
                    Err(e) => {
                        error_note = Some(format!("music description stage failed: {e}"));
                        (
                            narrative_outcome.narrative,
                            reuse_or_fallback(&previous_description),
                        )
                    }
                }
            }
            Err(e) => {
                error_note = Some(format!("narrative stage failed: {e}"));
                (
                    NarrativeText {
                        text: "(narrative unavailable)".into(),
                        source_window: window_index,
                    },
                    reuse_or_fallback(&previous_description),
                )
            }
        };

        let mut stage_latencies_ms = BTreeMap::new();
        if !config.canonical_output {
            stage_latencies_ms.insert("narrative".to_string(), narrative_elapsed);
            stage_latencies_ms.insert(
                "description".to_string(),
                description_ms.last().copied().unwrap_or(0.0),
            );
        }

        let record = SegmentRecord {
            schema_version: SCHEMA_VERSION,
            window_index,
            t_start: batch.t_start,
            t_end: batch.t_end,
            aggregated_snapshot: aggregated.clone(),
            characterized,
            mode,
            narrative,
            description: description.clone(),
            anchor_window: window_index.checked_sub(1),
            stage_latencies_ms,
            error: error_note.clone(),
        };

        let emit_start = Instant::now();
        for sink in sinks.iter_mut() {
            if let Err(e) = sink.emit(&record) {
                log::warn!("window {window_index}: {e}");
                summary.sink_failures += 1;
            }
        }
        emit_ms.push(emit_start.elapsed().as_secs_f64() * 1000.0);

        let wall_ms = segment_start.elapsed().as_secs_f64() * 1000.0;
        overheads.push((wall_ms - backend_total).max(0.0));
        if error_note.is_some() {
            summary.failures += 1;
        }
        summary.segments += 1;
        previous_description = Some((description, window_index));
        previous_snapshot = Some(aggregated);
    }

    summary.stages.insert("narrative".into(), percentiles(narrative_ms));
    summary.stages.insert("description".into(), percentiles(description_ms));
    summary.stages.insert("emit".into(), percentiles(emit_ms));
    summary.overhead = percentiles(overheads);
    summary.max_boundary_skew_ms = source.max_boundary_skew_ms();
    Ok(summary)
}

fn reuse_or_fallback(previous: &Option<(MusicDescription, u64)>) -> MusicDescription {
    match previous {
        Some((description, _)) => description.clone(),
        None => MusicDescription {
            text: FALLBACK_DESCRIPTION.to_string(),
            word_count: FALLBACK_DESCRIPTION.split_whitespace().count(),
            anchor_of: None,
        },
    }
}

fn placeholder_snapshot(timestamp: u64) -> SceneSnapshot {
    let value = serde_json::json!({
        "Timestamp": timestamp,
        "Scene": "unknown",
        "Time": "unknown",
        "Weather": "unknown",
        "Temperature": 0.0,
        "Health": 20.0,
        "Satiety": 20.0,
        "Status": {},
        "Movement": {},
        "Position": {},
        "Hostile Entity": {},
        "Being Attacked": false
    });
    serde_json::from_value(value).expect("placeholder is a valid snapshot")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, MockBackend};
    use crate::testing::{FaultInjectingBackend, ScriptedBackend, StubServer};

    fn templates() -> (PromptTemplate, PromptTemplate) {
        (
            PromptTemplate {
                id: "n".into(),
                role_preamble: String::new(),
                body: "Game data: {info_str}\nDescribe the scene.".into(),
                max_output_words: None,
            },
            PromptTemplate {
                id: "m".into(),
                role_preamble: "You are a music composer.".into(),
                body: "Scene: {scene}\nAnchor: {anchor}\nDescribe the music in at most 20 words."
                    .into(),
                max_output_words: Some(20),
            },
        )
    }

    fn config() -> PipelineConfig {
        let (narrative_template, music_template) = templates();
        PipelineConfig {
            params: GenParams {
                seed: Some(1),
                ..GenParams::default()
            },
            narrative_template,
            music_template,
            max_segments: None,
            canonical_output: true,
        }
    }

    fn three_window_source() -> SimSource {
        let scenario = Scenario {
            seed: 42,
            events: vec![],
            emit_period_ms: 10_000,
            duration_ms: 30_000,
            biome_pool: vec!["Forest".into()],
        };
        SimSource::from_scenario(&scenario, 10.0).unwrap()
    }

    fn read_records(path: &std::path::Path) -> Vec<SegmentRecord> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|line| serde_json::from_str(line).unwrap())
            .collect()
    }

    #[test]
    fn zero_sinks_is_fatal() {
        let mut source = three_window_source();
        let backend = MockBackend::new(1);
        let err = run_pipeline(&mut source, &backend, &mut [], &config()).unwrap_err();
        assert!(matches!(err, PipelineError::FatalConfig(_)));
    }

    #[test]
    fn three_window_run_chains_anchors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut sinks = vec![Sink::open(&SinkSpec::JsonlFile(path.clone())).unwrap()];
        let mut source = three_window_source();
        let backend = MockBackend::new(1);
        let summary = run_pipeline(&mut source, &backend, &mut sinks, &config()).unwrap();
        assert_eq!(summary.segments, 3);
        assert_eq!(summary.failures, 0);

        let records = read_records(&path);
        assert_eq!(records.len(), 3);
        let anchors: Vec<Option<u64>> =
            records.iter().map(|r| r.description.anchor_of).collect();
        assert_eq!(anchors, vec![None, Some(0), Some(1)]);
        for (i, record) in records.iter().enumerate() {
            assert_eq!(record.window_index, i as u64);
            assert!(record.description.word_count <= 20);
            assert_eq!(record.anchor_window, if i == 0 { None } else { Some(i as u64 - 1) });
        }
    }

    #[test]
    fn record_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut sinks = vec![Sink::open(&SinkSpec::JsonlFile(path.clone())).unwrap()];
        let mut source = three_window_source();
        let backend = MockBackend::new(1);
        run_pipeline(&mut source, &backend, &mut sinks, &config()).unwrap();
        let records = read_records(&path);
        for record in &records {
            let line = canonical_json_line(record);
            let back: SegmentRecord = serde_json::from_str(&line).unwrap();
            assert_eq!(&back, record);
        }
    }

    #[test]
    fn degraded_window_reuses_previous_description() {
        // Narrative call indices per window: 0 -> calls 0,1 (narrative, music);
        // window 1 narrative is call 2.
        let backend = FaultInjectingBackend::new(MockBackend::new(1), vec![2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut sinks = vec![Sink::open(&SinkSpec::JsonlFile(path.clone())).unwrap()];
        let mut source = three_window_source();
        let summary = run_pipeline(&mut source, &backend, &mut sinks, &config()).unwrap();
        assert_eq!(summary.segments, 3);
        assert_eq!(summary.failures, 1);

        let records = read_records(&path);
        assert_eq!(records.len(), 3);
        assert!(records[0].error.is_none());
        assert!(records[1].error.is_some());
        assert_eq!(records[1].description.text, records[0].description.text);
        assert!(records[2].error.is_none());
        assert_ne!(records[2].description.text, records[1].description.text);
    }

    #[test]
    fn first_window_failure_uses_fallback() {
        let backend = ScriptedBackend::new(vec![Err(BackendError::Unavailable {
            detail: "down".into(),
            status: Some(503),
            transient: false,
        })]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut sinks = vec![Sink::open(&SinkSpec::JsonlFile(path.clone())).unwrap()];
        let scenario = Scenario {
            seed: 1,
            events: vec![],
            emit_period_ms: 10_000,
            duration_ms: 10_000,
            biome_pool: vec![],
        };
        let mut source = SimSource::from_scenario(&scenario, 10.0).unwrap();
        let summary = run_pipeline(&mut source, &backend, &mut sinks, &config()).unwrap();
        assert_eq!(summary.segments, 1);
        assert_eq!(summary.failures, 1);
        let records = read_records(&path);
        assert_eq!(records[0].description.text, FALLBACK_DESCRIPTION);
    }

    #[test]
    fn http_sink_posts_records_and_survives_failure() {
        let stub = StubServer::start(202, "{}");
        let mut sinks = vec![
            Sink::open(&SinkSpec::HttpPost(format!("{}/records", stub.url()))).unwrap(),
        ];
        let mut source = three_window_source();
        let backend = MockBackend::new(1);
        let summary = run_pipeline(&mut source, &backend, &mut sinks, &config()).unwrap();
        assert_eq!(summary.segments, 3);
        assert_eq!(summary.sink_failures, 0);
        let requests = stub.requests();
        assert_eq!(requests.len(), 3);
        assert!(requests.iter().all(|r| r.method == "POST"));

        // Closed port: emission fails but the run continues.
        let dead = Sink::open(&SinkSpec::HttpPost("http://127.0.0.1:1/records".into())).unwrap();
        let mut sinks = vec![dead];
        let mut source = three_window_source();
        let summary = run_pipeline(&mut source, &backend, &mut sinks, &config()).unwrap();
        assert_eq!(summary.segments, 3);
        assert_eq!(summary.sink_failures, 3);
    }

    #[test]
    fn stage_two_prompt_contains_stage_one_output() {
        let backend = ScriptedBackend::new(vec![]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.jsonl");
        let mut sinks = vec![Sink::open(&SinkSpec::JsonlFile(path)).unwrap()];
        let mut source = three_window_source();
        run_pipeline(&mut source, &backend, &mut sinks, &config()).unwrap();
        let prompts = backend.prompts();
        // Alternating narrative/music prompts; each music prompt embeds the
        // narrative output (the scripted fallback) verbatim.
        assert_eq!(prompts.len(), 6);
        for music_prompt in prompts.iter().skip(1).step_by(2) {
            assert!(music_prompt.contains(&backend.fallback));
        }
    }
}
