//! Training-pair construction and Instruction-Input-Output export.
//!
//! Two sources: a parameter grid synthesized through the two-stage chain
//! (one SceneToNarrative and one NarrativeToMusic pair per grid point), and
//! reverse pairing of existing music captions against a scene pool. Pairs
//! export as JSONL with fixed instruction/input/output key order and
//! re-import losslessly.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::TextBackend;
use crate::genstage::{
    generate_music_description, generate_narrative, to_info_str, GenError, GenParams,
};
use crate::scene::{characterize, CharacterizedData, CharValue, ContextMode, SceneSnapshot};
use crate::template::{render_prompt, PromptTemplate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    SceneToNarrative,
    NarrativeToMusic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthesized,
    ReversePaired,
}

/// One supervised fine-tuning record. Field order matters for the export
/// format: instruction, input, output first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub kind: PairKind,
    pub provenance: Provenance,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io failure at {path}: {detail}")]
    IoFailure { path: String, detail: String },
    #[error("invalid grid: {0}")]
    GridInvalid(String),
    #[error(transparent)]
    Generation(#[from] GenError),
}

/// Player-state variation applied on top of the base snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlayerState {
    #[serde(default = "full_bar")]
    pub health: f64,
    #[serde(default = "full_bar")]
    pub satiety: f64,
    #[serde(default)]
    pub wet: bool,
}

fn full_bar() -> f64 {
    20.0
}

impl Default for PlayerState {
    fn default() -> Self {
        Self {
            health: 20.0,
            satiety: 20.0,
            wet: false,
        }
    }
}

/// Cartesian grid of scenario parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub scenes: Vec<String>,
    pub times: Vec<String>,
    pub weathers: Vec<String>,
    #[serde(default)]
    pub player_states: Vec<PlayerState>,
}

impl GridSpec {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let raw = std::fs::read_to_string(path).map_err(|e| DatasetError::IoFailure {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&raw).map_err(|e| DatasetError::GridInvalid(e.to_string()))
    }

    pub fn scenario_count(&self) -> usize {
        self.scenes.len() * self.times.len() * self.weathers.len() * self.player_states.len().max(1)
    }
}

fn grid_snapshot(scene: &str, time: &str, weather: &str, player: &PlayerState) -> SceneSnapshot {
    serde_json::from_value(json!({
        "Timestamp": 0,
        "Scene": scene,
        "Time": time,
        "Weather": weather,
        "Temperature": 0.8,
        "Health": player.health,
        "Satiety": player.satiety,
        "Status": {"Wet": player.wet},
        "Movement": {"Speed": 1.0},
        "Position": {"OnGround": true},
        "Hostile Entity": {},
        "Being Attacked": false
    }))
    .expect("grid snapshot is valid")
}

/// Runs every grid point through the two-stage chain, emitting both pair
/// kinds. Deterministic with the mock backend.
pub fn synthesize_pairs(
    grid: &GridSpec,
    backend: &dyn TextBackend,
    narrative_template: &PromptTemplate,
    music_template: &PromptTemplate,
    params: &GenParams,
) -> Result<Vec<TrainingPair>, DatasetError> {
    if grid.scenario_count() == 0 {
        return Err(DatasetError::GridInvalid(
            "scenes, times and weathers must all be non-empty".into(),
        ));
    }
    let default_states = [PlayerState::default()];
    let states: &[PlayerState] = if grid.player_states.is_empty() {
        &default_states
    } else {
        &grid.player_states
    };

    let mut pairs = Vec::with_capacity(grid.scenario_count() * 2);
    let mut index = 0u64;
    for scene in &grid.scenes {
        for time in &grid.times {
            for weather in &grid.weathers {
                for player in states {
                    let snapshot = grid_snapshot(scene, time, weather, player);
                    let data = characterize(&snapshot, ContextMode::Exploration);
                    let narrative =
                        generate_narrative(&data, index, narrative_template, backend, params)?;
                    let music = generate_music_description(
                        &narrative.narrative,
                        None,
                        music_template,
                        backend,
                        params,
                    )?;
                    pairs.push(TrainingPair {
                        instruction: narrative_template.role_preamble.clone(),
                        input: to_info_str(&data),
                        output: narrative.narrative.text.clone(),
                        kind: PairKind::SceneToNarrative,
                        provenance: Provenance::Synthesized,
                    });
                    pairs.push(TrainingPair {
                        instruction: music_template.role_preamble.clone(),
                        input: narrative.narrative.text,
                        output: music.description.text,
                        kind: PairKind::NarrativeToMusic,
                        provenance: Provenance::Synthesized,
                    });
                    index += 1;
                }
            }
        }
    }
    Ok(pairs)
}

/// Builds a scene pool from bare scene names with a neutral player state.
pub fn scene_pool_from_names(names: &[String]) -> Vec<CharacterizedData> {
    names
        .iter()
        .map(|scene| {
            let snapshot = grid_snapshot(scene, "morning", "clear", &PlayerState::default());
            characterize(&snapshot, ContextMode::Exploration)
        })
        .collect()
}

/// A caption the backend declined to place, with its reason.
#[derive(Debug, Clone, Serialize)]
pub struct Rejection {
    pub index: usize,
    pub caption: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReverseOutcome {
    pub pairs: Vec<TrainingPair>,
    pub rejections: Vec<Rejection>,
}

/// The marker the matching template tells the backend to emit when no scene
/// fits a caption.
pub const UNMATCHED_MARKER: &str = "UNMATCHED";

fn scene_pool_summary(scene_pool: &[CharacterizedData]) -> String {
    scene_pool
        .iter()
        .filter_map(|data| match data.entries.get("Scene") {
            Some(CharValue::Text(scene)) => Some(scene.clone()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Asks the backend to narrate a fitting scene for each caption; rejected
/// captions are reported, never silently dropped.
pub fn reverse_pair(
    captions: &[String],
    scene_pool: &[CharacterizedData],
    backend: &dyn TextBackend,
    matching_template: &PromptTemplate,
    params: &GenParams,
) -> Result<ReverseOutcome, DatasetError> {
    if captions.is_empty() || scene_pool.is_empty() {
        return Err(DatasetError::GridInvalid(
            "captions and scene pool must be non-empty".into(),
        ));
    }
    let pool = scene_pool_summary(scene_pool);
    let mut outcome = ReverseOutcome {
        pairs: Vec::new(),
        rejections: Vec::new(),
    };

    for (index, caption) in captions.iter().enumerate() {
        let prompt = render_prompt(
            matching_template,
            &[("caption", caption.as_str()), ("scene_pool", pool.as_str())],
        )
        .map_err(GenError::from)?;
        let request = crate::backend::GenerationRequest {
            prompt,
            model: params.model.clone(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
            seed: params.seed,
        };
        match backend.complete(&request) {
            Ok(result) => {
                let text = result.text.trim().to_string();
                if text.is_empty() || text.starts_with(UNMATCHED_MARKER) {
                    outcome.rejections.push(Rejection {
                        index,
                        caption: caption.clone(),
                        reason: if text.is_empty() {
                            "empty output".into()
                        } else {
                            "backend answered UNMATCHED".into()
                        },
                    });
                } else {
                    outcome.pairs.push(TrainingPair {
                        instruction: matching_template.role_preamble.clone(),
                        input: text,
                        output: caption.clone(),
                        kind: PairKind::NarrativeToMusic,
                        provenance: Provenance::ReversePaired,
                    });
                }
            }
            Err(e) => return Err(DatasetError::Generation(e.into())),
        }
    }
    Ok(outcome)
}

/// JSONL export with fixed key order (instruction, input, output, ...).
pub fn export_pairs(pairs: &[TrainingPair], path: &Path) -> Result<(), DatasetError> {
    let io_err = |e: std::io::Error| DatasetError::IoFailure {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    if pairs.is_empty() {
        log::warn!("exporting an empty pair list to {}", path.display());
    }
    for pair in pairs {
        let line = serde_json::to_string(pair).expect("pair serializes");
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

pub fn import_pairs(path: &Path) -> Result<Vec<TrainingPair>, DatasetError> {
    let io_err = |e: std::io::Error| DatasetError::IoFailure {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut pairs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(
            serde_json::from_str(&line).map_err(|e| DatasetError::IoFailure {
                path: path.display().to_string(),
                detail: format!("bad pair line: {e}"),
            })?,
        );
    }
    Ok(pairs)
}

/// Captions: plain text (one per line) or JSONL objects with a `caption`
/// key.
pub fn load_captions(path: &Path) -> Result<Vec<String>, DatasetError> {
    let raw = std::fs::read_to_string(path).map_err(|e| DatasetError::IoFailure {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok(raw
        .lines()
        .filter(|line| !line.trim().is_empty())
        .map(|line| {
            serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("caption").and_then(|c| c.as_str()).map(str::to_string))
                .unwrap_or_else(|| line.trim().to_string())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::testing::ScriptedBackend;

    fn grid(scenes: usize, times: usize, weathers: usize) -> GridSpec {
        GridSpec {
            scenes: (0..scenes).map(|i| format!("Biome{i}")).collect(),
            times: (0..times).map(|i| format!("time{i}")).collect(),
            weathers: (0..weathers).map(|i| format!("weather{i}")).collect(),
            player_states: vec![],
        }
    }

    fn templates() -> (PromptTemplate, PromptTemplate, PromptTemplate) {
        (
            PromptTemplate {
                id: "n".into(),
                role_preamble: "Narrate the scene.".into(),
                body: "Game data: {info_str}".into(),
                max_output_words: None,
            },
            PromptTemplate {
                id: "m".into(),
                role_preamble: "Describe the music.".into(),
                body: "Scene: {scene}\nAnchor: {anchor}\nmusic".into(),
                max_output_words: Some(20),
            },
            PromptTemplate {
                id: "match".into(),
                role_preamble: "Match captions to scenes.".into(),
                body: "Caption: {caption}\nScenes: {scene_pool}\nIf nothing fits reply UNMATCHED."
                    .into(),
                max_output_words: None,
            },
        )
    }

    #[test]
    fn grid_counts_and_determinism() {
        let (narrative, music, _) = templates();
        let backend = MockBackend::new(9);
        let params = GenParams::default();
        let pairs =
            synthesize_pairs(&grid(2, 2, 1), &backend, &narrative, &music, &params).unwrap();
        assert_eq!(pairs.len(), 8);
        let narrative_pairs = pairs
            .iter()
            .filter(|p| p.kind == PairKind::SceneToNarrative)
            .count();
        assert_eq!(narrative_pairs, 4);
        assert!(pairs.iter().all(|p| p.provenance == Provenance::Synthesized));
        assert!(pairs
            .iter()
            .all(|p| !p.instruction.is_empty() && !p.input.is_empty() && !p.output.is_empty()));

        let again =
            synthesize_pairs(&grid(2, 2, 1), &backend, &narrative, &music, &params).unwrap();
        assert_eq!(pairs, again);
    }

    #[test]
    fn export_import_round_trip() {
        let (narrative, music, _) = templates();
        let backend = MockBackend::new(9);
        let pairs = synthesize_pairs(
            &grid(2, 1, 1),
            &backend,
            &narrative,
            &music,
            &GenParams::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        export_pairs(&pairs, &path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content.lines().count(), pairs.len());
        // Fixed key order on the wire.
        assert!(content.lines().next().unwrap().starts_with("{\"instruction\":"));
        assert_eq!(import_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn export_empty_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        export_pairs(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    }

    #[test]
    fn export_unwritable_path_fails() {
        let err = export_pairs(&[], Path::new("/nonexistent-dir/pairs.jsonl")).unwrap_err();
        assert!(matches!(err, DatasetError::IoFailure { .. }));
    }

    fn scene_pool() -> Vec<CharacterizedData> {
        ["Forest", "Desert"]
            .iter()
            .map(|scene| {
                let snapshot = grid_snapshot(scene, "morning", "clear", &PlayerState::default());
                characterize(&snapshot, ContextMode::Exploration)
            })
            .collect()
    }

    #[test]
    fn reverse_pairing_counts() {
        let (_, _, matching) = templates();
        let backend = MockBackend::new(4);
        let captions: Vec<String> = (0..3).map(|i| format!("calm melody number {i}")).collect();
        let outcome = reverse_pair(
            &captions,
            &scene_pool(),
            &backend,
            &matching,
            &GenParams::default(),
        )
        .unwrap();
        assert_eq!(outcome.pairs.len(), 3);
        assert!(outcome.rejections.is_empty());
        assert!(outcome
            .pairs
            .iter()
            .all(|p| p.provenance == Provenance::ReversePaired
                && p.kind == PairKind::NarrativeToMusic));
        // The caption is the supervised output.
        assert_eq!(outcome.pairs[1].output, captions[1]);
    }

    #[test]
    fn rejections_are_reported() {
        let (_, _, matching) = templates();
        let backend = ScriptedBackend::new(vec![
            Ok("A fitting forest narrative.".into()),
            Ok("UNMATCHED".into()),
            Ok("A fitting desert narrative.".into()),
        ]);
        let captions: Vec<String> = (0..3).map(|i| format!("caption {i}")).collect();
        let outcome = reverse_pair(
            &captions,
            &scene_pool(),
            &backend,
            &matching,
            &GenParams::default(),
        )
        .unwrap();
        assert_eq!(outcome.pairs.len(), 2);
        assert_eq!(outcome.rejections.len(), 1);
        assert_eq!(outcome.rejections[0].index, 1);
        assert_eq!(outcome.pairs.len() + outcome.rejections.len(), captions.len());
    }

    #[test]
    fn caption_file_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.txt");
        std::fs::write(
            &path,
            "plain caption one\n{\"id\": \"x\", \"caption\": \"json caption\"}\n\n",
        )
        .unwrap();
        let captions = load_captions(&path).unwrap();
        assert_eq!(captions, vec!["plain caption one", "json caption"]);
    }
}
