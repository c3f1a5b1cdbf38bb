//! Snapshot schema and context-dependent data characterization.
//!
//! A [`SceneSnapshot`] is one timestamped observation of world and player
//! state, received as a single JSON object. [`characterize`] projects a
//! snapshot down to the fields that matter for the current context:
//! negative-valence flags (keys containing `Not`) are dropped, reals are
//! rounded to two decimals, and field retention depends on whether the
//! player is in combat or exploring.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Top-level fields retained while in combat.
pub const COMBAT_RETAIN: [&str; 8] = [
    "Scene",
    "Health",
    "Satiety",
    "Status",
    "Movement",
    "Position",
    "Hostile Entity",
    "Being Attacked",
];

/// Top-level fields retained while exploring.
pub const EXPLORATION_RETAIN: [&str; 7] = [
    "Scene",
    "Time",
    "Weather",
    "Temperature",
    "Status",
    "Movement",
    "Position",
];

/// A boolean or numeric flag inside `Status`, `Movement` or `Position`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Flag {
    Bool(bool),
    Num(f64),
}

/// A value describing a nearby hostile (count, distance, label, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HostileInfo {
    Num(f64),
    Text(String),
}

/// One timestamped 11-element observation of world and player state.
///
/// Wire keys are fixed ("Scene", "Hostile Entity", ...); unknown top-level
/// keys are preserved in `extras` and round-trip losslessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSnapshot {
    #[serde(rename = "Timestamp")]
    pub timestamp: u64,
    #[serde(rename = "Scene")]
    pub scene: String,
    #[serde(rename = "Time")]
    pub time: String,
    #[serde(rename = "Weather")]
    pub weather: String,
    #[serde(rename = "Temperature")]
    pub temperature: f64,
    #[serde(rename = "Health")]
    pub health: f64,
    #[serde(rename = "Satiety")]
    pub satiety: f64,
    #[serde(rename = "Status")]
    pub status: IndexMap<String, Flag>,
    #[serde(rename = "Movement")]
    pub movement: IndexMap<String, Flag>,
    #[serde(rename = "Position")]
    pub position: IndexMap<String, Flag>,
    #[serde(rename = "Hostile Entity", default)]
    pub hostile_entity: IndexMap<String, HostileInfo>,
    #[serde(rename = "Being Attacked")]
    pub being_attacked: bool,
    #[serde(flatten)]
    pub extras: IndexMap<String, serde_json::Value>,
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

/// Combat vs. exploration; selects which fields characterization retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextMode {
    Combat,
    Exploration,
}

impl ContextMode {
    pub fn retain_list(self) -> &'static [&'static str] {
        match self {
            ContextMode::Combat => &COMBAT_RETAIN,
            ContextMode::Exploration => &EXPLORATION_RETAIN,
        }
    }
}

/// A characterized value: string, flag, rounded real, or a filtered map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CharValue {
    Flag(bool),
    Num(f64),
    Text(String),
    Map(IndexMap<String, CharValue>),
}

/// Output of characterization: filtered, rounded, mode-dependent entries
/// in retention-list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizedData {
    pub entries: IndexMap<String, CharValue>,
    pub mode: ContextMode,
}

/// Parses and validates one JSON snapshot message.
pub fn parse_snapshot(raw: &str) -> Result<SceneSnapshot, SceneError> {
    // Distinguish syntax errors from schema errors: a non-JSON payload is
    // MalformedJson, a well-formed object missing a field is SchemaViolation.
    let value: serde_json::Value = serde_json::from_str(raw)
        .map_err(|e| SceneError::MalformedJson(e.to_string()))?;
    if !value.is_object() {
        return Err(SceneError::SchemaViolation(
            "snapshot must be a JSON object".into(),
        ));
    }
    let snapshot: SceneSnapshot = serde_json::from_value(value)
        .map_err(|e| SceneError::SchemaViolation(e.to_string()))?;
    validate_snapshot(&snapshot)?;
    Ok(snapshot)
}

fn validate_snapshot(s: &SceneSnapshot) -> Result<(), SceneError> {
    if !(0.0..=20.0).contains(&s.health) {
        return Err(SceneError::SchemaViolation(format!(
            "Health out of range [0, 20]: {}",
            s.health
        )));
    }
    if !(0.0..=20.0).contains(&s.satiety) {
        return Err(SceneError::SchemaViolation(format!(
            "Satiety out of range [0, 20]: {}",
            s.satiety
        )));
    }
    if !s.temperature.is_finite() {
        return Err(SceneError::SchemaViolation(format!(
            "Temperature not finite: {}",
            s.temperature
        )));
    }
    Ok(())
}

/// Combat iff the player is being attacked or a hostile is nearby.
pub fn detect_mode(snapshot: &SceneSnapshot) -> ContextMode {
    if snapshot.being_attacked || !snapshot.hostile_entity.is_empty() {
        ContextMode::Combat
    } else {
        ContextMode::Exploration
    }
}

/// Rounds to two decimal places, half away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn snapshot_entries(snapshot: &SceneSnapshot) -> IndexMap<String, CharValue> {
    let mut entries = IndexMap::new();
    entries.insert("Scene".into(), CharValue::Text(snapshot.scene.clone()));
    entries.insert("Time".into(), CharValue::Text(snapshot.time.clone()));
    entries.insert("Weather".into(), CharValue::Text(snapshot.weather.clone()));
    entries.insert("Temperature".into(), CharValue::Num(snapshot.temperature));
    entries.insert("Health".into(), CharValue::Num(snapshot.health));
    entries.insert("Satiety".into(), CharValue::Num(snapshot.satiety));
    entries.insert("Status".into(), raw_flag_map(&snapshot.status));
    entries.insert("Movement".into(), raw_flag_map(&snapshot.movement));
    entries.insert("Position".into(), raw_flag_map(&snapshot.position));
    let hostiles: IndexMap<String, CharValue> = snapshot
        .hostile_entity
        .iter()
        .map(|(k, v)| {
            let cv = match v {
                HostileInfo::Num(n) => CharValue::Num(*n),
                HostileInfo::Text(t) => CharValue::Text(t.clone()),
            };
            (k.clone(), cv)
        })
        .collect();
    entries.insert("Hostile Entity".into(), CharValue::Map(hostiles));
    entries.insert(
        "Being Attacked".into(),
        CharValue::Flag(snapshot.being_attacked),
    );
    entries
}

fn raw_flag_map(map: &IndexMap<String, Flag>) -> CharValue {
    let raw = map
        .iter()
        .map(|(k, v)| {
            let cv = match v {
                Flag::Bool(b) => CharValue::Flag(*b),
                Flag::Num(n) => CharValue::Num(*n),
            };
            (k.clone(), cv)
        })
        .collect();
    CharValue::Map(raw)
}

fn refine_value(value: &CharValue) -> CharValue {
    match value {
        CharValue::Flag(b) => CharValue::Flag(*b),
        CharValue::Num(n) => CharValue::Num(round2(*n)),
        CharValue::Text(t) => CharValue::Text(t.clone()),
        CharValue::Map(m) => CharValue::Map(
            m.iter()
                .filter(|(k, _)| !k.contains("Not"))
                .map(|(k, v)| (k.clone(), refine_value(v)))
                .collect(),
        ),
    }
}

/// The characterization rules applied to an entry map: drop `Not`-keys at
/// any depth, round reals to two decimals, retain top-level keys on the
/// mode's list in list order. Idempotent.
pub fn characterize_entries(
    entries: &IndexMap<String, CharValue>,
    mode: ContextMode,
) -> IndexMap<String, CharValue> {
    let mut out = IndexMap::new();
    for &key in mode.retain_list() {
        if key.contains("Not") {
            continue;
        }
        if let Some(value) = entries.get(key) {
            out.insert(key.to_string(), refine_value(value));
        }
    }
    out
}

/// Algorithm-1 style feature processing of one snapshot.
pub fn characterize(snapshot: &SceneSnapshot, mode: ContextMode) -> CharacterizedData {
    CharacterizedData {
        entries: characterize_entries(&snapshot_entries(snapshot), mode),
        mode,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        r#"{
            "Timestamp": 1000,
            "Scene": "Forest",
            "Time": "morning",
            "Weather": "clear",
            "Temperature": 0.789,
            "Health": 19.5,
            "Satiety": 18.0,
            "Status": {"NotOnFire": true, "Wet": false},
            "Movement": {"NotRunning": true, "Speed": 1.23456},
            "Position": {"X": 10.005, "Y": 64.0, "OnGround": true},
            "Hostile Entity": {},
            "Being Attacked": false
        }"#
        .to_string()
    }

    #[test]
    fn parse_complete_snapshot() {
        let s = parse_snapshot(&sample_json()).unwrap();
        assert_eq!(s.scene, "Forest");
        assert_eq!(s.timestamp, 1000);
        assert!(!s.being_attacked);
        assert!(s.hostile_entity.is_empty());
    }

    #[test]
    fn parse_round_trips_extras() {
        let raw = sample_json().replace("\"Timestamp\": 1000,", "\"Timestamp\": 1000, \"Dimension\": \"overworld\",");
        let s = parse_snapshot(&raw).unwrap();
        assert_eq!(
            s.extras.get("Dimension"),
            Some(&serde_json::Value::String("overworld".into()))
        );
        let back = serde_json::to_string(&s).unwrap();
        let s2 = parse_snapshot(&back).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn missing_scene_is_schema_violation() {
        let raw = sample_json().replace("\"Scene\": \"Forest\",", "");
        match parse_snapshot(&raw) {
            Err(SceneError::SchemaViolation(msg)) => assert!(msg.contains("Scene"), "{msg}"),
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn health_out_of_range_rejected() {
        let raw = sample_json().replace("\"Health\": 19.5,", "\"Health\": 25.0,");
        match parse_snapshot(&raw) {
            Err(SceneError::SchemaViolation(msg)) => assert!(msg.contains("Health"), "{msg}"),
            other => panic!("expected SchemaViolation, got {other:?}"),
        }
    }

    #[test]
    fn not_json_is_malformed() {
        assert!(matches!(
            parse_snapshot("not json"),
            Err(SceneError::MalformedJson(_))
        ));
    }

    #[test]
    fn mode_detection() {
        let mut s = parse_snapshot(&sample_json()).unwrap();
        assert_eq!(detect_mode(&s), ContextMode::Exploration);
        s.being_attacked = true;
        assert_eq!(detect_mode(&s), ContextMode::Combat);
        s.being_attacked = false;
        s.hostile_entity
            .insert("Zombie".into(), HostileInfo::Num(3.0));
        assert_eq!(detect_mode(&s), ContextMode::Combat);
    }

    #[test]
    fn characterize_combat_hand_trace() {
        // status={"NotOnFire": true, "Wet": false} under Combat keeps only
        // Wet; Health=19.123456 rounds to 19.12.
        let mut s = parse_snapshot(&sample_json()).unwrap();
        s.health = 19.123456;
        let c = characterize(&s, ContextMode::Combat);
        assert_eq!(c.entries.get("Health"), Some(&CharValue::Num(19.12)));
        match c.entries.get("Status") {
            Some(CharValue::Map(m)) => {
                assert_eq!(m.len(), 1);
                assert_eq!(m.get("Wet"), Some(&CharValue::Flag(false)));
            }
            other => panic!("expected Status map, got {other:?}"),
        }
        assert!(!c.entries.contains_key("Weather"));
        assert!(!c.entries.contains_key("Time"));
        assert!(c.entries.contains_key("Being Attacked"));
    }

    #[test]
    fn characterize_exploration_drops_hostiles() {
        let mut s = parse_snapshot(&sample_json()).unwrap();
        s.hostile_entity
            .insert("Skeleton".into(), HostileInfo::Num(1.0));
        let c = characterize(&s, ContextMode::Exploration);
        assert!(!c.entries.contains_key("Hostile Entity"));
        assert!(!c.entries.contains_key("Being Attacked"));
        assert!(c.entries.contains_key("Weather"));
    }

    #[test]
    fn characterize_empty_maps_pass_through() {
        let mut s = parse_snapshot(&sample_json()).unwrap();
        s.status.clear();
        s.movement.clear();
        s.position.clear();
        let c = characterize(&s, ContextMode::Exploration);
        assert_eq!(c.entries.get("Status"), Some(&CharValue::Map(IndexMap::new())));
        assert_eq!(c.entries.get("Scene"), Some(&CharValue::Text("Forest".into())));
        assert_eq!(c.entries.get("Temperature"), Some(&CharValue::Num(0.79)));
    }

    #[test]
    fn rounding_half_away_from_zero() {
        assert_eq!(round2(0.125), 0.13);
        assert_eq!(round2(-0.125), -0.13);
        assert_eq!(round2(1.004999), 1.0);
        assert_eq!(round2(10.005), 10.01);
    }

    #[test]
    fn characterize_is_idempotent() {
        let s = parse_snapshot(&sample_json()).unwrap();
        for mode in [ContextMode::Combat, ContextMode::Exploration] {
            let once = characterize(&s, mode);
            let twice = characterize_entries(&once.entries, mode);
            assert_eq!(once.entries, twice);
        }
    }
}
