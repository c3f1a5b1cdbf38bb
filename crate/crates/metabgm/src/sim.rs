//! Deterministic synthetic game-world stream.
//!
//! A [`Scenario`] is a declarative file: a seed, an emit period, a duration
//! and a list of timed patches applied to the evolving world state. Between
//! patches the state drifts by a seeded random walk with fixed step sizes
//! (temperature +/-0.05, health +/-0.1 clamped to [0, 20], position X/Z
//! +/-0.5 per emission). The same scenario and seed always produce a
//! byte-identical snapshot sequence.

use std::io::Write;
use std::net::TcpStream;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::scene::SceneSnapshot;

const TEMPERATURE_STEP: f64 = 0.05;
const HEALTH_STEP: f64 = 0.1;
const POSITION_STEP: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub at_ms: u64,
    /// Partial snapshot merged over the current state at `at_ms`.
    pub patch: serde_json::Map<String, Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub events: Vec<ScenarioEvent>,
    pub emit_period_ms: u64,
    pub duration_ms: u64,
    #[serde(default)]
    pub biome_pool: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("connection refused to {endpoint}: {detail}")]
    ConnectionRefused { endpoint: String, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize)]
pub struct SendReport {
    pub sent: u64,
    pub duration_ms: f64,
    pub max_skew_ms: f64,
    pub mean_skew_ms: f64,
}

pub fn load_scenario(path: &Path) -> Result<Scenario, SimError> {
    let raw = std::fs::read_to_string(path)?;
    let scenario: Scenario =
        serde_json::from_str(&raw).map_err(|e| SimError::ScenarioInvalid(e.to_string()))?;
    validate(&scenario)?;
    Ok(scenario)
}

fn validate(scenario: &Scenario) -> Result<(), SimError> {
    if scenario.emit_period_ms == 0 {
        return Err(SimError::ScenarioInvalid("emit_period_ms must be > 0".into()));
    }
    if scenario.duration_ms == 0 {
        return Err(SimError::ScenarioInvalid("duration_ms must be > 0".into()));
    }
    if scenario.events.windows(2).any(|w| w[0].at_ms > w[1].at_ms) {
        return Err(SimError::ScenarioInvalid("events must be sorted by at_ms".into()));
    }
    Ok(())
}

fn base_state(scenario: &Scenario, rng: &mut ChaCha8Rng) -> Value {
    let scene = if scenario.biome_pool.is_empty() {
        "Forest".to_string()
    } else {
        scenario.biome_pool[rng.gen_range(0..scenario.biome_pool.len())].clone()
    };
    json!({
        "Timestamp": 0,
        "Scene": scene,
        "Time": "morning",
        "Weather": "clear",
        "Temperature": 0.8,
        "Health": 20.0,
        "Satiety": 20.0,
        "Status": {"Wet": false, "NotOnFire": true},
        "Movement": {"Speed": 0.0, "NotRunning": true},
        "Position": {"X": 0.0, "Y": 64.0, "Z": 0.0, "OnGround": true},
        "Hostile Entity": {},
        "Being Attacked": false
    })
}

fn add_jitter(state: &mut Value, key: &str, step: f64, rng: &mut ChaCha8Rng) {
    // Draw even when the key is absent so patches cannot desync the stream.
    let delta = rng.gen_range(-step..=step);
    if let Some(current) = state.get(key).and_then(Value::as_f64) {
        state[key] = json!(current + delta);
    }
}

/// Emits `floor(duration / period)` snapshots at `t = i * period`, applying
/// each event's patch once its time has come.
pub fn simulate_stream(scenario: &Scenario) -> Result<Vec<SceneSnapshot>, SimError> {
    validate(scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut state = base_state(scenario, &mut rng);
    let count = scenario.duration_ms / scenario.emit_period_ms;
    let mut next_event = 0usize;
    let mut out = Vec::with_capacity(count as usize);

    for i in 0..count {
        let t = i * scenario.emit_period_ms;
        while next_event < scenario.events.len() && scenario.events[next_event].at_ms <= t {
            for (key, value) in &scenario.events[next_event].patch {
                state[key.as_str()] = value.clone();
            }
            next_event += 1;
        }

        if i > 0 {
            add_jitter(&mut state, "Temperature", TEMPERATURE_STEP, &mut rng);
            add_jitter(&mut state, "Health", HEALTH_STEP, &mut rng);
            if let Some(health) = state.get("Health").and_then(Value::as_f64) {
                state["Health"] = json!(health.clamp(0.0, 20.0));
            }
            let dx = rng.gen_range(-POSITION_STEP..=POSITION_STEP);
            let dz = rng.gen_range(-POSITION_STEP..=POSITION_STEP);
            if let Some(position) = state.get_mut("Position").and_then(Value::as_object_mut) {
                if let Some(x) = position.get("X").and_then(Value::as_f64) {
                    position.insert("X".into(), json!(x + dx));
                }
                if let Some(z) = position.get("Z").and_then(Value::as_f64) {
                    position.insert("Z".into(), json!(z + dz));
                }
            }
        }

        state["Timestamp"] = json!(t);
        let snapshot: SceneSnapshot = serde_json::from_value(state.clone())
            .map_err(|e| SimError::ScenarioInvalid(format!("state at t={t} is not a valid snapshot: {e}")))?;
        out.push(snapshot);
    }
    Ok(out)
}

/// Sends the simulated stream over TCP as newline-delimited JSON.
/// `time_scale` maps snapshot time to wall time: 0 sends as fast as
/// possible, 1 replays in real time.
pub fn replay_to_collector(
    scenario: &Scenario,
    endpoint: &str,
    time_scale: f64,
) -> Result<SendReport, SimError> {
    let snapshots = simulate_stream(scenario)?;
    let mut stream = TcpStream::connect(endpoint).map_err(|e| SimError::ConnectionRefused {
        endpoint: endpoint.to_string(),
        detail: e.to_string(),
    })?;

    let start = Instant::now();
    let mut max_skew: f64 = 0.0;
    let mut skew_sum = 0.0;
    let mut sent = 0u64;
    for snapshot in &snapshots {
        if time_scale > 0.0 {
            let target = Duration::from_secs_f64(snapshot.timestamp as f64 / 1000.0 * time_scale);
            let elapsed = start.elapsed();
            if target > elapsed {
                std::thread::sleep(target - elapsed);
            }
            let skew = (start.elapsed().as_secs_f64() - target.as_secs_f64()).abs() * 1000.0;
            max_skew = max_skew.max(skew);
            skew_sum += skew;
        }
        let line = serde_json::to_string(snapshot).expect("snapshot serializes");
        stream.write_all(line.as_bytes())?;
        stream.write_all(b"\n")?;
        sent += 1;
    }
    stream.flush()?;

    Ok(SendReport {
        sent,
        duration_ms: start.elapsed().as_secs_f64() * 1000.0,
        max_skew_ms: max_skew,
        mean_skew_ms: if sent > 0 { skew_sum / sent as f64 } else { 0.0 },
    })
}
