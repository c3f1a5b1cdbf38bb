//! MetaBGM: scene-aware background-music description pipeline.
//!
//! Converts a stream of game-scene snapshots into time-segmented music
//! description texts through a two-stage generation chain (scene data to
//! narrative text, narrative text to music description), with the previous
//! segment's description carried forward as a melodic anchor. Includes a
//! telemetry collector, a deterministic world simulator, text-metric
//! evaluation (BLEU, METEOR, ROUGE-L) and instruction-tuning dataset
//! tooling.

pub mod backend;
pub mod dataset;
pub mod eval;
pub mod genstage;
pub mod ingest;
pub mod pipeline;
pub mod scene;
pub mod sim;
pub mod template;
pub mod testing;
