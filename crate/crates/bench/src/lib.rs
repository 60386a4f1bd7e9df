//! Criterion benchmarks for the detector pipeline; see `benches/pipeline.rs`.
