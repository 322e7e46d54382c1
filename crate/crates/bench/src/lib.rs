//! Criterion benchmarks for the feature, model and training pipeline; see `benches/`.
