//! Benchmarks for lefl-core live under `benches/`.
