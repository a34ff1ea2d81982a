//! Criterion benchmarks for the correction engine; see `benches/`.
