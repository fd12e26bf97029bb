//! Criterion benchmarks for the mactn kernels; see `benches/`.
