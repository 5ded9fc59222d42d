//! Criterion benchmarks for the attribution kernels; see `benches/`.
