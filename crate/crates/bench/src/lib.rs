//! Criterion benchmarks for the arclab kernels and model paths; see `benches/`.
