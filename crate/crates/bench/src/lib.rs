//! Criterion benchmarks for the geometry kernels and the model forward pass;
//! see `benches/kernels.rs`.
