//! Benchmark helpers; see `benches/core_ops.rs`.
