//! Benchmark-only crate: see `benches/core_ops.rs` for the measured paths.
