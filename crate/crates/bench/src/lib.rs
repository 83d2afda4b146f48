//! Benchmarks live in `benches/`; run them with `cargo bench -p gat-bench`.
