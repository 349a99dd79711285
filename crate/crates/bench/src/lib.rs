//! Benchmarks live in `benches/`; run them with `cargo bench -p ss3d-bench`.
