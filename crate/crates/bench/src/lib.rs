//! Criterion benchmarks live in `benches/`; run them with `cargo bench -p auto4d-bench`.
