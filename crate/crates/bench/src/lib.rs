//! Benchmarks live in `benches/`; run them with `cargo bench -p voxsteer-bench`.
