//! Benchmarks for the clustering core; see `benches/`.
