//! Criterion benchmarks for the search, value iteration, forest and
//! simulator hot paths. Run with `cargo bench -p hnu-bench`.
