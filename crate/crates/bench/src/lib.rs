//! Criterion benchmarks for kernel construction, kernelized IPS and the
//! policy optimizers. Run with `cargo bench -p kernel-ope-bench`.
