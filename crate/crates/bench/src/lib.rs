//! Criterion benchmarks for the simulator, tensor kernels, nearest-neighbour
//! inference and VAE training steps. Run with `cargo bench -p imgep-bench`.

pub use imgep_core;
