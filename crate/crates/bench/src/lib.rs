//! Criterion benchmarks for the convolution kernels and DFG training steps;
//! see `benches/`.
