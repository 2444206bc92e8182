"""Experiment harnesses: sweeps and throughput benchmarks."""
