"""Experiment harness: configuration, runner, benchmarks and the command line."""
