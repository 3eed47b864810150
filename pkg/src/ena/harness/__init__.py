"""Operational surface: configs, synthetic tasks, training, checks, benchmarks and the CLI."""
