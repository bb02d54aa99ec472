"""Experiment orchestration: config, pipeline stages, reports, CLI."""
