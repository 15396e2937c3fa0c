"""Experiment configuration, data splits, artifacts and the stage runner."""
