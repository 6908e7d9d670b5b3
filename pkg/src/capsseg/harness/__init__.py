"""Command-line harness: config, checkpoints, experiment drivers."""
