"""Command-line experiments: configuration, orchestration and report output."""
