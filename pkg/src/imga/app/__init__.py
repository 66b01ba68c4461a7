"""Command-line orchestration, configuration and file output."""
