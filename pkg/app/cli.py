"""
GeoSynth CLI Module
Main entry point for the command-line interface
"""

import sys

from app.adapters.cli_adapter import CLIAdapter


def run_cli(argv=None) -> int:
    """Main CLI entry point; returns the exit code"""
    adapter = CLIAdapter()
    return adapter.run(argv)


if __name__ == "__main__":
    sys.exit(run_cli())
