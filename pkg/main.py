#!/usr/bin/env python3
"""
GeoSynth - Main Entry Point
Fit generators, sample synthetic populations and evaluate them from the command line
"""

import sys

from app.cli import run_cli

if __name__ == "__main__":
    sys.exit(run_cli())
