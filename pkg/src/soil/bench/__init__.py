"""Experiment configs, the command line interface and multi-seed suites."""
