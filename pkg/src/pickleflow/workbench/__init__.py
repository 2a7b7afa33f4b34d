"""Synthetic experiment harness and command-line interface."""
