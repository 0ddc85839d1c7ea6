"""Evaluation, metrics files, reference oracles and the command-line interface."""
