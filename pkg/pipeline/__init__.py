"""Corpus synthesis, batching, configuration, training loops and reports."""
