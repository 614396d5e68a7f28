"""Graph engine, signal processing, CTC, metrics, optimiser and checkpoint utilities."""
