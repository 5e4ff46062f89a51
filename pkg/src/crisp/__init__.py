"""Coefficient-gated shared-basis weight recombination."""
