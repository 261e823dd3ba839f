"""Computation layer: numerics, prototype network, moment propagation, attribution."""
