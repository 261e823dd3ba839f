"""Domain types and constants for prototype networks."""
