"""Braess route detection on queue-aware road networks."""
