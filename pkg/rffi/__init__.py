"""Simulated RF-fingerprint identification testbed."""
