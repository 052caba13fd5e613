"""Integration tests for geos."""
