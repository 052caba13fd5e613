"""Unit tests for geos."""
