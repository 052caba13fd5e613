"""Tests for geos."""
