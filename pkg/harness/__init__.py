"""Command-line entry points for geos."""
