"""Incremental scene graph expansion."""
