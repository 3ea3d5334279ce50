"""Volterra square-root processes."""
