"""Packaged figure reproduction configurations."""
