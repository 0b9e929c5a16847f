"""Implicit finite operator learning."""
