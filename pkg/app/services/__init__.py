"""Numeric engine, model, prompt, data and persistence services."""
