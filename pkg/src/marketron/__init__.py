"""Marketron price-formation model and utility-indifference option pricing."""
