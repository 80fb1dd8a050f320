"""Configuration, caching, pipeline and command-line interface."""
