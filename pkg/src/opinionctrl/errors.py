"""Errors shared across modules."""


class SchemaError(Exception):
    """A persisted file does not match its expected schema or content."""
