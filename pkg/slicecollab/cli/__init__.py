"""Command line interface for slicecollab."""

from slicecollab.cli.commands import main

__all__ = ["main"]
