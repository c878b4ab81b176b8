"""Serves Python functions to a parent process over newline-delimited JSON:
one request object per stdin line, one response object per stdout line."""

from .cli import collect_functions, load_module, main, serve

__all__ = ["collect_functions", "load_module", "main", "serve"]
