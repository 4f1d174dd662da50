"""HTTP service wrapping the pipeline: create runs, execute stages, read
metrics and reports. The CLI is a thin client of this layer."""

from .app import create_app

__all__ = ["create_app"]
