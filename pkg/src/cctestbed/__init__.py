"""In-memory batch OLTP testbed for comparing concurrency-control schemes."""

from __future__ import annotations

__version__ = "0.1.0"
