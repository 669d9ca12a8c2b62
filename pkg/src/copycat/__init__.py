"""Black-box model extraction with hard-label queries, and its evaluation harness."""

__version__ = "0.1.0"
