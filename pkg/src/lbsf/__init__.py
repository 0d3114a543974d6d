"""Long-term payment behavior sequence folding for default-risk scoring."""

__version__ = "0.1.0"
