"""Multi-level feature fusion lab: duplex-gated all-to-all fusion, baselines and a dense feature pyramid."""

__version__ = "0.1.0"
