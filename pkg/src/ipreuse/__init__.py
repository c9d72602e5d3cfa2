"""Cloud IP reuse: pool-policy simulation, capture-recapture estimation and telescope traffic triage."""

__version__ = "0.1.0"
