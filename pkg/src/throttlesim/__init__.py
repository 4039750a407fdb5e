"""Energy-aware LLM serving simulator with SLO-driven frequency throttling and autoscaling."""

__version__ = "0.1.0"
