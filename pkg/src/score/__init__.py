"""SCORE: narrative-coherence engine.

Tracks key-item states across story episodes, flags and corrects continuity
errors, retrieves semantically and emotionally aligned episodes as context,
and produces facet-scored evaluations and answers to questions about
long-form stories.
"""

__version__ = "0.1.0"
