"""Failure analytics for power-grid control episodes.

Extracts failure descriptors from episode logs, clusters failure types,
builds a chronic-disjoint forecasting dataset, trains tree ensembles and
emits diagnostic reports. A seeded synthetic generator provides test data.
"""

__version__ = "0.1.0"
