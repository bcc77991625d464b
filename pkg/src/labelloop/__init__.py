"""labelloop: a desk-scale feedback and monitoring loop for imaging AI.

Simulated sites author interactive reports whose inline anchors carry
localized labels; a central hub ingests de-identified records idempotently,
scores algorithm output against the labels, watches the agreement stream for
drift, alerts every affected site, and keeps a hash-chained audit trail of
model lifecycle events.
"""

__version__ = "0.1.0"
