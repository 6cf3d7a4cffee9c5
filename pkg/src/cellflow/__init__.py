"""cellflow: cellular-traffic forecasting toolkit.

Packet-capture ingestion, time-bin feature extraction with padding strategies,
sliding-window datasets, a from-scratch LSTM for uplink-intensity regression and
burst detection, K-Means traffic clustering, and a seeded synthetic-traffic
generator.
"""

from . import analysis, dataset, features, ingest, lstm, synth

__all__ = ["analysis", "dataset", "features", "ingest", "lstm", "synth"]
__version__ = "0.1.0"
