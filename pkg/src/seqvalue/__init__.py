"""Offline reinforcement learning over fixed-length action sequences.

Value functions are learned on dataset options only (expectile regression,
optionally with a categorical value head); a sequence policy is extracted
afterwards and can be sharpened at test time by best-of-N reranking.
"""

__version__ = "0.1.0"
