"""Multi-environment meta-learning for CSI fingerprint positioning.

A synthetic street-canyon MIMO-OFDM channel feeds a 3-channel fingerprint
pipeline; a residual CNN with an environment-independent trunk and
environment-specific heads is trained jointly across environments and
evaluated under transfer (fine-tune / freeze / scratch) to a held-out one.
"""

__version__ = "0.1.0"
