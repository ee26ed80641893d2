"""Sliding-window vote over per-round verdicts.

Rounds are grouped into blocks of xi. Inside a block the instantaneous
verdicts drive aggregation directly, so a one-off false flag only costs a
client that single round. At each block boundary the window is tallied:
a client flagged malicious in at least epsilon of the block's xi rounds is
excluded for that boundary round. The window resets every block; nothing
is blacklisted across blocks.
"""

from __future__ import annotations

import numpy as np


class IncompleteBlockError(RuntimeError):
    """decide() called before the current voting block is full."""


class VoteBuffer:
    """xi x n_clients window of 0/1 verdicts (1 = benign)."""

    def __init__(self, xi: int, epsilon: int, n_clients: int):
        if xi < 1 or epsilon < 1:
            raise ValueError("xi and epsilon must be positive")
        self.xi = xi
        self.epsilon = epsilon
        self.n_clients = n_clients
        self.window = np.ones((xi, n_clients), dtype=int)
        self._filled = 0

    def push_verdicts(self, verdicts, t: int) -> "VoteBuffer":
        """Record round t's verdicts at row (t-1) mod xi; rounds are
        1-indexed and each block starts with a cleared window."""
        verdicts = np.asarray(verdicts, dtype=int)
        if verdicts.shape != (self.n_clients,):
            raise ValueError(
                f"expected {self.n_clients} verdicts, got {verdicts.shape}")
        row = (t - 1) % self.xi
        if row == 0:
            self.window[:] = 1
            self._filled = 0
        self.window[row] = verdicts
        self._filled = row + 1
        return self

    def decide(self) -> np.ndarray:
        """Block-boundary exclusion vector: 0 where the malicious-flag
        count over the block reaches epsilon, else 1."""
        if self._filled != self.xi:
            raise IncompleteBlockError(
                f"voting block has {self._filled} of {self.xi} rounds")
        malicious_flags = (1 - self.window).sum(axis=0)
        return (malicious_flags < self.epsilon).astype(int)


def include_mask(verdicts, decision, t: int, xi: int) -> np.ndarray:
    """Aggregation mask for round t: the instantaneous verdicts inside a
    block, the voted decision at block boundaries (t mod xi == 0)."""
    if t % xi == 0:
        if decision is None:
            raise ValueError("block-boundary round needs a vote decision")
        return np.asarray(decision, dtype=bool)
    return np.asarray(verdicts, dtype=bool)
