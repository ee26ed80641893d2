"""Reference defenses: Krum-family selection, coordinate-wise trimmed
mean, and 2-means clustering over raw uploads.

These operate on whatever row representation they are handed (flat
parameter vectors or flattened heat maps), return an include mask plus a
per-client suspicion score, and break every tie by lowest client index so
comparison tables are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ModelParams


class DefenseConfigError(ValueError):
    """A defense's structural precondition does not hold."""


@dataclass
class DefenseVerdict:
    include_mask: np.ndarray          # bool per client
    scores: np.ndarray | None         # higher = more suspicious
    method: str

    def __post_init__(self):
        self.include_mask = np.asarray(self.include_mask, dtype=bool)
        if not self.include_mask.any():
            raise DefenseConfigError("a defense must include someone")


def _as_matrix(uploads) -> np.ndarray:
    if isinstance(uploads, np.ndarray) and uploads.ndim == 2:
        return uploads.astype(np.float64)
    return np.stack([u.values for u in uploads])


def krum_scores(rows: np.ndarray, f: int) -> np.ndarray:
    """Per-row sum of squared distances to its n - f - 2 nearest neighbors."""
    n = rows.shape[0]
    if n < 2 * f + 3:
        raise DefenseConfigError(
            f"krum needs n >= 2f + 3 rows (n={n}, f={f})")
    diffs = rows[:, None, :] - rows[None, :, :]
    d2 = (diffs ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    k = n - f - 2
    part = np.sort(d2, axis=1)[:, :k]
    return part.sum(axis=1)


def multi_krum(uploads, f: int, m: int | None = None) -> DefenseVerdict:
    """Keep the m lowest-scoring uploads (default m = n - f)."""
    rows = _as_matrix(uploads)
    n = rows.shape[0]
    if m is None:
        m = n - f
    if m < 1 or m > n:
        raise DefenseConfigError(f"selection count m={m} out of range")
    scores = krum_scores(rows, f)
    keep = np.argsort(scores, kind="stable")[:m]
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    return DefenseVerdict(mask, scores, "multi_krum")


def trimmed_mean(uploads, k: int) -> ModelParams:
    """Coordinate-wise mean after dropping the k largest and k smallest
    values of each coordinate."""
    if isinstance(uploads, np.ndarray):
        rows = uploads.astype(np.float64)
        specs = None
    else:
        rows = _as_matrix(uploads)
        specs = uploads[0].layer_specs
    n = rows.shape[0]
    if k < 0 or 2 * k >= n:
        raise DefenseConfigError(f"trim count k={k} needs 2k < n={n}")
    srt = np.sort(rows, axis=0)
    kept = srt[k:n - k]
    mean = kept.mean(axis=0)
    if specs is None:
        return mean
    return ModelParams(specs, mean)


def auror_kmeans(uploads, distance_threshold: float | None = None,
                 max_iter: int = 100) -> DefenseVerdict:
    """2-means over flat uploads; the smaller cluster is dropped when the
    centroids sit farther apart than the threshold (default: mean pairwise
    upload distance). Initialization is the deterministic farthest pair."""
    rows = _as_matrix(uploads)
    n = rows.shape[0]
    if n < 2:
        raise DefenseConfigError("clustering needs at least two uploads")
    diffs = rows[:, None, :] - rows[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(axis=2))
    if distance_threshold is None:
        iu = np.triu_indices(n, k=1)
        distance_threshold = float(dist[iu].mean())
    a, b = np.unravel_index(np.argmax(dist), dist.shape)
    if a > b:
        a, b = b, a
    centroids = np.stack([rows[a], rows[b]])
    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d0 = np.linalg.norm(rows - centroids[0], axis=1)
        d1 = np.linalg.norm(rows - centroids[1], axis=1)
        new_assign = (d1 < d0).astype(int)
        for c in (0, 1):
            members = rows[new_assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    sizes = np.bincount(assign, minlength=2)
    centroid_gap = float(np.linalg.norm(centroids[0] - centroids[1]))
    mask = np.ones(n, dtype=bool)
    if sizes[0] != sizes[1] and centroid_gap > distance_threshold:
        minor = int(np.argmin(sizes))
        mask = assign != minor
    major = int(np.argmax(sizes))  # ties resolve to cluster 0
    scores = np.linalg.norm(rows - centroids[major], axis=1)
    return DefenseVerdict(mask, scores, "auror")


def layercam_krum(heat_rows: np.ndarray, f: int) -> DefenseVerdict:
    """Krum over flattened heat-map rows, keeping only the single winner,
    whose upload becomes the round's global model."""
    scores = krum_scores(np.asarray(heat_rows, dtype=np.float64), f)
    winner = int(np.argsort(scores, kind="stable")[0])
    mask = np.zeros(len(scores), dtype=bool)
    mask[winner] = True
    return DefenseVerdict(mask, scores, "layercam_krum")
