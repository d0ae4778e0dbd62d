"""Ground-truth rollout similarity and its quantization into bin targets.

Two rollouts of the same scene are compared object by object: per object
and frame we take the Euclidean distance between the object's positions in
the two rollouts, clip at ``alpha``, map to a similarity in [0, 1], and
average over all objects and the compared frame window.  Frames are
compared over the first T = min(len_a, len_b) recorded frames; the window
option restricts that range to the first n or last n of those T frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .physics import Rollout

DEFAULT_ALPHA = math.sqrt(2.0)  # max distance between points in the unit square


@dataclass(frozen=True)
class SimilarityConfig:
    alpha: float = DEFAULT_ALPHA
    bins: int = 20
    window: str = "entire"  # "entire" | "first:N" | "last:N"

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.bins < 2:
            raise ValueError("need at least 2 bins")
        parse_window(self.window)  # raises on malformed spec


@dataclass(frozen=True)
class SimilarityTarget:
    v: float
    bin: int


def parse_window(window: str):
    """Return (kind, n) where kind is 'entire', 'first' or 'last'."""
    if window == "entire":
        return ("entire", 0)
    for kind in ("first", "last"):
        if window.startswith(kind + ":"):
            n = int(window.split(":", 1)[1])
            if n < 1:
                raise ValueError("window frame count must be >= 1")
            return (kind, n)
    raise ValueError(f"bad window spec {window!r} (entire | first:N | last:N)")


def window_range(t: int, window: str):
    """Half-open frame index range [lo, hi) selected by ``window`` out of
    the first ``t`` shared frames."""
    kind, n = parse_window(window)
    if kind == "entire":
        return 0, t
    if kind == "first":
        return 0, min(n, t)
    return max(t - n, 0), t


def bin_index(v: float, bins: int) -> int:
    """Quantize v in [0, 1] to round(v * (bins - 1)), ties away from zero."""
    return int(math.floor(v * (bins - 1) + 0.5))


def object_distance(roll_a: Rollout, roll_b: Rollout, obj: int, frame: int) -> float:
    """Euclidean distance between one object's positions at one frame."""
    if roll_a.n_objects != roll_b.n_objects:
        raise ValueError(
            f"object sets differ: {roll_a.n_objects} vs {roll_b.n_objects}")
    if not 0 <= obj < roll_a.n_objects:
        raise IndexError(f"object {obj} out of range")
    if frame >= roll_a.length or frame >= roll_b.length or frame < 0:
        raise IndexError(f"frame {frame} not covered by both rollouts")
    d = roll_a.frames[frame, obj].astype(np.float64) - roll_b.frames[frame, obj]
    return float(np.hypot(d[0], d[1]))


def similarity(roll_a: Rollout, roll_b: Rollout,
               cfg: SimilarityConfig | None = None) -> SimilarityTarget:
    """Clipped-distance similarity of two rollouts, plus its bin."""
    cfg = cfg or SimilarityConfig()
    if roll_a.n_objects != roll_b.n_objects:
        raise ValueError(
            f"object sets differ: {roll_a.n_objects} vs {roll_b.n_objects}")
    if roll_a.n_objects == 0:
        raise ValueError("empty object set")
    t = min(roll_a.length, roll_b.length)
    lo, hi = window_range(t, cfg.window)
    fa = roll_a.frames[lo:hi].astype(np.float64)
    fb = roll_b.frames[lo:hi].astype(np.float64)
    d = np.sqrt(((fa - fb) ** 2).sum(axis=2))
    q = 1.0 - np.minimum(d, cfg.alpha) / cfg.alpha
    v = float(q.sum(dtype=np.float64) / q.size)
    return SimilarityTarget(v, bin_index(v, cfg.bins))


@dataclass(frozen=True)
class PairTargets:
    """All-pairs similarity targets for one task's action set."""

    v: np.ndarray     # (M, M) float64
    bins: np.ndarray  # (M, M) int64

    def target(self, i: int, j: int) -> SimilarityTarget:
        return SimilarityTarget(float(self.v[i, j]), int(self.bins[i, j]))


def pair_matrix(task, actions, rollouts, cfg: SimilarityConfig | None = None) -> PairTargets:
    """Similarity targets for every ordered pair of the task's rollouts.

    The matrix is symmetric with unit diagonal; it is built from the upper
    triangle and mirrored, which matches pairwise :func:`similarity` calls
    exactly because the metric is symmetric in its arguments.
    """
    cfg = cfg or SimilarityConfig()
    if len(actions) != len(rollouts):
        raise ValueError(
            f"{len(actions)} actions but {len(rollouts)} rollouts")
    m = len(rollouts)
    v = np.ones((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            v[i, j] = v[j, i] = similarity(rollouts[i], rollouts[j], cfg).v
    bins = np.floor(v * (cfg.bins - 1) + 0.5).astype(np.int64)
    return PairTargets(v, bins)
