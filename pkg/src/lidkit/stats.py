"""Zeroth- and first-order Baum-Welch statistics against any posterior source.

A posterior source is anything exposing ``num_classes`` and
``predict_proba(feats)``: the tandem GMM-UBM and the time-delay network both
qualify.  The source may consume a different feature stream than the one the
statistics are accumulated over.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence, Tuple

import numpy as np

from ._validation import as_frames, check_posteriors
from .corpusio import ModelContainer

logger = logging.getLogger(__name__)

PRUNE_THRESHOLD = 1e-5


class PosteriorSource(Protocol):
    num_classes: int

    def predict_proba(self, X) -> np.ndarray: ...


@dataclass
class SuffStats:
    """Occupancies ``n`` (M,) and first-order sums ``f`` (M, D).

    When ``centered`` is true, ``f`` holds sums of ``y_t - mu_c``.
    """

    n: np.ndarray
    f: np.ndarray
    centered: bool = False

    @property
    def num_classes(self) -> int:
        return self.f.shape[0]

    @property
    def dim(self) -> int:
        return self.f.shape[1]

    @classmethod
    def zeros(cls, num_classes: int, dim: int, centered: bool = False) -> "SuffStats":
        return cls(np.zeros(num_classes), np.zeros((num_classes, dim)), centered)

    def center(self, means) -> "SuffStats":
        if self.centered:
            raise ValueError("statistics are already centered")
        means = np.asarray(means, dtype=np.float64)
        if means.shape != self.f.shape:
            raise ValueError(f"means shape {means.shape} != stats shape {self.f.shape}")
        return SuffStats(self.n.copy(), self.f - self.n[:, None] * means, True)


def prune_posteriors(post: np.ndarray, threshold: float = PRUNE_THRESHOLD) -> np.ndarray:
    """Zero entries below ``threshold`` and renormalise each row."""
    post = np.where(post < threshold, 0.0, post)
    total = post.sum(axis=1, keepdims=True)
    empty = total[:, 0] == 0
    if empty.any():
        raise ValueError(f"frame {int(np.argmax(empty))} has no posterior above {threshold}")
    return post / total


def accumulate_stats(post, feats, mask=None, means=None) -> SuffStats:
    """Sum posteriors and posterior-weighted frames over speech frames.

    ``mask`` selects frames (``None`` keeps all); with ``means`` the first
    order statistics are centered around them.
    """
    feats = as_frames(feats, name="feats")
    post = np.asarray(post, dtype=np.float64)
    if post.ndim != 2 or post.shape[0] != feats.shape[0]:
        raise ValueError(
            f"posterior rows {post.shape[0] if post.ndim == 2 else post.shape} "
            f"!= feature rows {feats.shape[0]}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (feats.shape[0],):
            raise ValueError(f"mask length {mask.size} != feature rows {feats.shape[0]}")
        post, feats = post[mask], feats[mask]
    check_posteriors(post)
    stats = SuffStats(post.sum(axis=0), post.T @ feats, False)
    if means is not None:
        stats = stats.center(means)
    return stats


def merge_stats(a: SuffStats, b: SuffStats) -> SuffStats:
    if a.f.shape != b.f.shape:
        raise ValueError(f"shape mismatch {a.f.shape} vs {b.f.shape}")
    if a.centered != b.centered:
        raise ValueError("cannot merge centered with uncentered statistics")
    return SuffStats(a.n + b.n, a.f + b.f, a.centered)


def reduce_stats(stats: Sequence[SuffStats]) -> SuffStats:
    """Merge in the given (utterance-index) order."""
    if not stats:
        raise ValueError("nothing to reduce")
    out = stats[0]
    for s in stats[1:]:
        out = merge_stats(out, s)
    return out


def align_streams(post: np.ndarray, mask: np.ndarray, utt_id: str = "") -> Tuple[np.ndarray, np.ndarray]:
    """Truncate posterior rows and mask to a common frame count.

    The 25 ms and 20 ms front-ends disagree by at most one frame; anything
    larger means the streams came from different audio.
    """
    n = min(post.shape[0], mask.shape[0])
    diff = abs(post.shape[0] - mask.shape[0])
    if diff > 1:
        raise ValueError(
            f"{utt_id}: feature streams misaligned ({post.shape[0]} vs {mask.shape[0]} frames)")
    if diff:
        logger.debug("%s: truncating streams to %d frames", utt_id, n)
    return post[:n], mask[:n]


def utterance_stats(source: PosteriorSource, source_feats, stats_feats, mask=None,
                    means=None, prune: Optional[float] = PRUNE_THRESHOLD,
                    speech_only_feats: bool = False, utt_id: str = "") -> SuffStats:
    """Posteriors from ``source`` on ``source_feats``, stats on ``stats_feats``.

    With ``speech_only_feats`` the statistics stream already holds only the
    mask-true frames (the SDC path filters before CMN), so posteriors are
    filtered by ``mask`` and paired row by row.
    """
    post = source.predict_proba(source_feats)
    if prune:
        post = prune_posteriors(post, prune)
    stats_feats = np.asarray(stats_feats, dtype=np.float64)
    if mask is None:
        if post.shape[0] != stats_feats.shape[0]:
            raise ValueError(
                f"{utt_id}: posterior rows {post.shape[0]} != feature rows {stats_feats.shape[0]}")
        return accumulate_stats(post, stats_feats, None, means)
    mask = np.asarray(mask, dtype=bool)
    post, mask = align_streams(post, mask, utt_id)
    if not speech_only_feats:
        return accumulate_stats(post, stats_feats[:len(mask)], mask, means)
    post = post[mask]
    if post.shape[0] > stats_feats.shape[0]:
        raise ValueError(f"{utt_id}: more speech posteriors than speech feature rows")
    return accumulate_stats(post, stats_feats[:post.shape[0]], None, means)


def stats_to_container(utt_ids: Iterable[str], stats: Sequence[SuffStats]) -> ModelContainer:
    ids = list(utt_ids)
    c = ModelContainer({"type": "SuffStatsSet", "utt_ids": ids,
                        "centered": bool(stats[0].centered) if stats else False})
    c["n"] = np.array([s.n for s in stats]) if stats else np.zeros((0, 0))
    c["f"] = np.array([s.f for s in stats]) if stats else np.zeros((0, 0, 0))
    return c


def stats_from_container(c: ModelContainer):
    centered = bool(c.metadata.get("centered", False))
    stats = [SuffStats(n, f, centered) for n, f in zip(c["n"], c["f"])]
    return list(c.metadata["utt_ids"]), stats
