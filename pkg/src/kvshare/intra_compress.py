"""Heavy-hitter (H2O-style) intra-layer eviction.

Each owned cache keeps an accumulated-attention score per stored position.
When a cache grows past ``heavy + recent`` positions it is compacted to the
``recent`` newest positions plus the ``heavy`` best-scored older ones.
Aliased layers read the owner's storage, so they see every eviction and
their attention also feeds the owner's scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kv_cache import KvCacheSet, LayerKvCache
from .tensor_core import DTYPE


@dataclass(frozen=True)
class CompressorConfig:
    heavy: int = 0
    recent: int = 0
    enabled: bool = True

    def __post_init__(self):
        if self.heavy < 0:
            raise ValueError("heavy must be >= 0")
        if self.enabled and self.recent < 1:
            raise ValueError("recent must be >= 1 when the compressor is enabled")

    @property
    def active(self) -> bool:
        return self.enabled and self.recent >= 1

    @property
    def budget(self) -> int:
        return self.heavy + self.recent

    @classmethod
    def from_flags(cls, heavy: int, recent: int) -> CompressorConfig:
        """CLI mapping: ``recent == 0`` disables the compressor."""
        if recent <= 0:
            return cls(heavy=max(heavy, 0), recent=0, enabled=False)
        return cls(heavy=heavy, recent=recent, enabled=True)

    @classmethod
    def for_retention(cls, seq_len: int, fraction: float = 0.8) -> CompressorConfig:
        """Budget that keeps ``fraction`` of ``seq_len`` positions, split evenly."""
        budget = max(2, int(round(fraction * seq_len)))
        recent = max(1, budget // 2)
        return cls(heavy=budget - recent, recent=recent)


def accumulate_scores(scores: np.ndarray, attn_weights: np.ndarray) -> np.ndarray:
    """Add the attention mass each position received, summed over heads.

    ``attn_weights`` is ``[heads, len]``; returns a new score vector.
    """
    attn_weights = np.asarray(attn_weights, dtype=DTYPE)
    if attn_weights.ndim == 1:
        attn_weights = attn_weights[None, :]
    if attn_weights.shape[-1] != scores.shape[0]:
        raise ValueError(f"score length {scores.shape[0]} != attention length {attn_weights.shape[-1]}")
    return scores + attn_weights.sum(axis=0, dtype=DTYPE)


def retained_positions(scores: np.ndarray, heavy: int, recent: int) -> np.ndarray:
    """Ascending positions kept by the heavy-hitter rule (ties favour the lower index)."""
    n = scores.shape[0]
    if n <= heavy + recent:
        return np.arange(n)
    older = n - recent
    # stable sort on -score keeps lower indices first among equal scores
    order = np.argsort(-scores[:older], kind="stable")
    chosen = np.sort(order[:heavy])
    return np.concatenate([chosen, np.arange(older, n)])


def evict(cache: LayerKvCache, cfg: CompressorConfig) -> bool:
    """Compact ``cache`` in place; returns True if anything was dropped."""
    if not cfg.active or cache.scores is None or cache.len <= cfg.budget:
        return False
    cache.keep(retained_positions(cache.scores, cfg.heavy, cfg.recent))
    return True


def evict_all(caches: KvCacheSet) -> None:
    cfg = caches.compressor
    if cfg is None:
        return
    for cache in caches.owners():
        evict(cache, cfg)
