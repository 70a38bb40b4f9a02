"""Per-layer key/value storage with alias-based cross-layer sharing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor_core import DTYPE

BYTES_PER_ELEMENT = np.dtype(DTYPE).itemsize


class StrategyError(ValueError):
    """A sharing strategy violates its structural invariants."""


class CapacityError(RuntimeError):
    """A sequence or cache would exceed ``max_seq`` positions."""


class CacheLogicError(RuntimeError):
    """An operation that would desynchronize shared caches was attempted."""


@dataclass(frozen=True)
class SharingStrategy:
    """Ordered list of ``(target, source)`` pairs; layer ``target`` reuses the cache of ``source``."""

    pairs: tuple[tuple[int, int], ...] = ()

    def __init__(self, pairs: Iterable[Iterable[int]] = ()):
        object.__setattr__(self, "pairs", tuple((int(t), int(s)) for t, s in pairs))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def targets(self) -> set[int]:
        return {t for t, _ in self.pairs}

    @property
    def sources(self) -> set[int]:
        return {s for _, s in self.pairs}

    def source_of(self, layer: int) -> int | None:
        for t, s in self.pairs:
            if t == layer:
                return s
        return None

    def with_pair(self, target: int, source: int) -> SharingStrategy:
        return SharingStrategy(self.pairs + ((target, source),))

    def validate(self, n_layers: int) -> None:
        seen: set[int] = set()
        targets = self.targets
        for t, s in self.pairs:
            pair = (t, s)
            if not (0 <= s < n_layers and 0 <= t < n_layers):
                raise StrategyError(f"pair {pair} references a layer outside [0, {n_layers})")
            if t <= s:
                raise StrategyError(f"pair {pair}: target must be deeper than source")
            if t in seen:
                raise StrategyError(f"pair {pair}: layer {t} is already a target")
            if s in targets:
                raise StrategyError(f"pair {pair}: source {s} is also a target (chains are not allowed)")
            seen.add(t)

    def ident(self) -> str:
        """Short stable identifier for reports."""
        if not self.pairs:
            return "none"
        text = ",".join(f"{t}<-{s}" for t, s in self.pairs)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def to_list(self) -> list[list[int]]:
        return [[t, s] for t, s in self.pairs]


@dataclass
class LayerKvCache:
    """Keys/values of one layer, preallocated to ``max_seq`` positions.

    ``keys`` and ``values`` expose only the filled prefix. ``scores`` is the
    heavy-hitter accumulator, present only when a compressor is attached.
    """

    n_kv_heads: int
    d_head: int
    max_seq: int
    len: int = 0
    scores: np.ndarray | None = None
    _k: np.ndarray = field(init=False, repr=False)
    _v: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = (self.n_kv_heads, self.max_seq, self.d_head)
        self._k = np.zeros(shape, dtype=DTYPE)
        self._v = np.zeros(shape, dtype=DTYPE)

    @property
    def keys(self) -> np.ndarray:
        return self._k[:, : self.len]

    @property
    def values(self) -> np.ndarray:
        return self._v[:, : self.len]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        """Append ``k``/``v`` of shape ``[n_kv_heads, n, d_head]``."""
        n = k.shape[1]
        if k.shape != (self.n_kv_heads, n, self.d_head) or v.shape != k.shape:
            raise ValueError(f"bad K/V shapes {k.shape}, {v.shape}")
        if self.len + n > self.max_seq:
            raise CapacityError(f"cache holds {self.len} positions, cannot add {n} (max_seq={self.max_seq})")
        self._k[:, self.len : self.len + n] = k
        self._v[:, self.len : self.len + n] = v
        if self.scores is not None:
            self.scores = np.concatenate([self.scores, np.zeros(n, dtype=DTYPE)])
        self.len += n

    def keep(self, positions: np.ndarray) -> None:
        """Compact the cache to ``positions`` (ascending), preserving their order."""
        n = len(positions)
        self._k[:, :n] = self._k[:, positions]
        self._v[:, :n] = self._v[:, positions]
        if self.scores is not None:
            self.scores = self.scores[positions].copy()
        self.len = n

    def nbytes(self) -> int:
        return 2 * self.n_kv_heads * self.len * self.d_head * BYTES_PER_ELEMENT


class KvCacheSet:
    """One slot per layer: an owned :class:`LayerKvCache` or the index of the layer it aliases.

    ``position`` counts tokens consumed so far, which may exceed a cache's
    ``len`` once eviction is active.
    """

    def __init__(self, n_layers: int, n_kv_heads: int, d_head: int, max_seq: int,
                 strategy: SharingStrategy | None = None, compressor=None):
        strategy = strategy if strategy is not None else SharingStrategy()
        strategy.validate(n_layers)
        self.strategy = strategy
        self.compressor = compressor if compressor is not None and compressor.active else None
        self.max_seq = max_seq
        self.position = 0
        self.peak_bytes = 0
        self.slots: list[LayerKvCache | int] = []
        for layer in range(n_layers):
            src = strategy.source_of(layer)
            if src is None:
                cache = LayerKvCache(n_kv_heads, d_head, max_seq)
                if self.compressor is not None:
                    cache.scores = np.zeros(0, dtype=DTYPE)
                self.slots.append(cache)
            else:
                self.slots.append(src)

    @property
    def n_layers(self) -> int:
        return len(self.slots)

    def is_alias(self, layer: int) -> bool:
        return isinstance(self.slots[layer], int)

    def owner_of(self, layer: int) -> int:
        slot = self.slots[layer]
        return slot if isinstance(slot, int) else layer

    def storage(self, layer: int) -> LayerKvCache:
        """The cache read by ``layer`` (the owner's storage for aliases)."""
        return self.slots[self.owner_of(layer)]

    def owners(self) -> list[LayerKvCache]:
        return [s for s in self.slots if not isinstance(s, int)]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.is_alias(layer):
            raise CacheLogicError(f"layer {layer} aliases layer {self.slots[layer]} and cannot be written")
        self.slots[layer].append(k, v)

    def kv_bytes(self) -> int:
        return sum(c.nbytes() for c in self.owners())

    def note_peak(self) -> None:
        self.peak_bytes = max(self.peak_bytes, self.kv_bytes())

    def lengths(self) -> list[int]:
        """Stored positions per layer; aliases report 0 since they own nothing."""
        return [0 if isinstance(s, int) else s.len for s in self.slots]


def new_cache_set(config, strategy: SharingStrategy | None = None, compressor=None) -> KvCacheSet:
    return KvCacheSet(config.n_layers, config.n_kv_heads, config.d_head, config.max_seq,
                      strategy, compressor)


def kv_bytes(caches: KvCacheSet) -> int:
    return caches.kv_bytes()
