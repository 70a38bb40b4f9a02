"""Greedy search for a layer-sharing strategy over a calibration set.

Layers are fingerprinted by their sentence-averaged, flattened K/V caches.
All layer pairs are ranked by the Euclidean distance between fingerprints
(most distant first by default). Walking the ranking, each pair ``(i, j)``
with ``i < j`` is tried as "layer ``j`` reuses layer ``i``'s cache". It is
kept only if the pooled final hidden state of the sharing model stays
cosine-similar to the original model's, above a threshold.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._parallel import map_ordered
from .io import CalibrationSet, InputError
from .kv_cache import SharingStrategy
from .model import Transformer
from .tensor_core import DTYPE, cosine_similarity, euclidean_distance

log = logging.getLogger(__name__)

ORDERINGS = ("dissimilar", "similar", "random")
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class SearchConfig:
    target: int
    threshold: float = DEFAULT_THRESHOLD
    ordering: str = "dissimilar"
    seed: int = 0

    def __post_init__(self):
        if self.target < 0:
            raise ValueError("target shared-layer count must be >= 0")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"ordering must be one of {ORDERINGS}")


@dataclass
class SearchResult:
    strategy: SharingStrategy
    similarity: float
    evaluations: int
    ranking: list[tuple[tuple[int, int], float]] = field(repr=False, default_factory=list)
    trace: list[dict] = field(repr=False, default_factory=list)


class SearchFailed(RuntimeError):
    """Ranking exhausted before reaching the target; carries the partial strategy."""

    def __init__(self, partial: SharingStrategy, similarity: float | None, evaluations: int,
                 trace: list[dict] | None = None):
        super().__init__(f"search stopped with {len(partial)} shared layers after {evaluations} evaluations")
        self.partial = partial
        self.similarity = similarity
        self.evaluations = evaluations
        self.trace = trace or []


def _check_equal_length(calib) -> list[list[int]]:
    seqs = [list(s) for s in calib]
    if not seqs:
        raise InputError("calibration set is empty")
    if any(len(s) != len(seqs[0]) for s in seqs):
        raise InputError("calibration sequences have different lengths")
    return seqs


def compute_fingerprints(model: Transformer, calib: CalibrationSet) -> list[np.ndarray]:
    """One flat vector per layer: sentence-mean K and V, flattened, then averaged elementwise."""
    seqs = _check_equal_length(calib)

    def run(seq):
        caches = model.new_caches()
        model.prefill_hidden(seq, caches)
        return [(c.keys.copy(), c.values.copy()) for c in caches.owners()]

    per_sentence = map_ordered(run, seqs)
    n = len(per_sentence)
    fps = []
    for layer in range(model.config.n_layers):
        k_sum = np.zeros_like(per_sentence[0][layer][0], dtype=np.float64)
        v_sum = np.zeros_like(k_sum)
        for caches in per_sentence:
            k_sum += caches[layer][0]
            v_sum += caches[layer][1]
        k_mean = (k_sum / n).reshape(-1)
        v_mean = (v_sum / n).reshape(-1)
        fps.append(((k_mean + v_mean) / 2.0).astype(DTYPE))
    return fps


def pairwise_distances(fps: list[np.ndarray]) -> dict[tuple[int, int], float]:
    return {(i, j): euclidean_distance(fps[i], fps[j])
            for i in range(len(fps)) for j in range(i + 1, len(fps))}


def rank_pairs(fps, ordering: str = "dissimilar", seed: int = 0) -> list[tuple[tuple[int, int], float]]:
    """Rank all ``i < j`` layer pairs.

    ``fps`` is either a list of fingerprints or a precomputed ``{(i, j): distance}`` map.
    Ties are broken by ``(i, j)``.
    """
    dist = fps if isinstance(fps, dict) else pairwise_distances(fps)
    entries = sorted(dist.items())
    if ordering == "dissimilar":
        return sorted(entries, key=lambda e: (-e[1], e[0]))
    if ordering == "similar":
        return sorted(entries, key=lambda e: (e[1], e[0]))
    if ordering == "random":
        perm = np.random.default_rng(seed).permutation(len(entries))
        return [entries[k] for k in perm]
    raise ValueError(f"unknown ordering {ordering!r}")


def pooled_output(model: Transformer, calib, strategy: SharingStrategy | None = None) -> np.ndarray:
    """Final-norm hidden states mean-pooled over positions, then averaged over sentences."""
    seqs = _check_equal_length(calib)

    def run(seq):
        caches = model.new_caches(strategy)
        return model.prefill_hidden(seq, caches).mean(axis=0)

    return np.stack(map_ordered(run, seqs)).mean(axis=0)


def output_similarity(model: Transformer, strategy: SharingStrategy, calib) -> float:
    base = pooled_output(model, calib)
    return cosine_similarity(base, pooled_output(model, calib, strategy))


def _skip_reason(strategy: SharingStrategy, target: int, source: int) -> str | None:
    if target == source:
        return "self"
    if target in strategy.targets:
        return "target already shared"
    if target in strategy.sources:
        return "target is a source"
    if source in strategy.targets:
        return "source is a target"
    return None


def search_strategy(model: Transformer, calib, config: SearchConfig, *,
                    ranking: list[tuple[tuple[int, int], float]] | None = None) -> SearchResult:
    """Greedy gated search; raises :class:`SearchFailed` if the ranking runs out."""
    n_layers = model.config.n_layers
    if config.target >= n_layers:
        raise ValueError(f"target {config.target} must be < n_layers ({n_layers})")
    strategy = SharingStrategy()
    if config.target == 0:
        return SearchResult(strategy, 1.0, 0, [], [])

    if ranking is None:
        ranking = rank_pairs(compute_fingerprints(model, calib), config.ordering, config.seed)
    base = pooled_output(model, calib)
    evaluations = 0
    last_sim: float | None = None
    kept_sim = 1.0
    trace: list[dict] = []
    for (i, j), dist in ranking:
        target, source = max(i, j), min(i, j)
        reason = _skip_reason(strategy, target, source)
        if reason is not None:
            trace.append({"pair": [target, source], "distance": dist, "skipped": reason})
            continue
        candidate = strategy.with_pair(target, source)
        last_sim = cosine_similarity(base, pooled_output(model, calib, candidate))
        evaluations += 1
        accepted = last_sim > config.threshold
        trace.append({"pair": [target, source], "distance": dist, "similarity": last_sim, "accepted": accepted})
        log.debug("pair %d<-%d dist=%.4f sim=%.5f %s", target, source, dist, last_sim,
                  "keep" if accepted else "drop")
        if accepted:
            strategy = candidate
            kept_sim = last_sim
            if len(strategy) == config.target:
                return SearchResult(strategy, kept_sim, evaluations, ranking, trace)
    raise SearchFailed(strategy, last_sim, evaluations, trace)


def random_strategy(n_layers: int, target: int, seed: int) -> SharingStrategy:
    """Ungated random sharing: shuffled pairs, oriented deep<-shallow, conflict rules applied."""
    if not 0 <= target < n_layers:
        raise ValueError("need 0 <= target < n_layers")
    pairs = [(i, j) for i in range(n_layers) for j in range(i + 1, n_layers)]
    rng = np.random.default_rng(seed)
    strategy = SharingStrategy()
    for k in rng.permutation(len(pairs)):
        if len(strategy) == target:
            break
        i, j = pairs[k]
        if _skip_reason(strategy, j, i) is None:
            strategy = strategy.with_pair(j, i)
    return strategy
