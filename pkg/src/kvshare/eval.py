"""Perplexity, greedy generation, throughput benchmarks and ordering ablations."""

from __future__ import annotations

import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from ._parallel import map_ordered
from .intra_compress import CompressorConfig
from .io import BOS, InputError
from .kv_cache import CapacityError, KvCacheSet, SharingStrategy
from .model import Transformer
from .search import (SearchConfig, SearchFailed, compute_fingerprints, pairwise_distances,
                     rank_pairs, random_strategy, search_strategy)

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    ppl: float | None = None
    kv_bytes_peak: int = 0
    tokens_per_second: float | None = None
    prefill_seconds: float | None = None
    candidate_similarity: float | None = None
    strategy_id: str = "none"
    n_tokens: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def sequence_nll(model: Transformer, seq: Sequence[int], strategy: SharingStrategy | None = None,
                 compressor: CompressorConfig | None = None,
                 observer: Callable[[KvCacheSet], None] | None = None) -> tuple[float, int]:
    """Summed next-token negative log-likelihood (nats) and the number of predictions.

    Without an active compressor this is one teacher-forced prefill. With one,
    the sequence is replayed token by token so eviction acts between steps;
    ``observer`` then sees the cache set after every step.
    """
    seq = [int(t) for t in seq]
    if len(seq) < 2:
        raise InputError("sequences need at least 2 tokens")
    caches = model.new_caches(strategy, compressor)
    if caches.compressor is None:
        logits = model.forward_prefill(seq[:-1], caches)
        if observer is not None:
            observer(caches)
    else:
        rows = []
        for tok in seq[:-1]:
            rows.append(model.decode_step(tok, caches))
            if observer is not None:
                observer(caches)
        logits = np.stack(rows)
    lp = _log_softmax(logits)
    targets = np.asarray(seq[1:])
    return float(-lp[np.arange(len(targets)), targets].sum()), len(targets)


def perplexity(model: Transformer, sequences: Sequence[Sequence[int]], strategy: SharingStrategy | None = None,
               compressor: CompressorConfig | None = None,
               observer: Callable[[KvCacheSet], None] | None = None) -> float:
    """Token-pooled natural-log perplexity over all next-token predictions."""
    if not sequences:
        raise InputError("no sequences to evaluate")
    parts = map_ordered(lambda s: sequence_nll(model, s, strategy, compressor, observer), sequences)
    total = math.fsum(p[0] for p in parts)
    count = sum(p[1] for p in parts)
    return math.exp(total / count)


def generate(model: Transformer, prompt: Sequence[int], max_new: int,
             strategy: SharingStrategy | None = None,
             compressor: CompressorConfig | None = None) -> tuple[list[int], EvalReport]:
    """Greedy decoding (argmax, ties to the lowest id). Prefill and generation are timed apart."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("prompt must be non-empty")
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    if len(prompt) + max_new > model.config.max_seq:
        raise CapacityError(f"prompt ({len(prompt)}) + max_new ({max_new}) exceeds max_seq={model.config.max_seq}")
    strategy = strategy if strategy is not None else SharingStrategy()
    caches = model.new_caches(strategy, compressor)

    t0 = time.perf_counter()
    logits = model.forward_prefill(prompt, caches)[-1]
    t1 = time.perf_counter()
    out: list[int] = []
    for step in range(max_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        if step + 1 < max_new:
            logits = model.decode_step(nxt, caches)
    t2 = time.perf_counter()

    gen_time = t2 - t1
    report = EvalReport(
        kv_bytes_peak=caches.peak_bytes,
        tokens_per_second=(max_new / gen_time) if max_new and gen_time > 0 else 0.0,
        prefill_seconds=t1 - t0,
        strategy_id=strategy.ident(),
        n_tokens=max_new,
    )
    return out, report


def bench_prompt(length: int, seed: int = 0) -> list[int]:
    rng = np.random.default_rng(seed)
    return [BOS, *rng.integers(32, 127, size=max(0, length - 1)).tolist()]


def bench(model: Transformer, strategy: SharingStrategy, in_len: int, out_len: int,
          compressor: CompressorConfig | None = None, repeats: int = 3, seed: int = 0) -> dict:
    """Memory / prefill time / generation speed of ``strategy`` against the full cache.

    Baseline and candidate runs are interleaved after one discarded warm-up
    pair; each figure is the median of ``repeats`` runs.
    """
    if in_len < 1 or out_len < 0 or repeats < 1:
        raise ValueError("need in_len >= 1, out_len >= 0 and repeats >= 1")
    prompt = bench_prompt(in_len, seed)
    empty = SharingStrategy()
    same = len(strategy) == 0 and compressor is None
    generate(model, prompt, out_len, empty)
    if not same:
        generate(model, prompt, out_len, strategy, compressor)
    base_runs, cand_runs = [], []
    for _ in range(repeats):
        base_runs.append(generate(model, prompt, out_len, empty)[1])
        if not same:
            cand_runs.append(generate(model, prompt, out_len, strategy, compressor)[1])
    if same:
        cand_runs = base_runs

    def summary(runs: list[EvalReport]) -> dict:
        return {
            "kv_bytes": runs[0].kv_bytes_peak,
            "prefill_s": statistics.median(r.prefill_seconds for r in runs),
            "gen_tok_s": statistics.median(r.tokens_per_second for r in runs),
        }

    base, cand = summary(base_runs), summary(cand_runs)

    def ratio(a, b):
        return a / b if b else float("nan")

    return {
        "seq": f"{in_len}+{out_len}",
        "strategy_id": strategy.ident(),
        "shared_layers": len(strategy),
        "n_layers": model.config.n_layers,
        "compressor": None if compressor is None else asdict(compressor),
        "baseline": base,
        "candidate": cand,
        "kv_ratio": ratio(cand["kv_bytes"], base["kv_bytes"]),
        "prefill_ratio": ratio(cand["prefill_s"], base["prefill_s"]),
        "gen_speedup": ratio(cand["gen_tok_s"], base["gen_tok_s"]),
    }


def compare_orderings(model: Transformer, calibs, eval_set: Sequence[Sequence[int]], target: int,
                      threshold: float, seeds: Sequence[int]) -> dict:
    """Search with dissimilar and similar rankings, plus ungated random sharing, per seed.

    ``calibs`` is one calibration set shared by every seed or one per seed.
    Returns per-trial rows and the median held-out perplexity per ordering.
    """
    if target >= model.config.n_layers:
        raise ValueError("target must be < n_layers")
    if not isinstance(calibs, (list, tuple)):
        calibs = [calibs] * len(seeds)
    if len(calibs) != len(seeds):
        raise ValueError("need one calibration set per seed")

    ppl_cache: dict[tuple, float] = {}

    def ppl_of(strategy: SharingStrategy) -> float:
        if strategy.pairs not in ppl_cache:
            ppl_cache[strategy.pairs] = perplexity(model, eval_set, strategy)
        return ppl_cache[strategy.pairs]

    rows = []
    for seed, calib in zip(seeds, calibs):
        dist = pairwise_distances(compute_fingerprints(model, calib)) if target else {}
        for ordering in ("dissimilar", "similar"):
            cfg = SearchConfig(target, threshold, ordering, seed)
            try:
                res = search_strategy(model, calib, cfg, ranking=rank_pairs(dist, ordering, seed))
                strategy, sim, failed = res.strategy, res.similarity, False
            except SearchFailed as e:
                strategy, sim, failed = e.partial, e.similarity, True
            rows.append({"seed": seed, "ordering": ordering, "pairs": strategy.to_list(),
                         "similarity": sim, "failed": failed, "ppl": ppl_of(strategy)})
        strategy = random_strategy(model.config.n_layers, target, seed)
        rows.append({"seed": seed, "ordering": "random", "pairs": strategy.to_list(),
                     "similarity": None, "failed": len(strategy) != target, "ppl": ppl_of(strategy)})
        log.info("seed %d: %s", seed, {r["ordering"]: round(r["ppl"], 3) for r in rows[-3:]})

    medians = {o: statistics.median(r["ppl"] for r in rows if r["ordering"] == o)
               for o in ("dissimilar", "similar", "random")}
    return {"target": target, "threshold": threshold, "seeds": list(seeds), "trials": rows, "median_ppl": medians}
