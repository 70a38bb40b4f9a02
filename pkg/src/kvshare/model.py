"""Llama-style decoder (pre-RMSNorm, RoPE, GQA, SwiGLU) running on numpy.

Attention layers read and write a :class:`~kvshare.kv_cache.KvCacheSet`.
A layer that aliases another skips its K/V projection and cache write and
attends over the source layer's storage with its own queries; its output
projection and MLP run as usual.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import asdict, dataclass

import numpy as np

from .intra_compress import accumulate_scores, evict_all
from .kv_cache import CapacityError, KvCacheSet, SharingStrategy, new_cache_set
from .tensor_core import DTYPE, matmul, rms_norm, silu, softmax_rows


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_seq: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "n_kv_heads", "d_head", "d_ff", "vocab_size", "max_seq"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be a multiple of n_kv_heads")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError("d_model must equal n_heads * d_head")
        if self.d_head % 2:
            raise ConfigError("d_head must be even for rotary embeddings")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LayerWeights:
    wq: np.ndarray        # [d_model, n_heads*d_head]
    wk: np.ndarray        # [d_model, n_kv_heads*d_head]
    wv: np.ndarray        # [d_model, n_kv_heads*d_head]
    wo: np.ndarray        # [n_heads*d_head, d_model]
    w_gate: np.ndarray    # [d_model, d_ff]
    w_up: np.ndarray      # [d_model, d_ff]
    w_down: np.ndarray    # [d_ff, d_model]
    attn_norm: np.ndarray  # [d_model]
    mlp_norm: np.ndarray   # [d_model]


LAYER_TENSORS = tuple(LayerWeights.__dataclass_fields__)


@dataclass
class ModelWeights:
    tok_embeddings: np.ndarray  # [vocab, d_model]
    layers: list[LayerWeights]
    norm: np.ndarray            # [d_model]
    output: np.ndarray          # [d_model, vocab]

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        q = cfg.n_heads * cfg.d_head
        kv = cfg.n_kv_heads * cfg.d_head
        per_layer = {
            "wq": (cfg.d_model, q), "wk": (cfg.d_model, kv), "wv": (cfg.d_model, kv),
            "wo": (q, cfg.d_model), "w_gate": (cfg.d_model, cfg.d_ff),
            "w_up": (cfg.d_model, cfg.d_ff), "w_down": (cfg.d_ff, cfg.d_model),
            "attn_norm": (cfg.d_model,), "mlp_norm": (cfg.d_model,),
        }
        shapes = {"tok_embeddings": (cfg.vocab_size, cfg.d_model)}
        for i in range(cfg.n_layers):
            for name, shape in per_layer.items():
                shapes[f"layers.{i}.{name}"] = shape
        shapes["norm"] = (cfg.d_model,)
        shapes["output"] = (cfg.d_model, cfg.vocab_size)
        return shapes

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"tok_embeddings": self.tok_embeddings}
        for i, lw in enumerate(self.layers):
            for name in LAYER_TENSORS:
                out[f"layers.{i}.{name}"] = getattr(lw, name)
        out["norm"] = self.norm
        out["output"] = self.output
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], cfg: ModelConfig) -> ModelWeights:
        layers = [
            LayerWeights(**{name: tensors[f"layers.{i}.{name}"] for name in LAYER_TENSORS})
            for i in range(cfg.n_layers)
        ]
        return cls(tensors["tok_embeddings"], layers, tensors["norm"], tensors["output"])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.to_tensors().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype=DTYPE).tobytes())
        return h.hexdigest()


def init_weights(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> ModelWeights:
    """Random weights for tests; norms start at one."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in ModelWeights.expected_shapes(cfg).items():
        if len(shape) == 1:
            tensors[name] = np.ones(shape, dtype=DTYPE)
        else:
            tensors[name] = (rng.standard_normal(shape) * std).astype(DTYPE)
    return ModelWeights.from_tensors(tensors, cfg)


def rope_apply(x: np.ndarray, position_offset: int, theta: float = 10000.0) -> np.ndarray:
    """Rotate ``x`` of shape ``[heads, len, d_head]`` (half-split pairing) at absolute positions."""
    d = x.shape[-1]
    if d % 2:
        raise ConfigError(f"rotary embedding needs an even head width, got {d}")
    half = d // 2
    inv_freq = 1.0 / (theta ** (np.arange(half, dtype=np.float64) * 2.0 / d))
    pos = np.arange(position_offset, position_offset + x.shape[-2], dtype=np.float64)
    ang = np.outer(pos, inv_freq)
    cos = np.cos(ang).astype(DTYPE)
    sin = np.sin(ang).astype(DTYPE)
    x1 = x[..., :half]
    x2 = x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _split_heads(x: np.ndarray, n_heads: int, d_head: int) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(x.shape[0], n_heads, d_head).transpose(1, 0, 2))


def _attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray, past: int) -> tuple[np.ndarray, np.ndarray]:
    """Causal GQA attention of ``q`` [H, T, dh] over ``keys``/``values`` [KV, S, dh].

    The last ``T`` stored positions belong to the current chunk; ``past``
    positions precede it. Returns the context ``[T, H*dh]`` and the attention
    weights ``[H, T, S]``.
    """
    n_heads, t, dh = q.shape
    n_kv, s, _ = keys.shape
    group = n_heads // n_kv
    qg = q.reshape(n_kv, group * t, dh)
    scores = matmul(qg, keys.transpose(0, 2, 1)) * DTYPE(1.0 / math.sqrt(dh))
    scores = scores.reshape(n_kv, group, t, s)
    allowed = np.arange(s)[None, :] <= (past + np.arange(t))[:, None]
    scores = np.where(allowed, scores, DTYPE(-np.inf))
    probs = softmax_rows(scores)
    ctx = matmul(probs.reshape(n_kv, group * t, s), values)
    ctx = ctx.reshape(n_heads, t, dh).transpose(1, 0, 2).reshape(t, n_heads * dh)
    return ctx, probs.reshape(n_heads, t, s)


def _mlp(x: np.ndarray, lw: LayerWeights, eps: float) -> np.ndarray:
    h = rms_norm(x, lw.mlp_norm, eps)
    return matmul(silu(matmul(h, lw.w_gate)) * matmul(h, lw.w_up), lw.w_down)


class Transformer:
    """Inference engine over immutable weights.

    ``kv_projections[l]`` counts how many times layer ``l`` ran its K/V
    projection; layers aliased by the active strategy stay at zero.
    """

    def __init__(self, config: ModelConfig, weights: ModelWeights):
        self.config = config
        self.weights = weights
        self.kv_projections = np.zeros(config.n_layers, dtype=np.int64)
        self._counter_lock = threading.Lock()

    def new_caches(self, strategy: SharingStrategy | None = None, compressor=None) -> KvCacheSet:
        return new_cache_set(self.config, strategy, compressor)

    def _project_kv(self, layer: int, h: np.ndarray, start: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.config
        lw = self.weights.layers[layer]
        with self._counter_lock:
            self.kv_projections[layer] += 1
        k = rope_apply(_split_heads(matmul(h, lw.wk), cfg.n_kv_heads, cfg.d_head), start, cfg.rope_theta)
        v = _split_heads(matmul(h, lw.wv), cfg.n_kv_heads, cfg.d_head)
        return k, v

    def _forward(self, tokens, caches: KvCacheSet, with_logits: bool = True):
        cfg = self.config
        w = self.weights
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        t = tokens.shape[0]
        if t == 0:
            raise ValueError("empty token sequence")
        if caches.n_layers != cfg.n_layers:
            raise ValueError("cache set does not match the model's layer count")
        start = caches.position
        if start + t > cfg.max_seq:
            raise CapacityError(f"{start + t} positions exceed max_seq={cfg.max_seq}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ValueError("token id outside vocabulary")

        x = w.tok_embeddings[tokens]
        for layer, lw in enumerate(w.layers):
            h = rms_norm(x, lw.attn_norm, cfg.norm_eps)
            q = rope_apply(_split_heads(matmul(h, lw.wq), cfg.n_heads, cfg.d_head), start, cfg.rope_theta)
            if not caches.is_alias(layer):
                k, v = self._project_kv(layer, h, start)
                caches.append(layer, k, v)
            store = caches.storage(layer)
            ctx, probs = _attend(q, store.keys, store.values, store.len - t)
            if store.scores is not None:
                store.scores = accumulate_scores(store.scores, probs.sum(axis=1))
            x = x + matmul(ctx, lw.wo)
            x = x + _mlp(x, lw, cfg.norm_eps)

        hidden = rms_norm(x, w.norm, cfg.norm_eps)
        caches.position += t
        caches.note_peak()
        evict_all(caches)
        logits = matmul(hidden, w.output) if with_logits else None
        return logits, hidden

    def forward_prefill(self, tokens, caches: KvCacheSet) -> np.ndarray:
        """Run ``tokens`` through the model, filling ``caches``; returns logits ``[len, vocab]``."""
        return self._forward(tokens, caches)[0]

    def prefill_hidden(self, tokens, caches: KvCacheSet) -> np.ndarray:
        """Final-norm hidden states ``[len, d_model]`` (no output head)."""
        return self._forward(tokens, caches, with_logits=False)[1]

    def decode_step(self, token: int, caches: KvCacheSet) -> np.ndarray:
        """Consume one token; returns logits ``[vocab]``."""
        if caches.position + 1 > self.config.max_seq:
            raise CapacityError(f"cache full at {caches.position} positions")
        return self._forward([token], caches)[0][0]

    def digest(self) -> str:
        return self.weights.digest()


def reference_forward(model: Transformer, tokens, with_hidden: bool = False):
    """Full-sequence forward with private per-layer K/V and no sharing logic.

    Serves as the baseline that an empty strategy must reproduce bitwise.
    """
    cfg = model.config
    w = model.weights
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.shape[0] > cfg.max_seq:
        raise CapacityError(f"{tokens.shape[0]} positions exceed max_seq={cfg.max_seq}")
    x = w.tok_embeddings[tokens]
    for lw in w.layers:
        h = rms_norm(x, lw.attn_norm, cfg.norm_eps)
        q = rope_apply(_split_heads(matmul(h, lw.wq), cfg.n_heads, cfg.d_head), 0, cfg.rope_theta)
        k = rope_apply(_split_heads(matmul(h, lw.wk), cfg.n_kv_heads, cfg.d_head), 0, cfg.rope_theta)
        v = _split_heads(matmul(h, lw.wv), cfg.n_kv_heads, cfg.d_head)
        ctx, _ = _attend(q, k, v, 0)
        x = x + matmul(ctx, lw.wo)
        x = x + _mlp(x, lw, cfg.norm_eps)
    hidden = rms_norm(x, w.norm, cfg.norm_eps)
    logits = matmul(hidden, w.output)
    return (logits, hidden) if with_hidden else logits


def reference_generate(model: Transformer, prompt, max_new: int) -> list[int]:
    """Greedy continuation by full recomputation each step (no cache at all)."""
    seq = [int(t) for t in prompt]
    out = []
    for _ in range(max_new):
        logits = reference_forward(model, seq)[-1]
        nxt = int(np.argmax(logits))
        out.append(nxt)
        seq.append(nxt)
    return out
