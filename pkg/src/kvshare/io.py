"""Files in and out: tensor container, byte tokenizer, corpora, strategies, reports.

Container layout: an 8-byte little-endian header length, a UTF-8 JSON header
mapping tensor name to ``{"dtype": "f32", "shape": [...], "offset": o,
"length": n}`` (offsets relative to the body start), then the raw
little-endian float32 body. Model hyperparameters live in a JSON sidecar
next to the container (``model.bin`` -> ``model.json``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .kv_cache import SharingStrategy
from .model import ModelConfig, ModelWeights, Transformer

BOS = 256
EOS = 257
VOCAB_SIZE = 258
_LE_F32 = np.dtype("<f4")


class LoadError(ValueError):
    """Malformed or inconsistent model container."""


class InputError(ValueError):
    """Unusable corpus or token data."""


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


# -- tensor container -----------------------------------------------------

def write_container(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    header = {}
    offset = 0
    blobs = []
    for name, t in tensors.items():
        data = np.ascontiguousarray(t, dtype=_LE_F32).tobytes()
        header[name] = {"dtype": "f32", "shape": list(t.shape), "offset": offset, "length": len(data)}
        blobs.append(data)
        offset += len(data)
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for b in blobs:
            f.write(b)


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise LoadError(f"{path}: file too short for header length prefix")
    (hlen,) = struct.unpack("<Q", buf[:8])
    if 8 + hlen > len(buf):
        raise LoadError(f"{path}: header length {hlen} exceeds file size")
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise LoadError(f"{path}: corrupt header ({e})") from None
    if not isinstance(header, dict):
        raise LoadError(f"{path}: header is not a JSON object")
    body = memoryview(buf)[8 + hlen :]

    spans = []
    tensors = {}
    for name, meta in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype, shape = meta["dtype"], [int(s) for s in meta["shape"]]
            offset, length = int(meta["offset"]), int(meta["length"])
        except (KeyError, TypeError, ValueError):
            raise LoadError(f"tensor {name!r}: incomplete header entry") from None
        if dtype != "f32":
            raise LoadError(f"tensor {name!r}: dtype {dtype!r} is not f32")
        if any(s < 1 for s in shape):
            raise LoadError(f"tensor {name!r}: non-positive extent in {shape}")
        if length != int(np.prod(shape)) * 4:
            raise LoadError(f"tensor {name!r}: length {length} does not match shape {shape}")
        if offset < 0 or offset + length > len(body):
            raise LoadError(f"tensor {name!r}: bytes [{offset}, {offset + length}) out of bounds "
                            f"(body has {len(body)} bytes)")
        spans.append((offset, offset + length, name))
        tensors[name] = np.frombuffer(body[offset : offset + length], dtype=_LE_F32).astype(np.float32).reshape(shape)
    spans.sort()
    for (_, end_a, a), (start_b, _, b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise LoadError(f"tensors {a!r} and {b!r} overlap")
    return tensors


def save_weights(path: str | Path, config: ModelConfig, weights: ModelWeights) -> None:
    write_container(path, weights.to_tensors())
    sidecar_path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


def load_weights(path: str | Path) -> tuple[ModelWeights, ModelConfig]:
    side = sidecar_path(path)
    if not side.exists():
        raise LoadError(f"config sidecar {side} not found")
    config = ModelConfig.from_dict(json.loads(side.read_text()))
    tensors = read_container(path)
    expected = ModelWeights.expected_shapes(config)
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise LoadError(f"tensor set mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise LoadError(f"tensor {name!r}: shape {tensors[name].shape} != expected {shape}")
    return ModelWeights.from_tensors(tensors, config), config


def load_model(path: str | Path) -> Transformer:
    weights, config = load_weights(path)
    return Transformer(config, weights)


# -- byte tokenizer ---------------------------------------------------------

def tokenize_bytes(data: bytes | str) -> list[int]:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return [BOS, *data]


def detokenize(tokens: Iterable[int]) -> bytes:
    return bytes(t for t in tokens if 0 <= t < 256)


# -- corpora ------------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationSet:
    sequences: tuple[tuple[int, ...], ...]
    source: str = ""

    def __post_init__(self):
        if not self.sequences:
            raise InputError("calibration set is empty")
        n = len(self.sequences[0])
        if any(len(s) != n for s in self.sequences):
            raise InputError("calibration rows must all have the same length")

    @property
    def row_len(self) -> int:
        return len(self.sequences[0])

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)


def _corpus_bytes(path: str | Path) -> bytes:
    return Path(path).read_bytes()


def load_calibration(path: str | Path, rows: int = 30, row_len: int = 64, seed: int = 0) -> CalibrationSet:
    """Sample ``rows`` non-overlapping windows of the corpus, each ``[BOS] + (row_len-1) bytes``."""
    if rows < 1 or row_len < 2:
        raise InputError("need rows >= 1 and row_len >= 2")
    data = _corpus_bytes(path)
    span = row_len - 1
    n_slots = len(data) // span
    if n_slots < rows:
        raise InputError(f"{path}: {len(data)} bytes cannot supply {rows} windows of {row_len} tokens")
    rng = np.random.default_rng(seed)
    slots = rng.choice(n_slots, size=rows, replace=False)
    seqs = tuple(tuple([BOS, *data[s * span : (s + 1) * span]]) for s in slots)
    return CalibrationSet(seqs, source=f"{Path(path).name}:seed={seed}")


def load_sequences(path: str | Path, n_seqs: int, seq_len: int) -> list[list[int]]:
    """Consecutive evaluation windows from the start of the corpus, each ``[BOS] + bytes``."""
    if n_seqs < 1 or seq_len < 2:
        raise InputError("need n_seqs >= 1 and seq_len >= 2")
    data = _corpus_bytes(path)
    span = seq_len - 1
    if len(data) < n_seqs * span:
        raise InputError(f"{path}: too small for {n_seqs} sequences of {seq_len} tokens")
    return [[BOS, *data[i * span : (i + 1) * span]] for i in range(n_seqs)]


# -- strategies & reports -----------------------------------------------------

def save_strategy(path: str | Path, strategy: SharingStrategy, *, model_hash: str, n_layers: int,
                  target: int, threshold: float, ordering: str, seed: int,
                  achieved_similarity: float | None, fingerprint_combine: str = "mean",
                  complete: bool = True) -> dict:
    doc = {
        "model_hash": model_hash,
        "L": n_layers,
        "C": target,
        "T": threshold,
        "ordering": ordering,
        "seed": seed,
        "pairs": strategy.to_list(),
        "fingerprint_combine": fingerprint_combine,
        "achieved_similarity": achieved_similarity,
        "complete": complete,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return doc


def load_strategy(path: str | Path, n_layers: int | None = None) -> SharingStrategy:
    doc = json.loads(Path(path).read_text())
    strategy = SharingStrategy(doc["pairs"])
    strategy.validate(n_layers if n_layers is not None else int(doc["L"]))
    return strategy


def write_jsonl(path: str | Path | None, rows: Sequence[dict], append: bool = False) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if path is None:
        print(text, end="")
        return
    with open(path, "a" if append else "w") as f:
        f.write(text)
