"""Layer-wise KV-cache sharing for decoder-only transformer inference."""

from .intra_compress import CompressorConfig
from .kv_cache import KvCacheSet, SharingStrategy, StrategyError, kv_bytes, new_cache_set
from .model import ModelConfig, ModelWeights, Transformer, init_weights

__all__ = [
    "CompressorConfig",
    "KvCacheSet",
    "ModelConfig",
    "ModelWeights",
    "SharingStrategy",
    "StrategyError",
    "Transformer",
    "init_weights",
    "kv_bytes",
    "new_cache_set",
]
__version__ = "0.1.0"
