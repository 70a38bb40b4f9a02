"""Train the shipped toy byte-level checkpoint on CPU with torch.

The torch module mirrors ``kvshare.model`` exactly (pre-RMSNorm, half-split
RoPE, GQA, SwiGLU, untied output head) and exports weights in the engine's
``x @ W`` layout through ``kvshare.io.save_weights``.

    python scripts/train_toy.py --out assets/toy/model.bin
"""

import argparse
import math
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from kvshare.io import BOS, VOCAB_SIZE, save_weights
from kvshare.model import ModelConfig, ModelWeights


class RMSNorm(nn.Module):
    def __init__(self, dim, eps):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x / torch.sqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope(x, theta):
    # x: [B, H, T, D]
    d = x.shape[-1]
    half = d // 2
    inv_freq = 1.0 / (theta ** (torch.arange(half, dtype=torch.float64) * 2.0 / d))
    ang = torch.outer(torch.arange(x.shape[-2], dtype=torch.float64), inv_freq)
    cos, sin = ang.cos().to(x.dtype), ang.sin().to(x.dtype)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        q, kv = cfg.n_heads * cfg.d_head, cfg.n_kv_heads * cfg.d_head
        self.wq = nn.Linear(cfg.d_model, q, bias=False)
        self.wk = nn.Linear(cfg.d_model, kv, bias=False)
        self.wv = nn.Linear(cfg.d_model, kv, bias=False)
        self.wo = nn.Linear(q, cfg.d_model, bias=False)
        self.w_gate = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.w_up = nn.Linear(cfg.d_model, cfg.d_ff, bias=False)
        self.w_down = nn.Linear(cfg.d_ff, cfg.d_model, bias=False)
        self.attn_norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.mlp_norm = RMSNorm(cfg.d_model, cfg.norm_eps)

    def forward(self, x):
        cfg = self.cfg
        b, t, _ = x.shape
        h = self.attn_norm(x)
        q = self.wq(h).view(b, t, cfg.n_heads, cfg.d_head).transpose(1, 2)
        k = self.wk(h).view(b, t, cfg.n_kv_heads, cfg.d_head).transpose(1, 2)
        v = self.wv(h).view(b, t, cfg.n_kv_heads, cfg.d_head).transpose(1, 2)
        q, k = rope(q, cfg.rope_theta), rope(k, cfg.rope_theta)
        group = cfg.n_heads // cfg.n_kv_heads
        k = k.repeat_interleave(group, dim=1)
        v = v.repeat_interleave(group, dim=1)
        att = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        x = x + self.wo(att.transpose(1, 2).reshape(b, t, -1))
        h = self.mlp_norm(x)
        return x + self.w_down(F.silu(self.w_gate(h)) * self.w_up(h))


class TorchLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embeddings = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_model, cfg.norm_eps)
        self.output = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        for name, p in self.named_parameters():
            if p.dim() == 2:
                nn.init.normal_(p, std=0.02)
            if name.endswith(("wo.weight", "w_down.weight")):
                nn.init.normal_(p, std=0.02 / math.sqrt(2 * cfg.n_layers))

    def forward(self, idx):
        x = self.tok_embeddings(idx)
        for blk in self.layers:
            x = blk(x)
        return self.output(self.norm(x))

    def export(self) -> ModelWeights:
        t = {"tok_embeddings": self.tok_embeddings.weight, "norm": self.norm.weight,
             "output": self.output.weight.T}
        for i, blk in enumerate(self.layers):
            for name in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"):
                t[f"layers.{i}.{name}"] = getattr(blk, name).weight.T
            t[f"layers.{i}.attn_norm"] = blk.attn_norm.weight
            t[f"layers.{i}.mlp_norm"] = blk.mlp_norm.weight
        arrays = {k: np.ascontiguousarray(v.detach().cpu().numpy(), dtype=np.float32) for k, v in t.items()}
        return ModelWeights.from_tensors(arrays, self.cfg)


def toy_config() -> ModelConfig:
    return ModelConfig(n_layers=8, d_model=128, n_heads=4, n_kv_heads=2, d_head=32, d_ff=384,
                       vocab_size=VOCAB_SIZE, max_seq=512)


def batches(data: np.ndarray, seq_len: int, batch: int, rng: np.random.Generator):
    span = seq_len - 1
    while True:
        starts = rng.integers(0, len(data) - span - 1, size=batch)
        x = np.stack([data[s : s + span + 1] for s in starts]).astype(np.int64)
        x = np.concatenate([np.full((batch, 1), BOS, dtype=np.int64), x], axis=1)
        yield torch.from_numpy(x[:, :-1]), torch.from_numpy(x[:, 1:])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--corpus", default="assets/corpus/train.txt")
    ap.add_argument("--out", default="assets/toy/model.bin")
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--seq-len", type=int, default=256)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    torch.set_num_threads(args.threads)
    cfg = toy_config()
    model = TorchLM(cfg)
    data = np.frombuffer(Path(args.corpus).read_bytes(), dtype=np.uint8)
    rng = np.random.default_rng(args.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=args.lr, betas=(0.9, 0.95), weight_decay=0.1)
    warmup = max(1, min(100, args.steps // 10))
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / warmup) * 0.5 * (1 + math.cos(math.pi * min(s, args.steps) / args.steps)))

    t0 = time.monotonic()
    it = batches(data, args.seq_len, args.batch, rng)
    for step in range(args.steps):
        x, y = next(it)
        loss = F.cross_entropy(model(x).reshape(-1, cfg.vocab_size), y.reshape(-1))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % 50 == 0 or step == args.steps - 1:
            print(f"step {step:5d} loss {loss.item():.4f} ppl {math.exp(loss.item()):.2f} "
                  f"{time.monotonic() - t0:.0f}s", flush=True)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(out, cfg, model.export())
    print(f"saved {out} after {time.monotonic() - t0:.0f}s")


if __name__ == "__main__":
    main()
