"""``kvshare`` command line: search, ppl, generate, compare, bench.

Exit codes: 0 success, 1 usage or I/O error, 2 search could not reach the
requested number of shared layers (a partial strategy is still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import io
from .eval import bench, compare_orderings, generate, perplexity
from .intra_compress import CompressorConfig
from .kv_cache import SharingStrategy
from .search import DEFAULT_THRESHOLD, ORDERINGS, SearchConfig, SearchFailed, search_strategy

EXIT_OK, EXIT_USAGE, EXIT_GATE = 0, 1, 2

log = logging.getLogger("kvshare")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def rate_to_target(rate: float, n_layers: int) -> int:
    """Shared-layer count for a compression rate, rounding half up."""
    if not 0.0 <= rate < 1.0:
        raise UsageError("--rate must lie in [0, 1)")
    return int(math.floor(rate * n_layers + 0.5))


def _target(args, n_layers: int) -> int:
    if args.C is not None:
        target = args.C
    elif args.rate is not None:
        target = rate_to_target(args.rate, n_layers)
    else:
        raise UsageError("give --C or --rate")
    if not 0 <= target < n_layers:
        raise UsageError(f"target shared layers {target} must lie in [0, {n_layers})")
    return target


def _strategy(args, n_layers: int) -> SharingStrategy:
    if getattr(args, "strategy", None):
        return io.load_strategy(args.strategy, n_layers)
    return SharingStrategy()


def _compressor(args) -> CompressorConfig | None:
    cfg = CompressorConfig.from_flags(args.h2o_heavy, args.h2o_recent)
    return cfg if cfg.active else None


def cmd_search(args) -> int:
    model = io.load_model(args.model)
    n_layers = model.config.n_layers
    target = _target(args, n_layers)
    calib = io.load_calibration(args.corpus, args.rows, args.row_len, args.seed)
    cfg = SearchConfig(target, args.threshold, args.ordering, args.seed)
    t0 = time.monotonic()
    try:
        res = search_strategy(model, calib, cfg)
        strategy, sim, code = res.strategy, res.similarity, EXIT_OK
        evaluations = res.evaluations
    except SearchFailed as e:
        strategy, sim, code = e.partial, e.similarity, EXIT_GATE
        evaluations = e.evaluations
    elapsed = time.monotonic() - t0
    doc = io.save_strategy(args.out, strategy, model_hash=model.digest(), n_layers=n_layers, target=target,
                           threshold=args.threshold, ordering=args.ordering, seed=args.seed,
                           achieved_similarity=sim, complete=code == EXIT_OK)
    status = "ok" if code == EXIT_OK else "gate failure (partial strategy written)"
    print(f"{status}: pairs={doc['pairs']} similarity={sim} evaluations={evaluations} "
          f"time={elapsed:.2f}s -> {args.out}")
    return code


def cmd_ppl(args) -> int:
    model = io.load_model(args.model)
    strategy = _strategy(args, model.config.n_layers)
    compressor = _compressor(args)
    seqs = io.load_sequences(args.data, args.n_seqs, args.seq_len)
    ppl = perplexity(model, seqs, strategy, compressor)
    row = {"kind": "ppl", "strategy_id": strategy.ident(), "pairs": strategy.to_list(),
           "compressor": None if compressor is None else [compressor.heavy, compressor.recent],
           "eval_set": f"{Path(args.data).name}:{args.n_seqs}x{args.seq_len}", "ppl": ppl}
    io.write_jsonl(args.out, [row])
    return EXIT_OK


def cmd_generate(args) -> int:
    model = io.load_model(args.model)
    strategy = _strategy(args, model.config.n_layers)
    prompt = io.tokenize_bytes(args.prompt)
    tokens, report = generate(model, prompt, args.max_new, strategy, _compressor(args))
    sys.stdout.write(io.detokenize(tokens).decode("utf-8", errors="replace") + "\n")
    row = {"kind": "generate", **report.to_dict()}
    if args.out:
        io.write_jsonl(args.out, [row])
    else:
        print(json.dumps(row, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    model = io.load_model(args.model)
    target = _target(args, model.config.n_layers)
    calibs = [io.load_calibration(args.corpus, args.rows, args.row_len, s) for s in args.seeds]
    eval_set = io.load_sequences(args.eval_data, args.n_seqs, args.seq_len)
    result = compare_orderings(model, calibs, eval_set, target, args.threshold, args.seeds)
    rows = [{"kind": "compare_trial", **r} for r in result["trials"]]
    rows.append({"kind": "compare_median", "target": target, "median_ppl": result["median_ppl"]})
    io.write_jsonl(args.out, rows)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = io.load_model(args.model)
    strategy = _strategy(args, model.config.n_layers)
    if args.in_len + args.out_len > model.config.max_seq:
        raise UsageError(f"in_len + out_len exceeds max_seq={model.config.max_seq}")
    row = bench(model, strategy, args.in_len, args.out_len, _compressor(args), repeats=args.repeats,
                seed=args.seed)
    io.write_jsonl(args.out, [{"kind": "bench", **row}])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kvshare", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, strategy=True, h2o=True):
        sp.add_argument("--model", required=True, help="tensor container; config sidecar alongside")
        sp.add_argument("--seed", type=int, default=0)
        if strategy:
            sp.add_argument("--strategy", help="strategy JSON from `kvshare search` (default: no sharing)")
        if h2o:
            sp.add_argument("--h2o-heavy", type=int, default=0, help="heavy-hitter positions kept")
            sp.add_argument("--h2o-recent", type=int, default=0, help="recent positions kept (0 disables)")

    def target_flags(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--C", type=int, help="number of layers whose cache is shared")
        g.add_argument("--rate", type=float, help="compression rate; C = round_half_up(rate * L)")
        sp.add_argument("--threshold", "-T", type=float, default=DEFAULT_THRESHOLD)

    def calib_flags(sp):
        sp.add_argument("--corpus", required=True, help="calibration corpus (raw UTF-8 text)")
        sp.add_argument("--rows", type=int, default=30)
        sp.add_argument("--row-len", type=int, default=64)

    def eval_flags(sp, data_flag):
        sp.add_argument(data_flag, required=True, help="held-out corpus (raw UTF-8 text)")
        sp.add_argument("--n-seqs", type=int, default=16)
        sp.add_argument("--seq-len", type=int, default=256)

    sp = sub.add_parser("search", help="search a sharing strategy")
    common(sp, strategy=False, h2o=False)
    calib_flags(sp)
    target_flags(sp)
    sp.add_argument("--ordering", choices=ORDERINGS, default="dissimilar")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("ppl", help="held-out perplexity")
    common(sp)
    eval_flags(sp, "--data")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ppl)

    sp = sub.add_parser("generate", help="greedy generation")
    common(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--max-new", type=int, default=64)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("compare", help="dissimilar vs similar vs random sharing")
    common(sp, strategy=False, h2o=False)
    calib_flags(sp)
    target_flags(sp)
    eval_flags(sp, "--eval-data")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("bench", help="memory, prefill time and generation speed")
    common(sp)
    sp.add_argument("--in-len", type=int, default=128)
    sp.add_argument("--out-len", type=int, default=256)
    sp.add_argument("--repeats", type=int, default=3)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"kvshare {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
