"""Build the shipped byte-level corpora from Project Gutenberg Shakespeare texts.

The plays come from the ``shakespeare`` sdist on PyPI (``shksprdata/texts``),
which carries already-stripped Gutenberg etexts. Train, calibration and
held-out splits use disjoint plays.

    pip download --no-deps --no-binary :all: shakespeare==0.6
    tar xzf shakespeare-0.6.tar.gz
    python scripts/prepare_corpus.py shakespeare-0.6/shksprdata/texts assets/corpus
"""

import argparse
from pathlib import Path

TRAIN = [
    "hamlet", "lear", "othello", "macbeth", "romeo_and_juliet", "julius_caesar",
    "merchant_of_venice", "as_you_like_it", "much_ado_about_nothing",
    "twelfth_night", "tempest", "richard_ii", "henry_v",
]
CALIB_A = ["coriolanus"]
CALIB_B = ["winters_tale"]
HELDOUT = ["measure_for_measure"]


def _normalize(text: str) -> str:
    lines = [line.rstrip() for line in text.replace("\r\n", "\n").split("\n")]
    out = "\n".join(lines)
    while "\n\n\n" in out:
        out = out.replace("\n\n\n", "\n\n")
    return out.strip() + "\n"


def _collect(src: Path, names: list[str]) -> str:
    parts = []
    for name in names:
        path = src / f"{name}_gut.txt"
        parts.append(_normalize(path.read_text(encoding="latin-1")))
    return "\n\n".join(parts)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("src", type=Path)
    ap.add_argument("dst", type=Path)
    args = ap.parse_args()
    args.dst.mkdir(parents=True, exist_ok=True)
    for fname, names in [("train.txt", TRAIN), ("calib_a.txt", CALIB_A),
                         ("calib_b.txt", CALIB_B), ("heldout.txt", HELDOUT)]:
        text = _collect(args.src, names)
        (args.dst / fname).write_text(text, encoding="utf-8")
        print(f"{fname}: {len(text.encode('utf-8'))} bytes from {len(names)} plays")


if __name__ == "__main__":
    main()
