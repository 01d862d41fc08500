"""Regenerate the shipped desk fixture files under src/formularank/data/desk/."""

import argparse
from pathlib import Path

from formularank.formula_ir import format_corpus_row
from formularank.synthetic import desk_fixture, training_corpus

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "formularank" / "data" / "desk"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    fx = desk_fixture()
    with open(args.out / "corpus.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(format_corpus_row(r) for r in fx.corpus)
    with open(args.out / "topics.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(format_corpus_row(r) for r in fx.topics)
    with open(args.out / "qrels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{t}\t{v}\t0\t{g}\n" for t, v, g in fx.qrels)
    with open(args.out / "visual_ids.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{f}\t{v}\n" for f, v in sorted(fx.visual_ids.items()))
    with open(args.out / "train1k.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(format_corpus_row(r) for r in training_corpus(1000, seed=0))


if __name__ == "__main__":
    main()
