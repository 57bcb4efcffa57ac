"""Write a planted train/test corpus in the blank-line document format.

    python3 scripts/make_planted_corpus.py --out data/planted --docs 200 --test-docs 50
"""
import argparse
from pathlib import Path

import numpy as np

from rgbnrnn.corpus import write_raw_documents
from rgbnrnn.synthetic import planted_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--docs", type=int, default=200)
    ap.add_argument("--test-docs", type=int, default=50)
    ap.add_argument("--sentences", type=int, default=6)
    ap.add_argument("--sentence-len", type=int, default=8)
    ap.add_argument("--topics", default="6-3", help="topics per layer, bottom first")
    ap.add_argument("--persistence", type=float, default=0.97)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    K = tuple(int(k) for k in a.topics.split("-"))
    train, test, params = planted_corpus(a.docs, a.test_docs, J=a.sentences, sent_len=a.sentence_len,
                                         seed=a.seed, K=K, persistence=a.persistence)
    a.out.mkdir(parents=True, exist_ok=True)
    write_raw_documents(train, a.out / "train.txt")
    write_raw_documents(test, a.out / "test.txt")
    np.savez(a.out / "planted_params.npz", **{f"Phi{l + 1}": m for l, m in enumerate(params.Phi)},
             **{f"Pi{l + 1}": m for l, m in enumerate(params.Pi)})
    print(f"wrote {len(train)} train and {len(test)} test documents to {a.out}")


if __name__ == "__main__":
    main()
