"""Command-line entry point: ``rgbnrnn <command> [--config FILE] [flags]``.

Every command writes its artifacts plus ``manifest.json`` into the output
directory. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import subprocess
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, RunConfig, TrainConfig, build_run_config, load_config_file
from .corpus import (Corpus, CorpusError, Vocab, build_vocab, encode_documents, read_raw_documents,
                     simple_tokenize, whitespace_tokenize, DEFAULT_STOPWORDS)
from .langmodel import param_count
from .randvar import make_rng
from .rgbn import export_topic_hierarchy, write_topic_hierarchy
from .trainer import ARCH_KEYS, CheckpointError, Trainer

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
TOKENIZER_FUNCS = {"simple": simple_tokenize, "whitespace": whitespace_tokenize}


def version_string() -> str:
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, run: RunConfig, outputs: list, extra: dict | None = None):
    manifest = {
        "command": command,
        "version": version_string(),
        "seed": run.train.seed,
        "config_hash": run.train.hash(),
        "config": run.train.to_dict(),
        "paths": {k: str(v) for k, v in sorted(run.paths.items())},
        "options": run.options,
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                          encoding="utf-8")


# argument parsing -------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file with [train]/[paths] sections")
    g = p.add_argument_group("training config (overrides the file)")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="VALUE")
    g = p.add_argument_group("paths")
    for name in ("corpus", "vocab", "checkpoint", "output_dir", "stopwords", "word_vectors",
                 "eval_corpus", "references"):
        g.add_argument("--" + name.replace("_", "-"), dest=name, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rgbnrnn", description=__doc__.splitlines()[0], allow_abbrev=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", allow_abbrev=False, help="build vocabularies from a raw corpus")
    _add_config_flags(p)

    p = sub.add_parser("train", allow_abbrev=False, help="train (or resume) a model")
    _add_config_flags(p)
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    p.add_argument("--max-steps", type=int, default=None)

    p = sub.add_parser("eval-ppl", allow_abbrev=False, help="held-out perplexity and per-token log-probs")
    _add_config_flags(p)
    p.add_argument("--context-mode", choices=("preceding", "leave-one-out"), default=None)
    p.add_argument("--sample-theta", action="store_true", help="use posterior samples, not means")

    p = sub.add_parser("eval-bleu", allow_abbrev=False, help="BLEU and self-BLEU of generated text")
    _add_config_flags(p)
    p.add_argument("--candidates", required=True, help="one tokenized sentence per line")
    p.add_argument("--n", type=int, default=4)

    p = sub.add_parser("generate", allow_abbrev=False, help="topic-guided sentence or paragraph generation")
    _add_config_flags(p)
    p.add_argument("--mode", default="from-noise",
                   choices=ev.MODES + ("paragraph",))
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--topic", type=int, default=0)
    p.add_argument("--magnitude", type=float, default=1.0)
    p.add_argument("--combine", default="", help="layer:topic:magnitude,... for topic-combination")
    p.add_argument("--document", help="file with one sentence per line (conditioned/paragraph)")
    p.add_argument("--decode", choices=("greedy", "sample"), default="greedy")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=30)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--propagate", choices=("sample", "mean"), default="sample")

    p = sub.add_parser("export-topics", allow_abbrev=False, help="topic hierarchy as JSON")
    _add_config_flags(p)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--weight-threshold", type=float, default=0.1)

    p = sub.add_parser("trace-norms", allow_abbrev=False, help="per-layer hidden-state norms along one sentence")
    _add_config_flags(p)
    p.add_argument("--doc", type=int, default=0, help="0-based document index")
    p.add_argument("--sentence", type=int, default=1, help="1-based sentence index")

    p = sub.add_parser("param-count", allow_abbrev=False, help="weight counts for a layer configuration")
    _add_config_flags(p)
    p.add_argument("--vc", type=int, default=None, help="topic vocabulary size (adds topic-model terms)")
    p.add_argument("--no-topics", action="store_true", help="count a plain stacked LSTM")
    return parser


def _run_config(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    names = [f.name for f in dataclasses.fields(TrainConfig)]
    flags = {k: getattr(args, k) for k in names + ["corpus", "vocab", "checkpoint", "output_dir",
                                                   "stopwords", "word_vectors", "eval_corpus",
                                                   "references"]}
    run = build_run_config(file_values, flags)
    run.options = {k: v for k, v in sorted(vars(args).items())
                   if k not in flags and k not in ("config", "command")}
    return run


def _need(run: RunConfig, key: str) -> Path:
    if key not in run.paths:
        raise ConfigError(f"missing required path '{key}' (flag --{key.replace('_', '-')} or [paths] {key})")
    return Path(run.paths[key])


def _out_dir(run: RunConfig) -> Path:
    out = _need(run, "output_dir")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(path: Path, vocab: Vocab, cfg: TrainConfig) -> Corpus:
    raw = read_raw_documents(path, TOKENIZER_FUNCS[cfg.tokenizer])
    docs = encode_documents(raw, vocab)
    if not docs:
        raise CorpusError(f"{path}: no documents after encoding")
    return Corpus(docs, vocab)


def _load_trainer(run: RunConfig) -> Trainer:
    """Load the checkpoint, rejecting explicit architecture keys that disagree with it.

    Non-architecture keys given on the command line (seed, lengths) override
    the stored ones; the effective config becomes ``run.train``.
    """
    path = _need(run, "checkpoint")
    tr = Trainer.load(path)
    stored = tr.config
    for key in sorted(run.explicit & set(ARCH_KEYS)):
        if getattr(run.train, key) != getattr(stored, key):
            raise ConfigError(f"{path} was trained with {key}={getattr(stored, key)!r} but the "
                                  f"config asks for {getattr(run.train, key)!r}; drop the key or "
                                  f"point --checkpoint at a matching run")
    changes = {k: getattr(run.train, k) for k in run.explicit if k not in ARCH_KEYS}
    tr.config = tr.model.config = dataclasses.replace(stored, **changes)
    run.train = tr.config
    return tr


# commands -----------------------------------------------------------------------------

def cmd_prep(run: RunConfig):
    cfg, out = run.train, _out_dir(run)
    raw = read_raw_documents(_need(run, "corpus"), TOKENIZER_FUNCS[cfg.tokenizer])
    vocab = build_vocab(raw, cfg.min_count, cfg.trim_fraction,
                        run.paths.get("stopwords", DEFAULT_STOPWORDS))
    path = out / "vocab.tsv"
    vocab.to_tsv(path)
    docs = encode_documents(raw, vocab)
    stats = {"documents": len(docs), "sentences": sum(d.J for d in docs),
             "V": vocab.V, "Vc": vocab.Vc}
    (out / "stats.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(stats, sort_keys=True))
    return [path, out / "stats.json"]


def cmd_train(run: RunConfig, resume: bool = False, max_steps=None):
    out = _out_dir(run)
    if resume:
        tr = _load_trainer(run)
    else:
        vocab = Vocab.from_tsv(_need(run, "vocab")) if "vocab" in run.paths else None
        if vocab is None:
            raise ConfigError("train needs --vocab (run 'prep' first)")
        tr = Trainer.create(vocab, run.train)
        if "word_vectors" in run.paths:
            tr.model.lm.load_word_vectors(run.paths["word_vectors"], vocab)
    corpus = _load_corpus(_need(run, "corpus"), tr.model.vocab, tr.config)
    metrics = out / "metrics.csv"
    hist = tr.fit(corpus, run.train.epochs, metrics, max_steps)
    ckpt = out / "checkpoint.zip"
    tr.save(ckpt)
    if hist:
        print(f"step {hist[-1]['step']}  elbo/token {hist[-1]['elbo']:.4f}")
    else:
        print("no training steps taken")
    return [ckpt] + ([metrics] if metrics.exists() else [])


def cmd_eval_ppl(run: RunConfig, context_mode=None, sample_theta=False):
    out = _out_dir(run)
    tr = _load_trainer(run)
    path = Path(run.paths.get("eval_corpus") or _need(run, "corpus"))
    corpus = _load_corpus(path, tr.model.vocab, tr.config)
    rng = make_rng([run.train.seed, 5]) if sample_theta else None
    lp_path = out / "token_logprobs.csv"
    ppl = ev.perplexity(tr.model, corpus, context_mode, not sample_theta, rng, lp_path)
    res = {"perplexity": ppl, "context_mode": context_mode or tr.model.test_context,
           "tokens": sum(1 for _ in open(lp_path, encoding="utf-8")) - 1}
    (out / "perplexity.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"perplexity {ppl:.4f}")
    return [out / "perplexity.json", lp_path]


def _read_sentences(path) -> list[list[str]]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return [line.split() for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_eval_bleu(run: RunConfig, candidates, n=4):
    out = _out_dir(run)
    cands = _read_sentences(candidates)
    refs = _read_sentences(_need(run, "references"))
    if not cands or not refs:
        raise CorpusError("candidates and references must be non-empty")
    res = {"n": n, "bleu": ev.bleu(cands, refs, n)}
    if len(cands) > 1:
        res["self_bleu"] = ev.self_bleu(cands, n)
    (out / "bleu.json").write_text(json.dumps(res, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(res, sort_keys=True))
    return [out / "bleu.json"]


def _parse_topics(text: str) -> list:
    picks = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        parts = item.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"--combine entry {item!r} must be layer:topic[:magnitude]")
        try:
            picks.append((int(parts[0]), int(parts[1]), float(parts[2]) if len(parts) == 3 else 1.0))
        except ValueError:
            raise ConfigError(f"--combine entry {item!r} is not numeric") from None
    return picks


def cmd_generate(run: RunConfig, a):
    out = _out_dir(run)
    tr = _load_trainer(run)
    model = tr.model
    doc = None
    if a.document:
        doc = [TOKENIZER_FUNCS[tr.config.tokenizer](" ".join(s)) for s in _read_sentences(a.document)]
    path = out / "generations.jsonl"
    if a.mode == "paragraph":
        if not doc:
            raise ConfigError("paragraph mode needs --document")
        sents = ev.generate_paragraph(model, doc, decode_method=a.decode, temperature=a.temperature,
                                      max_len=a.max_len, seed=run.train.seed)
        records = [{"mode": "paragraph", "sentence": j + 1, "tokens": s} for j, s in enumerate(sents)]
    else:
        records = []
        for i in range(a.count):
            spec = ev.GenerationSpec(a.mode, a.layer, a.topic, a.magnitude, _parse_topics(a.combine), doc,
                                     a.decode, a.temperature, a.max_len, run.train.seed + i, a.propagate)
            try:
                records.append(ev.generate_record(model, spec))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
    ev.write_jsonl(records, path)
    for r in records:
        print(" ".join(r["tokens"]))
    return [path]


def cmd_export_topics(run: RunConfig, top_n=10, weight_threshold=0.1):
    out = _out_dir(run)
    tr = _load_trainer(run)
    recs = export_topic_hierarchy(tr.model.topic, tr.model.vocab.tm_tokens, top_n, weight_threshold)
    path = out / "topics.json"
    write_topic_hierarchy(recs, path)
    for r in recs:
        print(f"L{r['layer']} #{r['topic_id']}: {' '.join(r['top_words'])}")
    return [path]


def cmd_trace_norms(run: RunConfig, doc_idx=0, sentence=1):
    out = _out_dir(run)
    tr = _load_trainer(run)
    path = Path(run.paths.get("eval_corpus") or _need(run, "corpus"))
    corpus = _load_corpus(path, tr.model.vocab, tr.config)
    if not 0 <= doc_idx < len(corpus.documents):
        raise CorpusError(f"document {doc_idx} outside 0..{len(corpus.documents) - 1}")
    doc = corpus.documents[doc_idx]
    tokens, layers = ev.hidden_states(tr.model, doc, sentence)
    norms = np.stack([np.linalg.norm(h, axis=1) for h in layers], axis=1)
    p = out / "norms.csv"
    ev.write_norm_trace(tokens, norms, p)
    return [p]


def cmd_param_count(run: RunConfig, vc=None, no_topics=False):
    out = _out_dir(run) if "output_dir" in run.paths else None
    c = run.train
    counts = param_count(c.embed_dim, c.lm_hidden, None if no_topics else c.topics, vc)
    counts["lm_millions"] = round(counts["lm_total"] / 1e6, 2)
    text = json.dumps(counts, indent=1, sort_keys=True)
    print(text)
    if out is None:
        return []
    (out / "param_count.json").write_text(text + "\n", encoding="utf-8")
    return [out / "param_count.json"]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = _run_config(args)
        c = args.command
        if c == "prep":
            outputs = cmd_prep(run)
        elif c == "train":
            outputs = cmd_train(run, args.resume, args.max_steps)
        elif c == "eval-ppl":
            outputs = cmd_eval_ppl(run, args.context_mode, args.sample_theta)
        elif c == "eval-bleu":
            outputs = cmd_eval_bleu(run, args.candidates, args.n)
        elif c == "generate":
            outputs = cmd_generate(run, args)
        elif c == "export-topics":
            outputs = cmd_export_topics(run, args.top_n, args.weight_threshold)
        elif c == "trace-norms":
            outputs = cmd_trace_norms(run, args.doc, args.sentence)
        else:
            outputs = cmd_param_count(run, args.vc, args.no_topics)
        if "output_dir" in run.paths:
            write_manifest(Path(run.paths["output_dir"]), c, run, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, CheckpointError, FileNotFoundError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
