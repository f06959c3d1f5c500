"""Batch front door: corpus generation, training, tuning, evaluation.

Configuration is flat `section.key=value` text; every key can be overridden
by a same-named command-line flag.  Each run owns one output directory and
writes a manifest listing every artifact with its sha256 digest.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, metrics, tuning
from .corpus import (Dataset, GenConfig, build_dataset, load_dataset,
                     save_dataset)
from .ebm import Ebm, exact_Z, exact_p, export_p_csv
from .lang import TokenSeq, Vocab, ast_node_count, compile_check, detokenize, parse, tokenize
from .policy import MleConfig, load_checkpoint, save_checkpoint, train_base


class ConfigError(ValueError):
    pass


class SchemaMismatchError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> Optional[tuple[float, ...]]:
    s = s.strip()
    if not s or s.lower() == "none":
        return None
    return tuple(float(x) for x in s.split(","))


def _parse_strs(s: str) -> tuple[str, ...]:
    return tuple(x for x in s.split(",") if x)


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "vocab.preset": (str, "default", "default (16 tokens) or tiny (6)"),
    "corpus.seed": (int, 0, "corpus generation seed"),
    "corpus.n_train": (int, 8000, "training programs"),
    "corpus.n_test": (int, 889, "held-out programs"),
    "corpus.max_stmts": (int, 3, "max statements per program"),
    "corpus.max_depth": (int, 3, "max parenthesis nesting"),
    "corpus.l_max": (int, 24, "max tokens incl BOS/EOS"),
    "corpus.p_corrupt": (float, 0.0, "per-program corruption probability"),
    "corpus.corrupt_ops": (_parse_strs, "drop,duplicate,substitute,swap",
                           "enabled corruption edits"),
    "corpus.stmt_weights": (_parse_floats, "", "weights over 1..max_stmts"),
    "corpus.term_count_weights": (_parse_floats, "",
                                  "top-level expr term-count weights"),
    "corpus.more_terms": (float, 0.3, "P(extend expr with +/- term)"),
    "corpus.more_factors": (float, 0.2, "P(extend term with */ factor)"),
    "corpus.factor_weights": (_parse_floats, "0.5,0.3,0.2",
                              "NUM, IDENT, paren weights"),
    "corpus.ident_weights": (_parse_floats, "", "weights over identifiers"),
    "corpus.num_weights": (_parse_floats, "", "weights over numerals"),
    "corpus.addop_weights": (_parse_floats, "", "weights over + -"),
    "corpus.mulop_weights": (_parse_floats, "", "weights over * /"),
    "corpus.max_retries": (int, 1000, "resampling budget"),
    "ebm.l_max": (int, 24, "length cap for sampling, scoring, evaluation"),
    "policy.kind": (str, "neural", "neural or tabular"),
    "policy.k": (int, 8, "context window"),
    "policy.d": (int, 16, "embedding width"),
    "policy.h": (int, 64, "hidden width"),
    "policy.order": (int, 1, "tabular context length"),
    "mle.lr": (float, 5e-4, "Adam learning rate"),
    "mle.batch_size": (int, 64, "MLE batch size"),
    "mle.epochs": (int, 10, "MLE epochs"),
    "mle.seed": (int, 0, "init + shuffle seed"),
    "mle.beta1": (float, 0.9, "Adam beta1"),
    "mle.beta2": (float, 0.999, "Adam beta2"),
    "mle.eps": (float, 1e-8, "Adam epsilon"),
    "tune.method": (str, "kldpg", "kldpg | reinforce-b | reinforce-p"),
    "tune.lr": (float, 1e-3, "policy-gradient step size"),
    "tune.batch_size": (int, 256, "sequences per update"),
    "tune.updates": (int, 250, "total gradient updates"),
    "tune.warmup": (int, 20, "linear warmup updates"),
    "tune.eval_interval": (int, 10, "updates between evaluations"),
    "tune.eval_samples": (int, 500, "policy samples per evaluation"),
    "tune.kl_samples": (int, 2000, "proposal samples per KL estimate"),
    "tune.seed": (int, 0, "tuning seed"),
    "tune.clip_norm": (float, 10.0, "gradient-norm clip (<=0 disables)"),
    "tune.baseline": (_parse_bool, "false", "subtract mean reward"),
    "tune.exact": (_parse_bool, "false", "enumerate p and Z exactly"),
    "eval.n_samples": (int, 500, "samples for the metric suite"),
    "eval.kl_samples": (int, 2000, "samples for the forward KL"),
    "eval.seed": (int, 0, "evaluation seed"),
    "eval.exact": (_parse_bool, "false", "exact forward KL"),
    "sample.n": (int, 20, "number of samples"),
    "sample.prompt": (str, "", "surface-token prefix"),
    "sample.seed": (int, 0, "sampling seed"),
    "exact.l_max": (int, 0, "override l_max for enumeration (0 = corpus)"),
    "inputs.corpus_digest": (str, "", "expected sha256 of train.txt"),
    "inputs.base_digest": (str, "", "expected sha256 of the base checkpoint"),
}


def parse_config_file(path: Path) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def resolve_config(config_path: Optional[str],
                   overrides: dict[str, str]) -> dict:
    raw = {}
    if config_path:
        if not Path(config_path).exists():
            raise ConfigError(f"config file not found: {config_path}")
        raw.update(parse_config_file(Path(config_path)))
    raw.update(overrides)
    cfg = {}
    for key, (parser, default, _help) in SCHEMA.items():
        value = raw.get(key)
        if value is None:
            cfg[key] = parser(default) if isinstance(default, str) else default
        else:
            try:
                cfg[key] = parser(value)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"bad value for {key}: {e}") from e
    return cfg


def _vocab(cfg: dict) -> Vocab:
    preset = cfg["vocab.preset"]
    if preset == "default":
        return Vocab.default()
    if preset == "tiny":
        return Vocab.tiny()
    raise ConfigError(f"unknown vocab preset {preset!r}")


def _gen_config(cfg: dict) -> GenConfig:
    return GenConfig(
        seed=cfg["corpus.seed"], max_stmts=cfg["corpus.max_stmts"],
        max_depth=cfg["corpus.max_depth"], l_max=cfg["corpus.l_max"],
        p_corrupt=cfg["corpus.p_corrupt"],
        corrupt_ops=cfg["corpus.corrupt_ops"],
        stmt_weights=cfg["corpus.stmt_weights"],
        term_count_weights=cfg["corpus.term_count_weights"],
        more_terms=cfg["corpus.more_terms"],
        more_factors=cfg["corpus.more_factors"],
        factor_weights=cfg["corpus.factor_weights"],
        ident_weights=cfg["corpus.ident_weights"],
        num_weights=cfg["corpus.num_weights"],
        addop_weights=cfg["corpus.addop_weights"],
        mulop_weights=cfg["corpus.mulop_weights"],
        max_retries=cfg["corpus.max_retries"])


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _check_input_digest(path: Path, expected: str, label: str) -> None:
    if expected and _sha256(path) != expected:
        raise ConfigError(f"{label} digest mismatch for {path}")


class Run:
    """One output directory plus its manifest."""

    def __init__(self, subcommand: str, out_dir: Path, cfg: dict,
                 force: bool = False):
        self.out_dir = Path(out_dir)
        if self.out_dir.exists() and any(self.out_dir.iterdir()) and not force:
            raise ConfigError(
                f"output directory {self.out_dir} is not empty (use --force)")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.cfg = cfg
        self.t0 = time.monotonic()
        self.artifacts: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def register(self, *names: str) -> None:
        for name in names:
            self.artifacts[name] = _sha256(self.out_dir / name)

    def finish(self, seed: Optional[int] = None) -> Path:
        manifest = {
            "subcommand": self.subcommand,
            "version": __version__,
            "seed": seed,
            "config": {k: (list(v) if isinstance(v, tuple) else v)
                       for k, v in self.cfg.items()},
            "artifacts": self.artifacts,
            "wall_clock_sec": time.monotonic() - self.t0,
        }
        p = self.path("run_manifest.json")
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return p


def cmd_gen_corpus(cfg: dict, out: Path, force: bool) -> None:
    run = Run("gen-corpus", out, cfg, force)
    vocab = _vocab(cfg)
    dataset = build_dataset(vocab, _gen_config(cfg),
                            cfg["corpus.n_train"], cfg["corpus.n_test"])
    save_dataset(dataset, vocab, run.out_dir)
    run.register("train.txt", "test.txt", "manifest.json")
    run.finish(seed=cfg["corpus.seed"])


def _load_corpus(cfg: dict, corpus_dir: str) -> tuple[Vocab, Dataset]:
    vocab = _vocab(cfg)
    d = Path(corpus_dir)
    if not (d / "manifest.json").exists():
        raise ConfigError(f"no corpus manifest under {d}")
    _check_input_digest(d / "train.txt", cfg["inputs.corpus_digest"], "corpus")
    return vocab, load_dataset(vocab, d)


def cmd_train_base(cfg: dict, out: Path, corpus_dir: str, force: bool) -> None:
    run = Run("train-base", out, cfg, force)
    vocab, dataset = _load_corpus(cfg, corpus_dir)
    mle = MleConfig(kind=cfg["policy.kind"], k=cfg["policy.k"],
                    d=cfg["policy.d"], h=cfg["policy.h"],
                    order=cfg["policy.order"], lr=cfg["mle.lr"],
                    beta1=cfg["mle.beta1"], beta2=cfg["mle.beta2"],
                    eps=cfg["mle.eps"], batch_size=cfg["mle.batch_size"],
                    epochs=cfg["mle.epochs"], seed=cfg["mle.seed"])
    policy, losses = train_base(dataset, mle, vocab)
    save_checkpoint(policy, run.path("base.ckpt"))
    with open(run.path("mle_loss.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_nll"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, repr(loss)])
    run.register("base.ckpt", "mle_loss.csv")
    run.finish(seed=cfg["mle.seed"])


def _load_base(cfg: dict, path: str):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint not found: {p}")
    _check_input_digest(p, cfg["inputs.base_digest"], "base checkpoint")
    return load_checkpoint(p)


def cmd_tune(cfg: dict, out: Path, base_path: str, corpus_dir: str,
             force: bool) -> None:
    run = Run("tune", out, cfg, force)
    base = _load_base(cfg, base_path)
    vocab, dataset = _load_corpus(cfg, corpus_dir)
    ebm = Ebm(base, l_max=cfg["ebm.l_max"])
    clip = cfg["tune.clip_norm"]
    tc = tuning.TuneConfig(
        method=cfg["tune.method"], lr=cfg["tune.lr"],
        batch_size=cfg["tune.batch_size"], updates=cfg["tune.updates"],
        warmup=cfg["tune.warmup"], eval_interval=cfg["tune.eval_interval"],
        eval_samples=cfg["tune.eval_samples"],
        kl_samples=cfg["tune.kl_samples"], seed=cfg["tune.seed"],
        baseline=cfg["tune.baseline"],
        clip_norm=None if clip <= 0 else clip, exact=cfg["tune.exact"])
    try:
        policy, trace = tuning.tune(base, ebm, tc, dataset=dataset)
    except tuning.NonFiniteGradientError as e:
        if e.trace is not None:
            tuning.save_trace_csv(e.trace, run.path("trace.csv"))
            tuning.save_trace_manifest(e.trace, run.path("trace_manifest.json"))
        raise
    save_checkpoint(policy, run.path("tuned.ckpt"))
    tuning.save_trace_csv(trace, run.path("trace.csv"))
    tuning.save_trace_manifest(trace, run.path("trace_manifest.json"))
    run.register("tuned.ckpt", "trace.csv", "trace_manifest.json")
    run.finish(seed=cfg["tune.seed"])


def cmd_evaluate(cfg: dict, out: Path, ckpt_path: str, base_path: str,
                 corpus_dir: str, force: bool) -> None:
    run = Run("evaluate", out, cfg, force)
    base = _load_base(cfg, base_path)
    pi = load_checkpoint(Path(ckpt_path)) if ckpt_path else base
    vocab, dataset = _load_corpus(cfg, corpus_dir)
    ebm = Ebm(base, l_max=cfg["ebm.l_max"])
    rng = np.random.default_rng(cfg["eval.seed"])
    record = metrics.evaluate(pi, base, ebm, dataset, cfg["eval.n_samples"],
                              rng, exact=cfg["eval.exact"],
                              kl_samples=cfg["eval.kl_samples"])
    metrics.save_record_json(record, run.path("metrics.json"))
    metrics.save_record_csv(record, run.path("metrics.csv"))
    metrics.save_histogram_csv(record.error_histogram,
                               record.compilability_rate,
                               run.path("error_histogram.csv"))
    samples = metrics.SampleSet(
        tuple(pi.sample_batch(np.random.default_rng(cfg["eval.seed"]),
                              cfg["eval.n_samples"], ebm.l_max)))
    metrics.save_rank_frequency_csv(
        metrics.token_rank_frequency_rows(vocab, samples),
        run.path("rank_frequency.csv"))
    run.register("metrics.json", "metrics.csv", "error_histogram.csv",
                 "rank_frequency.csv")
    run.finish(seed=cfg["eval.seed"])


def cmd_sample(cfg: dict, out: Path, ckpt_path: str, force: bool) -> None:
    run = Run("sample", out, cfg, force)
    pi = _load_base(cfg, ckpt_path)
    vocab = pi.vocab
    prompt_ids = None
    if cfg["sample.prompt"]:
        prompt_ids = list(tokenize(vocab, cfg["sample.prompt"]).body(vocab))
    rng = np.random.default_rng(cfg["sample.seed"])
    seqs = pi.sample_batch(rng, cfg["sample.n"], cfg["ebm.l_max"],
                           prompt=prompt_ids)
    with open(run.path("samples.txt"), "w") as f:
        for s in seqs:
            f.write(detokenize(vocab, s) + "\n")
    with open(run.path("samples.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "compiles", "error_kind", "char_length",
                    "ast_nodes"])
        for i, s in enumerate(seqs):
            res = compile_check(vocab, s)
            nodes = ast_node_count(parse(vocab, s)) if res.ok else ""
            w.writerow([i, int(res.ok),
                        res.error_kind.value if res.error_kind else "",
                        len(detokenize(vocab, s)), nodes])
    run.register("samples.txt", "samples.csv")
    run.finish(seed=cfg["sample.seed"])


def cmd_enumerate_exact(cfg: dict, out: Path, ckpt_path: str,
                        force: bool) -> None:
    run = Run("enumerate-exact", out, cfg, force)
    base = _load_base(cfg, ckpt_path)
    l_max = cfg["exact.l_max"] or cfg["ebm.l_max"]
    ebm = Ebm(base, l_max=l_max)
    z = exact_Z(ebm)
    table = exact_p(ebm)
    export_p_csv(table, base.vocab, run.path("p_table.csv"))
    run.path("exact.json").write_text(json.dumps({
        "Z": z.value, "mode": z.mode, "l_max": l_max,
        "support_size": len(table),
    }, indent=2, sort_keys=True) + "\n")
    run.register("p_table.csv", "exact.json")
    run.finish()


def cmd_report(cfg: dict, out: Path, trace_paths: list[str],
               force: bool) -> None:
    run = Run("report", out, cfg, force)
    if not trace_paths:
        raise ConfigError("report needs at least one trace CSV")
    tables = []
    for p in trace_paths:
        with open(p, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or tuple(rows[0]) != tuning.TRACE_FIELDS:
            raise SchemaMismatchError(f"{p} does not match the trace schema")
        if len(rows) < 2:
            raise SchemaMismatchError(f"{p} contains no evaluations")
        tables.append(rows[1:])

    metric_cols = tuning.TRACE_FIELDS[3:]
    with open(run.path("long.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "update", "metric", "value"])
        for rows in tables:
            for row in rows:
                method, update = row[0], row[1]
                for name, value in zip(metric_cols, row[3:]):
                    if value != "":
                        w.writerow([method, update, name, value])

    with open(run.path("summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        header = ["method"]
        for name in metric_cols:
            header += [f"final_{name}", f"best_{name}"]
        w.writerow(header)
        for rows in tables:
            method = rows[0][0]
            out_row = [method]
            for j, name in enumerate(metric_cols, start=3):
                values = [float(r[j]) for r in rows if r[j] != ""]
                final = values[-1] if values else ""
                best = (max if _higher_is_better(name) else min)(values) \
                    if values else ""
                out_row += [final, best]
            w.writerow(out_row)
    run.register("long.csv", "summary.csv")
    run.finish()


def _higher_is_better(metric: str) -> bool:
    return metric in ("compilability_rate", "distinct1", "mean_ast_nodes",
                      "mean_char_length")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minidpg",
        description="compilability-constrained generation lab")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the subcommand's seed")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty directory")
        for key, (_parser, default, help_text) in SCHEMA.items():
            p.add_argument(f"--{key}", dest=key, default=None,
                           metavar="V", help=f"{help_text} [{default}]")

    p = sub.add_parser("gen-corpus", help="generate and persist a dataset")
    add_common(p)

    p = sub.add_parser("train-base", help="MLE-pretrain the base model")
    add_common(p)
    p.add_argument("--corpus", required=True, help="gen-corpus output dir")

    p = sub.add_parser("tune", help="fine-tune from a base checkpoint")
    add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--base", required=True, help="base checkpoint path")
    p.add_argument("--method", default=None,
                   choices=list(tuning.METHODS), help="shorthand for tune.method")
    p.add_argument("--updates", type=int, default=None,
                   help="shorthand for tune.updates")

    p = sub.add_parser("evaluate", help="run the metric suite")
    add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="policy to evaluate (default: the base)")

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", default=None,
                   help="shorthand for sample.prompt")
    p.add_argument("-n", type=int, default=None,
                   help="shorthand for sample.n")

    p = sub.add_parser("enumerate-exact",
                       help="exact partition function and p table")
    add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("report", help="summaries from tuning traces")
    add_common(p)
    p.add_argument("--traces", nargs="+", required=True,
                   help="trace.csv files from tune runs")
    return parser


_SEED_KEY = {"gen-corpus": "corpus.seed", "train-base": "mle.seed",
             "tune": "tune.seed", "evaluate": "eval.seed",
             "sample": "sample.seed"}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides: dict[str, str] = {}
        for key in SCHEMA:
            value = getattr(args, key, None)
            if value is not None:
                overrides[key] = value
        if args.seed is not None and args.subcommand in _SEED_KEY:
            overrides[_SEED_KEY[args.subcommand]] = str(args.seed)
        if getattr(args, "method", None):
            overrides["tune.method"] = args.method
        if getattr(args, "updates", None) is not None \
                and args.subcommand == "tune":
            overrides["tune.updates"] = str(args.updates)
        if getattr(args, "prompt", None) is not None:
            overrides["sample.prompt"] = args.prompt
        if getattr(args, "n", None) is not None:
            overrides["sample.n"] = str(args.n)
        cfg = resolve_config(args.config, overrides)

        out = Path(args.out)
        if args.subcommand == "gen-corpus":
            cmd_gen_corpus(cfg, out, args.force)
        elif args.subcommand == "train-base":
            cmd_train_base(cfg, out, args.corpus, args.force)
        elif args.subcommand == "tune":
            cmd_tune(cfg, out, args.base, args.corpus, args.force)
        elif args.subcommand == "evaluate":
            cmd_evaluate(cfg, out, args.checkpoint, args.base, args.corpus,
                         args.force)
        elif args.subcommand == "sample":
            cmd_sample(cfg, out, args.checkpoint, args.force)
        elif args.subcommand == "enumerate-exact":
            cmd_enumerate_exact(cfg, out, args.checkpoint, args.force)
        elif args.subcommand == "report":
            cmd_report(cfg, out, args.traces, args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
