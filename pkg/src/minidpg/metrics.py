"""Evaluation suite: compilability, KL divergences, diversity, complexity.

All metrics operate on an immutable SampleSet and are pure; BOS/EOS are
excluded from every diversity, length and frequency computation.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .corpus import Dataset
from .lang import (ERROR_KINDS, TokenSeq, Vocab, ast_node_count, compile_check,
                   detokenize, lint, parse)


class AllSamplesEmptyError(ValueError):
    pass


class TooFewSamplesError(ValueError):
    pass


class NoCompilableSamplesError(ValueError):
    pass


@dataclass(frozen=True)
class SampleSet:
    seqs: tuple[TokenSeq, ...]
    seed: Optional[int] = None
    policy_tag: str = ""

    def __post_init__(self):
        if not self.seqs:
            raise ValueError("sample set must be nonempty")

    def __len__(self) -> int:
        return len(self.seqs)


@dataclass
class MetricsRecord:
    """One evaluation snapshot; missing sub-metrics carry a reason instead."""

    compilability_rate: float = 0.0
    forward_kl: Optional[float] = None
    reverse_kl: Optional[float] = None
    distinct1: Optional[float] = None
    self_bleu5: Optional[float] = None
    perplexity: Optional[float] = None
    mean_char_length: float = 0.0
    mean_ast_nodes: Optional[float] = None
    lint_rate: float = 0.0
    lint_rate_per_token: float = 0.0
    error_histogram: dict[str, float] = field(default_factory=dict)
    token_rank_frequency: list[tuple[int, int]] = field(default_factory=list)
    n_samples: int = 0
    reasons: dict[str, str] = field(default_factory=dict)

    # stable CSV layout, documented in the README
    CSV_FIELDS = ("compilability_rate", "forward_kl", "reverse_kl",
                  "distinct1", "self_bleu5", "perplexity",
                  "mean_char_length", "mean_ast_nodes", "lint_rate",
                  "lint_rate_per_token") + tuple(
                      f"err_{k.value}" for k in ERROR_KINDS)

    def csv_values(self) -> list[str]:
        vals = []
        for name in self.CSV_FIELDS:
            if name.startswith("err_"):
                v = self.error_histogram.get(name[4:], 0.0)
            else:
                v = getattr(self, name)
            vals.append("" if v is None else repr(float(v)))
        return vals

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["token_rank_frequency"] = [list(rc) for rc in
                                     self.token_rank_frequency]
        return d


def compilability_rate(vocab: Vocab, samples: SampleSet) -> float:
    ok = sum(compile_check(vocab, s).ok for s in samples.seqs)
    return ok / len(samples)


def distinct1(vocab: Vocab, samples: SampleSet) -> float:
    """Mean per-sample ratio of distinct to total body tokens.

    Empty-bodied samples are skipped; if every sample is empty there is no
    ratio to average and AllSamplesEmptyError is raised.
    """
    ratios = []
    for s in samples.seqs:
        body = s.body(vocab)
        if body:
            ratios.append(len(set(body)) / len(body))
    if not ratios:
        raise AllSamplesEmptyError("no sample has body tokens")
    return float(np.mean(ratios))


def _ngram_counts(body: tuple[int, ...], n: int) -> Counter:
    return Counter(body[i:i + n] for i in range(len(body) - n + 1))


def self_bleu5(vocab: Vocab, samples: SampleSet, max_n: int = 5) -> float:
    """Each sample's BLEU against all others as references, averaged.

    Modified n-gram precisions up to min(max_n, len(sample)), geometric
    mean, brevity penalty against the closest reference length, and no
    smoothing: a zero precision zeroes that sample's score.
    """
    bodies = [s.body(vocab) for s in samples.seqs]
    idx = [i for i, b in enumerate(bodies) if b]
    if len(idx) < 2:
        raise TooFewSamplesError("need at least two non-empty samples")

    counts = {n: [_ngram_counts(bodies[i], n) for i in idx]
              for n in range(1, max_n + 1)}
    # per n-gram, the two largest per-sample counts and who holds the max;
    # max over references-excluding-self then falls out in O(1)
    top: dict[int, dict] = {}
    for n in range(1, max_n + 1):
        best: dict[tuple, tuple[int, int, int]] = {}  # ngram -> (c1, owner, c2)
        for j, c in enumerate(counts[n]):
            for g, cnt in c.items():
                c1, owner, c2 = best.get(g, (0, -1, 0))
                if cnt > c1:
                    best[g] = (cnt, j, c1)
                elif cnt > c2:
                    best[g] = (c1, owner, cnt)
        top[n] = best

    lengths = sorted(len(bodies[i]) for i in idx)
    scores = []
    for j, i in enumerate(idx):
        hyp = bodies[i]
        c = len(hyp)
        # closest reference length (ties -> shorter), excluding this sample
        pool = list(lengths)
        pool.remove(c)
        k = bisect.bisect_left(pool, c)
        cands = [pool[m] for m in (k - 1, k) if 0 <= m < len(pool)]
        r = min(cands, key=lambda L: (abs(L - c), L))
        bp = 1.0 if c >= r else math.exp(1.0 - r / c)

        n_max = min(max_n, c)
        log_precisions = []
        zero = False
        for n in range(1, n_max + 1):
            hyp_counts = counts[n][j]
            clipped = 0
            for g, cnt in hyp_counts.items():
                c1, owner, c2 = top[n].get(g, (0, -1, 0))
                ref_max = c1 if owner != j else c2
                clipped += min(cnt, ref_max)
            denom = sum(hyp_counts.values())
            if clipped == 0:
                zero = True
                break
            log_precisions.append(math.log(clipped / denom))
        if zero:
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(log_precisions) / n_max))
    return float(np.mean(scores))


def perplexity(policy, test: list[TokenSeq]) -> float:
    """exp of the mean negative token logprob over the held-out split.

    Tokens counted per sequence are the predicted positions: everything
    after BOS including the final EOS.
    """
    if not test:
        raise ValueError("test split is empty")
    n_tokens = sum(len(s.ids) - 1 for s in test)
    total = float(policy.logprob_batch(test).sum())
    return math.exp(-total / n_tokens)


def mean_char_length(vocab: Vocab, samples: SampleSet) -> float:
    return float(np.mean([len(detokenize(vocab, s)) for s in samples.seqs]))


def mean_ast_nodes(vocab: Vocab, samples: SampleSet) -> float:
    counts = [ast_node_count(parse(vocab, s)) for s in samples.seqs
              if compile_check(vocab, s).ok]
    if not counts:
        raise NoCompilableSamplesError("no sample compiles")
    return float(np.mean(counts))


def lint_rate(vocab: Vocab, samples: SampleSet) -> tuple[float, float]:
    """(violations per character, violations per token) over the whole set."""
    violations = 0
    chars = 0
    tokens = 0
    for s in samples.seqs:
        rep = lint(vocab, s)
        violations += len(rep.violations)
        tokens += rep.tokens_scanned
        chars += len(detokenize(vocab, s))
    per_char = violations / chars if chars else 0.0
    per_token = violations / tokens if tokens else 0.0
    return per_char, per_token


def error_histogram(vocab: Vocab, samples: SampleSet) -> dict[str, float]:
    """Fraction of all samples hitting each error category (zeros included)."""
    counts = Counter()
    for s in samples.seqs:
        res = compile_check(vocab, s)
        if not res.ok:
            counts[res.error_kind.value] += 1
    n = len(samples)
    return {k.value: counts.get(k.value, 0) / n for k in ERROR_KINDS}


def token_rank_frequency(vocab: Vocab,
                         samples: SampleSet) -> list[tuple[int, int]]:
    """Descending token usage counts; ties broken by ascending token id."""
    counts = Counter()
    for s in samples.seqs:
        counts.update(s.body(vocab))
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(rank + 1, cnt) for rank, (_, cnt) in enumerate(ordered)]


def token_rank_frequency_rows(vocab: Vocab,
                              samples: SampleSet) -> list[tuple[int, str, int]]:
    counts = Counter()
    for s in samples.seqs:
        counts.update(s.body(vocab))
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(rank + 1, vocab.surface_of(t), cnt)
            for rank, (t, cnt) in enumerate(ordered)]


def evaluate(pi, base, ebm, dataset: Optional[Dataset], n_samples: int,
             rng: np.random.Generator, *, forward_kl=None, proposal=None,
             exact: bool = False, kl_samples: int = 2000,
             policy_tag: str = "") -> MetricsRecord:
    """Draw one sample set from pi and fill every record field.

    forward_kl may be passed pre-computed (the tuning loop shares it with
    the proposal-swap test); otherwise it is estimated here with `proposal`
    (default: the base model) or exactly when exact=True.  Sub-metric
    errors become absent fields with a reason, never an abort.
    """
    from . import tuning  # local import; tuning imports this module

    if n_samples < 2:
        raise ValueError("need at least two samples")
    vocab = pi.vocab
    seqs = tuple(pi.sample_batch(rng, n_samples, ebm.l_max))
    samples = SampleSet(seqs=seqs, policy_tag=policy_tag)
    rec = MetricsRecord(n_samples=n_samples)
    rec.compilability_rate = compilability_rate(vocab, samples)
    rec.error_histogram = error_histogram(vocab, samples)
    rec.token_rank_frequency = token_rank_frequency(vocab, samples)
    rec.mean_char_length = mean_char_length(vocab, samples)
    rec.lint_rate, rec.lint_rate_per_token = lint_rate(vocab, samples)
    try:
        rec.distinct1 = distinct1(vocab, samples)
    except AllSamplesEmptyError as e:
        rec.reasons["distinct1"] = str(e)
    try:
        rec.self_bleu5 = self_bleu5(vocab, samples)
    except TooFewSamplesError as e:
        rec.reasons["self_bleu5"] = str(e)
    try:
        rec.mean_ast_nodes = mean_ast_nodes(vocab, samples)
    except NoCompilableSamplesError as e:
        rec.reasons["mean_ast_nodes"] = str(e)
    if dataset is not None and dataset.test:
        rec.perplexity = perplexity(pi, dataset.test)
    else:
        rec.reasons["perplexity"] = "no held-out split supplied"

    rev = tuning.reverse_kl(pi, base, n=n_samples, rng=rng,
                            l_max=ebm.l_max, samples=list(seqs))
    rec.reverse_kl = rev.value

    if forward_kl is not None:
        rec.forward_kl = forward_kl.value if hasattr(forward_kl, "value") \
            else float(forward_kl)
    else:
        try:
            if exact:
                rec.forward_kl = tuning.forward_kl_exact(ebm, pi).value
            else:
                prop = base if proposal is None else proposal
                z_hat = None
                rec.forward_kl = tuning.is_forward_kl(
                    ebm, z_hat, pi, prop, kl_samples, rng).value
        except Exception as e:  # degenerate Z and friends become reasons
            rec.reasons["forward_kl"] = str(e)
    return rec


def save_record_csv(record: MetricsRecord, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MetricsRecord.CSV_FIELDS)
        w.writerow(record.csv_values())


def save_record_json(record: MetricsRecord, path: Path) -> None:
    Path(path).write_text(json.dumps(record.to_json_dict(), indent=2,
                                     sort_keys=True) + "\n")


def save_histogram_csv(hist: dict[str, float], compil_rate: float,
                       path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["category", "frequency"])
        w.writerow(["ok", repr(compil_rate)])
        for k in ERROR_KINDS:
            w.writerow([k.value, repr(hist.get(k.value, 0.0))])


def save_rank_frequency_csv(rows: list[tuple[int, str, int]],
                            path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", "token", "count"])
        for rank, token, cnt in rows:
            w.writerow([rank, token, cnt])
