"""The product P(x) = a(x) * b(x), its partition function, and sampling.

All probability arithmetic stays in log space; a zero score is the -inf
sentinel and is never exponentiated back except at the final boundary.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

from .lang import TokenSeq, Vocab, compile_check, detokenize

ENUMERATION_BUDGET = 10 ** 7


class BudgetExceededError(RuntimeError):
    pass


class BudgetExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PartitionEstimate:
    value: float
    mode: str                   # "exact" | "monte-carlo"
    n: int = 0
    stderr: float = 0.0

    def __post_init__(self):
        if not -1e-12 <= self.value <= 1.0 + 1e-9:
            raise ValueError("Z must lie in [0, 1]")
        if self.mode == "exact" and self.stderr != 0.0:
            raise ValueError("exact mode has zero standard error")


class Ebm:
    """Frozen base policy plus a binary sequence scorer.

    The default scorer is MiniLang compilability; truncated (EOS-less)
    sequences score 0 and therefore carry no probability mass.
    """

    def __init__(self, base, l_max: int,
                 scorer: Optional[Callable[[TokenSeq], bool]] = None):
        self.base = base
        self.l_max = l_max
        self.vocab: Vocab = base.vocab
        if scorer is None:
            scorer = lambda seq: compile_check(self.vocab, seq).ok
        self.scorer = scorer

    def accepts(self, seq: TokenSeq) -> bool:
        return bool(self.scorer(seq))

    def log_score(self, seq: TokenSeq) -> float:
        """log P(x); -inf when the scorer rejects."""
        if not self.accepts(seq) or not seq.has_eos(self.vocab):
            return -math.inf
        return self.base.logprob(seq)

    def score(self, seq: TokenSeq) -> float:
        ls = self.log_score(seq)
        return 0.0 if ls == -math.inf else math.exp(ls)


def _check_budget(vocab_size: int, l_max: int) -> None:
    states = sum(vocab_size ** l for l in range(l_max + 1))
    if states > ENUMERATION_BUDGET:
        raise BudgetExceededError(
            f"{states} enumeration states exceed budget {ENUMERATION_BUDGET}")


def enumerate_terminated(policy, l_max: int) -> Iterator[tuple[TokenSeq, float]]:
    """All EOS-terminated sequences with length <= l_max and their logprobs.

    Depth-first over prefixes, computing each next-token distribution once
    per prefix.
    """
    vocab = policy.vocab
    _check_budget(len(vocab), l_max)
    eos = vocab.eos_id
    body_ids = vocab.body_ids

    def walk(prefix: list[int], logp: float):
        with np.errstate(divide="ignore"):
            logdist = np.log(policy.next_dist(prefix))
        yield TokenSeq(tuple(prefix + [eos])), logp + logdist[eos]
        if len(prefix) + 2 <= l_max:
            for t in body_ids:
                if logdist[t] > -math.inf:
                    yield from walk(prefix + [t], logp + logdist[t])

    yield from walk([policy.vocab.bos_id], 0.0)


def truncation_mass(policy, l_max: int) -> float:
    """Total probability of reaching l_max tokens without emitting EOS."""
    vocab = policy.vocab
    _check_budget(len(vocab), l_max)
    body_ids = vocab.body_ids

    def walk(prefix: list[int], logp: float) -> float:
        if len(prefix) == l_max:
            return math.exp(logp)
        with np.errstate(divide="ignore"):
            logdist = np.log(policy.next_dist(prefix))
        total = 0.0
        for t in body_ids:
            if logdist[t] > -math.inf:
                total += walk(prefix + [t], logp + logdist[t])
        return total

    return walk([vocab.bos_id], 0.0)


def exact_Z(ebm: Ebm, l_max: Optional[int] = None) -> PartitionEstimate:
    """Z as the exact sum of P over every terminated sequence.

    Summation is correctly rounded (fsum), so the result is independent of
    enumeration order.
    """
    l_max = ebm.l_max if l_max is None else l_max
    total = math.fsum(math.exp(logp)
                      for seq, logp in enumerate_terminated(ebm.base, l_max)
                      if ebm.accepts(seq))
    return PartitionEstimate(value=min(total, 1.0), mode="exact")


def exact_p(ebm: Ebm, l_max: Optional[int] = None) -> dict[tuple[int, ...], float]:
    """The normalized table {ids: P(x)/Z} over the accepted support."""
    l_max = ebm.l_max if l_max is None else l_max
    scores: dict[tuple[int, ...], float] = {}
    for seq, logp in enumerate_terminated(ebm.base, l_max):
        if ebm.accepts(seq):
            scores[seq.ids] = math.exp(logp)
    z = math.fsum(scores.values())
    if z <= 0:
        raise ValueError("EBM has empty support at this l_max")
    return {ids: s / z for ids, s in scores.items()}


def export_p_csv(table: dict[tuple[int, ...], float], vocab: Vocab,
                 path: Path) -> None:
    rows = sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", "probability"])
        for ids, prob in rows:
            w.writerow([detokenize(vocab, TokenSeq(ids)), repr(prob)])


def estimate_Z(ebm: Ebm, proposal, n: int,
               rng: np.random.Generator) -> PartitionEstimate:
    """Importance-sampled Z = mean of P(x)/proposal(x) over x ~ proposal.

    With proposal = a the ratio collapses to b(x) and this is the empirical
    compilability rate.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    seqs = proposal.sample_batch(rng, n, ebm.l_max)
    weights = importance_weights(ebm, proposal, seqs)
    value = float(weights.mean())
    stderr = float(weights.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return PartitionEstimate(value=min(value, 1.0), mode="monte-carlo",
                             n=n, stderr=stderr)


def importance_weights(ebm: Ebm, proposal, seqs: list[TokenSeq]) -> np.ndarray:
    """P(x)/proposal(x) per sequence; exactly 0 where the scorer rejects."""
    weights = np.zeros(len(seqs))
    accepted = [i for i, s in enumerate(seqs) if ebm.accepts(s)]
    if accepted:
        kept = [seqs[i] for i in accepted]
        log_p = ebm.base.logprob_batch(kept)
        log_q = proposal.logprob_batch(kept)
        weights[accepted] = np.exp(log_p - log_q)
    return weights


def filter_sample(ebm: Ebm, rng: np.random.Generator,
                  budget: int = 1000) -> TokenSeq:
    """Draw from a until the scorer accepts; exact sampling from p."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    for _ in range(budget):
        seq = ebm.base.sample(rng, ebm.l_max)
        if ebm.accepts(seq):
            return seq
    raise BudgetExhaustedError(f"no accepted sample in {budget} attempts")


def filter_sample_many(ebm: Ebm, rng: np.random.Generator, n: int,
                       max_draws: int = 10 ** 7,
                       chunk: int = 4096) -> list[TokenSeq]:
    """Batched rejection sampling until n accepted samples."""
    out: list[TokenSeq] = []
    drawn = 0
    while len(out) < n:
        if drawn >= max_draws:
            raise BudgetExhaustedError(
                f"only {len(out)}/{n} accepted after {drawn} draws")
        batch = ebm.base.sample_batch(rng, chunk, ebm.l_max)
        drawn += chunk
        for s in batch:
            if ebm.accepts(s):
                out.append(s)
                if len(out) == n:
                    break
    return out
