"""Fine-tuning loops: adaptive distributional policy gradients and Reinforce.

The KL-DPG update pushes theta along mean[(P(x)/q(x)) * grad log pi(x)] with
x drawn from a frozen proposal q; q is refreshed to the current policy
whenever the policy gets strictly closer to the normalized target p than q
is, measured by forward KL on a shared sample batch with a shared partition
estimate (a paired comparison, which keeps the swap test from flapping).

Reinforce maximizes expected reward (R = b or R = P) on-policy, with no
baseline by default.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import metrics
from .corpus import Dataset
from .ebm import Ebm, exact_p, enumerate_terminated, importance_weights
from .lang import TokenSeq

METHODS = ("kldpg", "reinforce-b", "reinforce-p")


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, message: str, policy=None, trace=None):
        super().__init__(message)
        self.policy = policy
        self.trace = trace


class DegenerateZError(ZeroDivisionError):
    pass


@dataclass
class TuneConfig:
    method: str = "kldpg"
    lr: float = 1e-3
    batch_size: int = 256
    updates: int = 250
    warmup: int = 20
    eval_interval: int = 10
    eval_samples: int = 500
    kl_samples: int = 2000
    seed: int = 0
    baseline: bool = False      # optional mean-baseline for Reinforce
    clip_norm: Optional[float] = 10.0
    exact: bool = False         # enumerate p/Z instead of estimating

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.updates < 0:
            raise ValueError("updates must be >= 0")
        for name in ("batch_size", "warmup", "eval_interval",
                     "eval_samples", "kl_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float = 0.0
    n: int = 0
    mode: str = "monte-carlo"


@dataclass
class StepInfo:
    grad_norm: float
    clipped: bool
    mean_weight: float


@dataclass
class TuneTrace:
    """Everything a Figure-style plot needs: metrics per evaluation plus
    per-update scalars and the proposal-swap bookkeeping."""

    method: str
    updates_at: list[int] = field(default_factory=list)
    records: list[metrics.MetricsRecord] = field(default_factory=list)
    forward_kl_q: list[Optional[float]] = field(default_factory=list)
    swap_updates: list[int] = field(default_factory=list)
    scalar_log: list[dict] = field(default_factory=list)
    clip_events: int = 0
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    aborted: Optional[str] = None


class _RunningMean:
    def __init__(self):
        self.total = 0.0
        self.sq_total = 0.0
        self.count = 0

    def add(self, values: np.ndarray) -> None:
        self.total += float(values.sum())
        self.sq_total += float((values ** 2).sum())
        self.count += len(values)

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    @property
    def stderr(self) -> float:
        if self.count < 2:
            return 0.0
        var = (self.sq_total - self.total ** 2 / self.count) / (self.count - 1)
        return math.sqrt(max(var, 0.0) / self.count)

    def reset(self) -> None:
        self.total = self.sq_total = 0.0
        self.count = 0


def _apply_ascent(policy, grads: dict[str, np.ndarray], alpha: float,
                  clip_norm: Optional[float]) -> StepInfo:
    """Apply theta += alpha * grads, bounding the applied step norm.

    The divergence guard clips the alpha-scaled step (not the raw
    gradient): reward scales differ by many orders of magnitude across
    methods, so only the actual parameter movement is a meaningful guard.
    """
    flat = policy.flat(grads)
    norm = float(np.linalg.norm(flat))
    if not np.isfinite(norm):
        raise NonFiniteGradientError("gradient is not finite")
    step_norm = alpha * norm
    clipped = False
    if clip_norm is not None and step_norm > clip_norm:
        alpha = alpha * (clip_norm / step_norm)
        clipped = True
    policy.step_inplace(grads, alpha)
    return StepInfo(grad_norm=norm, clipped=clipped, mean_weight=0.0)


def kldpg_step(pi, q, ebm: Ebm, batch: list[TokenSeq], alpha: float,
               clip_norm: Optional[float] = None) -> StepInfo:
    """theta += alpha * mean[(P(x)/q(x)) grad log pi(x)] over x ~ q.

    Ratios are formed in log space; rejected sequences contribute exact
    zeros (their gradients are never computed).
    """
    w = importance_weights(ebm, q, batch)
    grads = pi.weighted_grad_batch(batch, w)
    info = _apply_ascent(pi, grads, alpha, clip_norm)
    info.mean_weight = float(w.mean())
    return info


def kldpg_expected_direction(pi, ebm: Ebm,
                             l_max: Optional[int] = None) -> np.ndarray:
    """Enumerated sum_x P(x) grad log pi(x): the exact ascent direction,
    proportional to the negative forward-KL gradient."""
    l_max = ebm.l_max if l_max is None else l_max
    total = None
    for seq, logp in enumerate_terminated(ebm.base, l_max):
        if not ebm.accepts(seq):
            continue
        g = pi.flat(pi.grad_logprob(seq))
        total = g * math.exp(logp) if total is None else total + g * math.exp(logp)
    if total is None:
        raise ValueError("EBM support is empty")
    return total


def reinforce_step(pi, reward: Callable[[TokenSeq], float],
                   batch: list[TokenSeq], alpha: float,
                   clip_norm: Optional[float] = None,
                   baseline: bool = False) -> StepInfo:
    """theta += alpha * mean[R(x) grad log pi(x)] over an on-policy batch."""
    r = np.asarray([reward(s) for s in batch], dtype=float)
    weights = r - r.mean() if baseline else r
    grads = pi.weighted_grad_batch(batch, weights, require_eos=False)
    info = _apply_ascent(pi, grads, alpha, clip_norm)
    info.mean_weight = float(r.mean())
    return info


def reinforce_expected_direction(pi, reward: Callable[[TokenSeq], float],
                                 l_max: int) -> np.ndarray:
    """Enumerated grad of E_pi[R] = sum_x pi(x) R(x) grad log pi(x).

    Truncated outcomes enter with their prefix probability; rewards of zero
    drop out exactly.
    """
    total = None
    for ids, logp, _terminated in enumerate_outcomes(pi, l_max):
        seq = TokenSeq(ids)
        r = reward(seq)
        if r == 0.0:
            continue
        g = pi.flat(pi.weighted_grad_batch([seq], [1.0], require_eos=False))
        contrib = g * (math.exp(logp) * r)
        total = contrib if total is None else total + contrib
    if total is None:
        raise ValueError("reward is zero everywhere")
    return total


def reward_b(ebm: Ebm) -> Callable[[TokenSeq], float]:
    return lambda seq: 1.0 if ebm.accepts(seq) else 0.0


def reward_P(ebm: Ebm) -> Callable[[TokenSeq], float]:
    return ebm.score


def enumerate_outcomes(policy, l_max: int):
    """Every sampling outcome: terminated sequences and l_max-length
    EOS-less prefixes, with logprobs under `policy`."""
    vocab = policy.vocab
    eos = vocab.eos_id
    body_ids = vocab.body_ids

    def walk(prefix: list[int], logp: float):
        # invariant: len(prefix) < l_max, so one more draw is possible
        with np.errstate(divide="ignore"):
            logdist = np.log(policy.next_dist(prefix))
        yield tuple(prefix + [eos]), logp + logdist[eos], True
        for t in body_ids:
            if logdist[t] == -math.inf:
                continue
            child = prefix + [t]
            child_logp = logp + logdist[t]
            if len(child) == l_max:
                yield tuple(child), child_logp, False
            else:
                yield from walk(child, child_logp)

    yield from walk([vocab.bos_id], 0.0)


def is_forward_kl(ebm: Ebm, z_estimate, pi, proposal, n: int,
                  rng: np.random.Generator) -> Estimate:
    """Importance-sampled D_KL(p || pi) with samples from `proposal`.

    (1/Z) * mean[(P(x)/q(x)) (log P(x) - log pi(x))] - log Z; rejected
    sequences contribute zero terms.  When z_estimate is None, Z is
    estimated from the same batch.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    batch = proposal.sample_batch(rng, n, ebm.l_max)
    w = importance_weights(ebm, proposal, batch)
    if z_estimate is None:
        z_hat = float(w.mean())
    else:
        z_hat = float(getattr(z_estimate, "value", z_estimate))
    return _forward_kl_from_weights(ebm, pi, batch, w, z_hat)


def _forward_kl_from_weights(ebm: Ebm, pi, batch: list[TokenSeq],
                             w: np.ndarray, z_hat: float) -> Estimate:
    if z_hat <= 0.0:
        raise DegenerateZError("partition estimate is zero")
    terms = np.zeros(len(batch))
    accepted = [i for i, wi in enumerate(w) if wi != 0.0]
    if accepted:
        kept = [batch[i] for i in accepted]
        log_p = ebm.base.logprob_batch(kept)
        log_pi = pi.logprob_batch(kept)
        terms[accepted] = w[accepted] * (log_p - log_pi)
    n = len(batch)
    value = float(terms.mean()) / z_hat - math.log(z_hat)
    stderr = float(terms.std(ddof=1) / math.sqrt(n)) / z_hat if n > 1 else 0.0
    return Estimate(value=value, stderr=stderr, n=n)


def forward_kl_exact(ebm: Ebm, pi,
                     table: Optional[dict] = None) -> Estimate:
    """Enumerated D_KL(p || pi) = sum_x p(x) (log p(x) - log pi(x))."""
    if table is None:
        table = exact_p(ebm)
    seqs = [TokenSeq(ids) for ids in table]
    probs = np.asarray([table[s.ids] for s in seqs])
    log_pi = pi.logprob_batch(seqs)
    with np.errstate(divide="ignore"):
        value = float(np.sum(probs * (np.log(probs) - log_pi)))
    return Estimate(value=value, stderr=0.0, n=len(seqs), mode="exact")


def reverse_kl(pi, base, n: int, rng: Optional[np.random.Generator] = None,
               l_max: int = 24,
               samples: Optional[list[TokenSeq]] = None) -> Estimate:
    """Monte-Carlo D_KL(pi || a) = mean[log pi(x) - log a(x)], x ~ pi.

    Truncated samples enter with prefix log-probabilities, which both
    models assign to the same event.
    """
    if samples is None:
        if n < 1:
            raise ValueError("need at least one sample")
        samples = pi.sample_batch(rng, n, l_max)
    log_pi = pi.logprob_batch(samples, require_eos=False)
    log_a = base.logprob_batch(samples, require_eos=False)
    diffs = log_pi - log_a
    n = len(samples)
    stderr = float(diffs.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Estimate(value=float(diffs.mean()), stderr=stderr, n=n)


def reverse_kl_exact(pi, base, l_max: int) -> Estimate:
    """Enumerated D_KL(pi || a) over terminated and truncated outcomes."""
    total = 0.0
    count = 0
    for ids, logp, _terminated in enumerate_outcomes(pi, l_max):
        seq = TokenSeq(ids)
        log_a = base.logprob_batch([seq], require_eos=False)[0]
        total += math.exp(logp) * (logp - log_a)
        count += 1
    return Estimate(value=total, stderr=0.0, n=count, mode="exact")


def tune(start, ebm: Ebm, config: TuneConfig,
         dataset: Optional[Dataset] = None):
    """Run one fine-tuning method from the pretrained base model.

    Returns (policy, trace).  The base model is `start`; the trained policy
    and (for kldpg) the proposal are independent clones.  Metrics are
    recorded at update 0, every eval_interval updates, and at the end.
    """
    rng = np.random.default_rng(config.seed)
    base = start
    pi = start.clone()
    q = start.clone()
    trace = TuneTrace(method=config.method, config=asdict(config))
    t0 = time.monotonic()

    p_table = exact_p(ebm) if config.exact else None
    z_pool = _RunningMean()

    if config.method == "reinforce-b":
        reward = reward_b(ebm)
    elif config.method == "reinforce-p":
        reward = reward_P(ebm)
    else:
        reward = None

    def evaluate_now(update_idx: int) -> None:
        nonlocal q
        swap = False
        d_pi = d_q = None
        if config.method == "kldpg":
            if config.exact:
                d_pi = forward_kl_exact(ebm, pi, table=p_table)
                d_q = forward_kl_exact(ebm, q, table=p_table)
            else:
                kl_batch = q.sample_batch(rng, config.kl_samples, ebm.l_max)
                w = importance_weights(ebm, q, kl_batch)
                z_pool.add(w)
                z_hat = z_pool.mean
                d_pi = _forward_kl_from_weights(ebm, pi, kl_batch, w, z_hat)
                d_q = _forward_kl_from_weights(ebm, q, kl_batch, w, z_hat)
        else:
            # on-policy methods: estimate against the fixed base proposal,
            # whose support always covers p's
            if config.exact:
                d_pi = forward_kl_exact(ebm, pi, table=p_table)
            else:
                kl_batch = base.sample_batch(rng, config.kl_samples, ebm.l_max)
                w = importance_weights(ebm, base, kl_batch)
                z_pool.add(w)
                d_pi = _forward_kl_from_weights(ebm, pi, kl_batch, w,
                                                z_pool.mean)
        rec = metrics.evaluate(pi, base, ebm, dataset, config.eval_samples,
                               rng, forward_kl=d_pi,
                               policy_tag=config.method)
        trace.updates_at.append(update_idx)
        trace.records.append(rec)
        trace.forward_kl_q.append(None if d_q is None else d_q.value)
        if config.method == "kldpg" and d_q is not None \
                and d_pi.value < d_q.value:
            q = pi.clone()
            z_pool.reset()
            trace.swap_updates.append(update_idx)

    evaluate_now(0)
    try:
        for t in range(1, config.updates + 1):
            alpha = config.lr * min(1.0, t / max(config.warmup, 1))
            if config.method == "kldpg":
                batch = q.sample_batch(rng, config.batch_size, ebm.l_max)
                info = kldpg_step(pi, q, ebm, batch, alpha,
                                  clip_norm=config.clip_norm)
            else:
                batch = pi.sample_batch(rng, config.batch_size, ebm.l_max)
                info = reinforce_step(pi, reward, batch, alpha,
                                      clip_norm=config.clip_norm,
                                      baseline=config.baseline)
            trace.clip_events += int(info.clipped)
            trace.scalar_log.append({"update": t,
                                     "mean_weight": info.mean_weight,
                                     "grad_norm": info.grad_norm,
                                     "clipped": int(info.clipped)})
            if t % config.eval_interval == 0 or t == config.updates:
                evaluate_now(t)
    except NonFiniteGradientError as e:
        trace.aborted = str(e)
        trace.wall_clock = time.monotonic() - t0
        raise NonFiniteGradientError(str(e), policy=pi, trace=trace) from None
    trace.wall_clock = time.monotonic() - t0
    return pi, trace


# ---------------------------------------------------------------------------
# trace persistence
# ---------------------------------------------------------------------------

TRACE_FIELDS = ("method", "update", "swap", "forward_kl_q") \
    + metrics.MetricsRecord.CSV_FIELDS


def save_trace_csv(trace: TuneTrace, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRACE_FIELDS)
        for i, upd in enumerate(trace.updates_at):
            swapped = int(upd in trace.swap_updates)
            fklq = trace.forward_kl_q[i]
            row = [trace.method, upd, swapped,
                   "" if fklq is None else repr(float(fklq))]
            row += trace.records[i].csv_values()
            w.writerow(row)


def save_trace_manifest(trace: TuneTrace, path: Path) -> None:
    doc = {
        "method": trace.method,
        "config": trace.config,
        "swap_updates": trace.swap_updates,
        "clip_events": trace.clip_events,
        "wall_clock_sec": trace.wall_clock,
        "aborted": trace.aborted,
        "evaluations": len(trace.records),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
