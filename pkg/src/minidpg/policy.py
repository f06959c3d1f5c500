"""Autoregressive token policies with hand-derived gradients.

Two parametrizations share one contract: a fixed-window neural net
(embedding -> tanh hidden layer -> softmax) and a tabular k-gram softmax
whose logits are indexed directly by context.  Everything runs in float64
numpy; gradients are exact backpropagation, no autograd framework.

BOS is masked out of every next-token distribution.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import Dataset
from .lang import TokenSeq, Vocab

_NEG_INF = -np.inf


class MissingEosError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass
class MleConfig:
    """Adam-based maximum-likelihood pretraining settings."""

    kind: str = "neural"           # "neural" | "tabular"
    k: int = 8                     # context window (neural)
    d: int = 16                    # embedding width
    h: int = 64                    # hidden width
    order: int = 1                 # context length (tabular); 2-gram = 1
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


class _PolicyBase:
    """Shared sequence-level machinery over a `_logits(contexts)` core."""

    vocab: Vocab
    params: dict[str, np.ndarray]

    # -- to be provided by subclasses -------------------------------------
    def _context_width(self) -> int:
        raise NotImplementedError

    def _logits(self, contexts: np.ndarray) -> np.ndarray:
        """contexts: (N, width) int ids -> (N, V) masked logits."""
        raise NotImplementedError

    def _backward(self, contexts: np.ndarray, dlogits: np.ndarray,
                  grads: dict[str, np.ndarray]) -> None:
        raise NotImplementedError

    def clone(self):
        raise NotImplementedError

    # -- shared ------------------------------------------------------------
    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def _contexts_of(self, ids: Sequence[int]) -> np.ndarray:
        """One context row per predicted position 1..len(ids)-1 plus the
        continuation context (used by the sampler)."""
        width = self._context_width()
        bos = self.vocab.bos_id
        padded = [bos] * width + list(ids)
        rows = [padded[t:t + width] for t in range(1, len(ids) + 1)]
        return np.asarray(rows, dtype=np.int64)

    def next_dist(self, context: Sequence[int]) -> np.ndarray:
        """Distribution over the next token given the ids emitted so far.

        `context` is the sequence prefix including BOS; only the last
        window/order tokens matter.
        """
        width = self._context_width()
        bos = self.vocab.bos_id
        ctx = ([bos] * width + list(context))[-width:]
        logits = self._logits(np.asarray([ctx], dtype=np.int64))
        return _softmax(logits)[0]

    def _position_logprobs(self, seqs: list[TokenSeq]):
        """Flattened (contexts, targets, seq_index) across all sequences."""
        ctx_rows, targets, owners = [], [], []
        for j, seq in enumerate(seqs):
            ids = seq.ids
            ctxs = self._contexts_of(ids)[:len(ids) - 1]
            ctx_rows.append(ctxs)
            targets.extend(ids[1:])
            owners.extend([j] * (len(ids) - 1))
        contexts = np.concatenate(ctx_rows, axis=0) if ctx_rows else \
            np.zeros((0, self._context_width()), dtype=np.int64)
        return contexts, np.asarray(targets, dtype=np.int64), \
            np.asarray(owners, dtype=np.int64)

    def logprob_batch(self, seqs: list[TokenSeq],
                      require_eos: bool = True) -> np.ndarray:
        if require_eos:
            for s in seqs:
                if not s.has_eos(self.vocab):
                    raise MissingEosError("sequence does not end with EOS")
        contexts, targets, owners = self._position_logprobs(seqs)
        if len(targets) == 0:
            return np.zeros(len(seqs))
        logp = _log_softmax(self._logits(contexts))
        token_lp = logp[np.arange(len(targets)), targets]
        out = np.zeros(len(seqs))
        np.add.at(out, owners, token_lp)
        return out

    def logprob(self, seq: TokenSeq) -> float:
        """Natural-log probability of an EOS-terminated sequence."""
        return float(self.logprob_batch([seq])[0])

    def logprob_prefix(self, seq: TokenSeq) -> float:
        """Prefix log-probability; no EOS required (truncated samples)."""
        return float(self.logprob_batch([seq], require_eos=False)[0])

    def weighted_grad_batch(self, seqs: list[TokenSeq],
                            weights: Sequence[float],
                            require_eos: bool = True) -> dict[str, np.ndarray]:
        """(1/B) * sum_i w_i * d log pi(x_i) / d theta.

        Sequences with weight exactly 0 are dropped before any arithmetic,
        so they contribute true zeros.
        """
        weights = np.asarray(weights, dtype=float)
        if len(weights) != len(seqs):
            raise ValueError("one weight per sequence required")
        batch = len(seqs)
        keep = [i for i, w in enumerate(weights) if w != 0.0]
        grads = self.zero_grads()
        if not keep:
            return grads
        kept = [seqs[i] for i in keep]
        if require_eos:
            for s in kept:
                if not s.has_eos(self.vocab):
                    raise MissingEosError("sequence does not end with EOS")
        contexts, targets, owners = self._position_logprobs(kept)
        probs = _softmax(self._logits(contexts))
        w_tok = weights[keep][owners] / batch
        dlogits = -probs * w_tok[:, None]
        dlogits[np.arange(len(targets)), targets] += w_tok
        self._backward(contexts, dlogits, grads)
        return grads

    def grad_logprob(self, seq: TokenSeq) -> dict[str, np.ndarray]:
        """Exact gradient of logprob(seq) with respect to every parameter."""
        return self.weighted_grad_batch([seq], [1.0])

    def step_inplace(self, grads: dict[str, np.ndarray], alpha: float) -> None:
        for k in self.params:
            self.params[k] += alpha * grads[k]

    def flat(self, arrays: Optional[dict[str, np.ndarray]] = None) -> np.ndarray:
        arrays = self.params if arrays is None else arrays
        return np.concatenate([arrays[k].ravel() for k in sorted(arrays)])

    def sample_batch(self, rng: np.random.Generator, n: int, l_max: int,
                     prompt: Optional[Sequence[int]] = None) -> list[TokenSeq]:
        """Vectorized ancestral sampling; stops at EOS or l_max tokens."""
        bos, eos = self.vocab.bos_id, self.vocab.eos_id
        prompt = list(prompt) if prompt else []
        if any(p in (bos, eos) for p in prompt):
            raise ValueError("prompt must not contain BOS/EOS")
        if len(prompt) + 2 > l_max:
            raise ValueError("prompt leaves no room before l_max")
        width = self._context_width()
        rows = np.full((n, l_max), bos, dtype=np.int64)
        rows[:, 1:1 + len(prompt)] = prompt
        lengths = np.full(n, 1 + len(prompt))
        active = np.arange(n)
        pos = 1 + len(prompt)
        while active.size and pos < l_max:
            start = max(0, pos - width)
            ctx = rows[active, start:pos]
            if ctx.shape[1] < width:
                pad = np.full((active.size, width - ctx.shape[1]), bos,
                              dtype=np.int64)
                ctx = np.concatenate([pad, ctx], axis=1)
            probs = _softmax(self._logits(ctx))
            u = rng.random(active.size)
            choice = (probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)
            rows[active, pos] = choice
            lengths[active] = pos + 1
            active = active[choice != eos]
            pos += 1
        return [TokenSeq(tuple(int(t) for t in rows[i, :lengths[i]]))
                for i in range(n)]

    def sample(self, rng: np.random.Generator, l_max: int,
               prompt: Optional[Sequence[int]] = None) -> TokenSeq:
        return self.sample_batch(rng, 1, l_max, prompt)[0]


class NeuralPolicy(_PolicyBase):
    """Fixed-window embedding + one tanh hidden layer + softmax head."""

    kind = "neural"

    def __init__(self, vocab: Vocab, k: int = 8, d: int = 16, h: int = 64,
                 params: Optional[dict[str, np.ndarray]] = None,
                 seed: int = 0):
        self.vocab = vocab
        self.k, self.d, self.h = k, d, h
        v = len(vocab)
        if params is None:
            rng = np.random.default_rng(seed)
            def u(shape, fan_in):
                s = 1.0 / np.sqrt(fan_in)
                return rng.uniform(-s, s, size=shape)
            params = {
                "emb": u((v, d), d),
                "w1": u((k * d, h), k * d),
                "b1": np.zeros(h),
                "w2": u((h, v), h),
                "b2": np.zeros(v),
            }
        self.params = {k_: np.asarray(a, dtype=np.float64)
                       for k_, a in params.items()}
        self._check_shapes()

    def _check_shapes(self):
        v = len(self.vocab)
        expected = {"emb": (v, self.d), "w1": (self.k * self.d, self.h),
                    "b1": (self.h,), "w2": (self.h, v), "b2": (v,)}
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, "
                                 f"expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise ValueError(f"{name} contains non-finite entries")

    def _context_width(self) -> int:
        return self.k

    def _forward(self, contexts: np.ndarray):
        e = self.params["emb"][contexts].reshape(contexts.shape[0], -1)
        hpre = e @ self.params["w1"] + self.params["b1"]
        hact = np.tanh(hpre)
        logits = hact @ self.params["w2"] + self.params["b2"]
        logits[:, self.vocab.bos_id] = _NEG_INF
        return e, hact, logits

    def _logits(self, contexts: np.ndarray) -> np.ndarray:
        return self._forward(contexts)[2]

    def _backward(self, contexts, dlogits, grads):
        e, hact, _ = self._forward(contexts)
        dlogits = dlogits.copy()
        dlogits[:, self.vocab.bos_id] = 0.0
        grads["w2"] += hact.T @ dlogits
        grads["b2"] += dlogits.sum(axis=0)
        dh = dlogits @ self.params["w2"].T
        dpre = (1.0 - hact * hact) * dh
        grads["w1"] += e.T @ dpre
        grads["b1"] += dpre.sum(axis=0)
        de = (dpre @ self.params["w1"].T).reshape(contexts.shape[0], self.k,
                                                  self.d)
        np.add.at(grads["emb"], contexts.reshape(-1),
                  de.reshape(-1, self.d))

    def clone(self) -> "NeuralPolicy":
        return NeuralPolicy(self.vocab, self.k, self.d, self.h,
                            params={k: v.copy() for k, v in self.params.items()})


class TabularPolicy(_PolicyBase):
    """k-gram softmax with one logit row per context tuple (default 2-gram)."""

    kind = "tabular"

    def __init__(self, vocab: Vocab, order: int = 1,
                 params: Optional[dict[str, np.ndarray]] = None,
                 seed: int = 0, init_scale: float = 0.5):
        self.vocab = vocab
        self.order = order
        v = len(vocab)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {"table": rng.uniform(-init_scale, init_scale,
                                           size=(v ** order, v))}
        self.params = {k: np.asarray(a, dtype=np.float64)
                       for k, a in params.items()}
        if self.params["table"].shape != (v ** order, v):
            raise ValueError("table shape inconsistent with vocab and order")

    def _context_width(self) -> int:
        return self.order

    def _row_index(self, contexts: np.ndarray) -> np.ndarray:
        v = len(self.vocab)
        idx = np.zeros(contexts.shape[0], dtype=np.int64)
        for j in range(self.order):
            idx = idx * v + contexts[:, j]
        return idx

    def _logits(self, contexts: np.ndarray) -> np.ndarray:
        logits = self.params["table"][self._row_index(contexts)].copy()
        logits[:, self.vocab.bos_id] = _NEG_INF
        return logits

    def _backward(self, contexts, dlogits, grads):
        dlogits = dlogits.copy()
        dlogits[:, self.vocab.bos_id] = 0.0
        np.add.at(grads["table"], self._row_index(contexts), dlogits)

    def clone(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab, self.order,
                             params={"table": self.params["table"].copy()})


def init_policy(vocab: Vocab, config: MleConfig):
    if config.kind == "neural":
        return NeuralPolicy(vocab, config.k, config.d, config.h,
                            seed=config.seed)
    if config.kind == "tabular":
        return TabularPolicy(vocab, config.order, seed=config.seed)
    raise ValueError(f"unknown policy kind {config.kind!r}")


def train_base(dataset: Dataset, config: MleConfig, vocab: Vocab):
    """Adam minimization of mean negative logprob over the train split.

    Returns (policy, per_epoch_losses).  Zero epochs returns the seeded
    initialization unchanged.
    """
    if not dataset.train:
        raise ValueError("train split is empty")
    policy = init_policy(vocab, config)
    rng = np.random.default_rng(config.seed + 1)
    m = policy.zero_grads()
    v = policy.zero_grads()
    step = 0
    losses: list[float] = []
    n = len(dataset.train)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, config.batch_size):
            batch = [dataset.train[i] for i in order[lo:lo + config.batch_size]]
            lps = policy.logprob_batch(batch)
            loss = -lps.mean()
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"loss diverged at step {step}")
            epoch_loss += loss * len(batch)
            grads = policy.weighted_grad_batch(batch,
                                               np.ones(len(batch)))
            step += 1
            for key in policy.params:
                g = -grads[key]   # descend on NLL
                m[key] = config.beta1 * m[key] + (1 - config.beta1) * g
                v[key] = config.beta2 * v[key] + (1 - config.beta2) * g * g
                mhat = m[key] / (1 - config.beta1 ** step)
                vhat = v[key] / (1 - config.beta2 ** step)
                policy.params[key] -= config.lr * mhat / (np.sqrt(vhat)
                                                          + config.eps)
        losses.append(epoch_loss / n)
    return policy, losses


# ---------------------------------------------------------------------------
# checkpoint container: MAGIC | header-length | JSON header | '<f8' payload
# ---------------------------------------------------------------------------

_MAGIC = b"MDPGCKPT"
_VERSION = 1


def save_checkpoint(policy, path: Path) -> None:
    names = sorted(policy.params)
    header = {
        "version": _VERSION,
        "kind": policy.kind,
        "vocab": list(policy.vocab.tokens),
        "bos_id": policy.vocab.bos_id,
        "eos_id": policy.vocab.eos_id,
        "hyper": ({"k": policy.k, "d": policy.d, "h": policy.h}
                  if policy.kind == "neural" else {"order": policy.order}),
        "arrays": [{"name": n, "shape": list(policy.params[n].shape)}
                   for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(policy.params[n],
                                         dtype="<f8").tobytes())


def load_checkpoint(path: Path):
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointError("not a policy checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode())
    if header.get("version") != _VERSION:
        raise CheckpointError(f"unsupported version {header.get('version')}")
    vocab = Vocab(tokens=tuple(header["vocab"]), bos_id=header["bos_id"],
                  eos_id=header["eos_id"])
    offset = 16 + hlen
    params = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError("payload shorter than declared shapes")
        params[spec["name"]] = np.frombuffer(
            raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError("payload longer than declared shapes")
    hyper = header["hyper"]
    if header["kind"] == "neural":
        return NeuralPolicy(vocab, hyper["k"], hyper["d"], hyper["h"],
                            params=params)
    if header["kind"] == "tabular":
        return TabularPolicy(vocab, hyper["order"], params=params)
    raise CheckpointError(f"unknown policy kind {header['kind']!r}")
