"""Grammar-sampled MiniLang corpora: generation, corruption, splits, files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .lang import TokenSeq, Vocab, compile_check, detokenize, tokenize


class RetriesExhaustedError(RuntimeError):
    pass


def _normalized(weights, size: int, name: str) -> np.ndarray:
    w = np.asarray(weights if weights is not None else np.ones(size), dtype=float)
    if w.shape != (size,):
        raise ValueError(f"{name} must have {size} entries")
    if not np.all(np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"{name} must be finite, nonnegative, normalizable")
    return w / w.sum()


@dataclass
class GenConfig:
    """Knobs of the stochastic leftmost grammar expansion.

    Continuation probabilities decide whether `expr`/`term` keep extending;
    the *_weights vectors weight the alternatives of each production (None
    means uniform).  p_corrupt applies one random edit to that fraction of
    generated programs, which is the lever for degrading compilability.
    """

    seed: int = 0
    max_stmts: int = 3
    max_depth: int = 3
    l_max: int = 24
    p_corrupt: float = 0.0
    corrupt_ops: tuple[str, ...] = ("drop", "duplicate", "substitute", "swap")
    stmt_weights: Optional[tuple[float, ...]] = None   # over 1..max_stmts
    more_terms: float = 0.3        # extend expr with ('+'|'-') term
    more_factors: float = 0.2      # extend term with ('*'|'/') factor
    # when set, top-level expressions draw their term count from this vector
    # (over 1..len) instead of the geometric more_terms rule; nested
    # parenthesized expressions always use the geometric rule
    term_count_weights: Optional[tuple[float, ...]] = None
    factor_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)  # NUM, IDENT, paren
    ident_weights: Optional[tuple[float, ...]] = None
    num_weights: Optional[tuple[float, ...]] = None
    addop_weights: Optional[tuple[float, ...]] = None  # over '+', '-'
    mulop_weights: Optional[tuple[float, ...]] = None  # over '*', '/'
    max_retries: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.p_corrupt <= 1.0:
            raise ValueError("p_corrupt must be in [0, 1]")
        for p in (self.more_terms, self.more_factors):
            if not (np.isfinite(p) and 0.0 <= p <= 1.0):
                raise ValueError("continuation probabilities must be in [0, 1]")
        unknown = set(self.corrupt_ops) - {"drop", "duplicate", "substitute", "swap"}
        if unknown:
            raise ValueError(f"unknown corruption ops: {sorted(unknown)}")


@dataclass
class Dataset:
    """Disjoint train/test splits; the empirical role of p*(x).

    The test split doubles as the held-out sample of the data distribution
    that perplexity is measured against.
    """

    train: list[TokenSeq]
    test: list[TokenSeq]
    manifest: dict = field(default_factory=dict)


class _Productions:
    """Vocabulary-resolved production alternatives with normalized weights."""

    def __init__(self, vocab: Vocab, config: GenConfig):
        self.idents = np.array(vocab.ids_of_class("IDENT"), dtype=int)
        self.nums = np.array(vocab.ids_of_class("NUM"), dtype=int)
        addops = vocab.ids_of_class("+") + vocab.ids_of_class("-")
        mulops = vocab.ids_of_class("*") + vocab.ids_of_class("/")
        self.addops = np.array(addops, dtype=int)
        self.mulops = np.array(mulops, dtype=int)
        eq = vocab.ids_of_class("=")
        semi = vocab.ids_of_class(";")
        if len(self.idents) == 0 or len(eq) != 1 or len(semi) != 1:
            raise ValueError("vocabulary cannot form a statement")
        self.eq = eq[0]
        self.semi = semi[0]
        lp, rp = vocab.ids_of_class("("), vocab.ids_of_class(")")
        self.parens = (lp[0], rp[0]) if lp and rp else None

        self.stmt_w = _normalized(config.stmt_weights, config.max_stmts,
                                  "stmt_weights")
        self.term_count_w = None
        if config.term_count_weights is not None:
            self.term_count_w = _normalized(
                config.term_count_weights, len(config.term_count_weights),
                "term_count_weights")
            if len(self.addops) == 0 and len(self.term_count_w) > 1:
                raise ValueError("term_count_weights needs additive operators")
        self.ident_w = _normalized(config.ident_weights, len(self.idents),
                                   "ident_weights")
        self.num_w = (_normalized(config.num_weights, len(self.nums), "num_weights")
                      if len(self.nums) else None)
        self.addop_w = (_normalized(config.addop_weights, len(self.addops),
                                    "addop_weights") if len(self.addops) else None)
        self.mulop_w = (_normalized(config.mulop_weights, len(self.mulops),
                                    "mulop_weights") if len(self.mulops) else None)

        fw = np.asarray(config.factor_weights, dtype=float)
        if len(self.nums) == 0:
            fw = fw * np.array([0.0, 1.0, 1.0])
        if self.parens is None:
            fw = fw * np.array([1.0, 1.0, 0.0])
        self.factor_w = _normalized(fw, 3, "factor_weights")
        fw_flat = self.factor_w * np.array([1.0, 1.0, 0.0])
        if fw_flat.sum() <= 0:
            raise ValueError("factor weights leave no leaf alternative")
        self.factor_w_leaf = fw_flat / fw_flat.sum()


def generate_program(rng: np.random.Generator, vocab: Vocab,
                     config: GenConfig) -> TokenSeq:
    """One grammar-derived program; always compiles and fits l_max."""
    prods = _Productions(vocab, config)
    for _ in range(config.max_retries):
        body = _expand_program(rng, prods, config)
        if len(body) + 2 <= config.l_max:
            return vocab.make_seq(body)
    raise RetriesExhaustedError(
        f"no program fit l_max={config.l_max} in {config.max_retries} tries")


def _expand_program(rng, prods: _Productions, config: GenConfig) -> list[int]:
    n_stmts = 1 + rng.choice(config.max_stmts, p=prods.stmt_w)
    body: list[int] = []
    for _ in range(n_stmts):
        body.append(rng.choice(prods.idents, p=prods.ident_w))
        body.append(prods.eq)
        _expand_expr(rng, prods, config, body, depth=0)
        body.append(prods.semi)
    return body


def _expand_expr(rng, prods, config, out: list, depth: int) -> None:
    if depth == 0 and prods.term_count_w is not None:
        n_terms = 1 + rng.choice(len(prods.term_count_w), p=prods.term_count_w)
        _expand_term(rng, prods, config, out, depth)
        for _ in range(n_terms - 1):
            out.append(rng.choice(prods.addops, p=prods.addop_w))
            _expand_term(rng, prods, config, out, depth)
        return
    _expand_term(rng, prods, config, out, depth)
    while len(prods.addops) and rng.random() < config.more_terms:
        out.append(rng.choice(prods.addops, p=prods.addop_w))
        _expand_term(rng, prods, config, out, depth)


def _expand_term(rng, prods, config, out: list, depth: int) -> None:
    _expand_factor(rng, prods, config, out, depth)
    while len(prods.mulops) and rng.random() < config.more_factors:
        out.append(rng.choice(prods.mulops, p=prods.mulop_w))
        _expand_factor(rng, prods, config, out, depth)


def _expand_factor(rng, prods, config, out: list, depth: int) -> None:
    w = prods.factor_w if depth < config.max_depth else prods.factor_w_leaf
    alt = rng.choice(3, p=w)
    if alt == 0:
        out.append(rng.choice(prods.nums, p=prods.num_w))
    elif alt == 1:
        out.append(rng.choice(prods.idents, p=prods.ident_w))
    else:
        lp, rp = prods.parens
        out.append(lp)
        _expand_expr(rng, prods, config, out, depth + 1)
        out.append(rp)


def corrupt(rng: np.random.Generator, vocab: Vocab, seq: TokenSeq,
            config: GenConfig) -> TokenSeq:
    """Apply exactly one random enabled edit at a random interior position.

    Degenerate cases return the sequence unchanged: no interior tokens, a
    swap with no adjacent interior pair, or a duplicate that would overflow
    l_max.  BOS/EOS are never touched and never introduced.
    """
    if not config.corrupt_ops:
        raise ValueError("at least one corruption op must be enabled")
    ids = list(seq.ids)
    interior = list(range(1, len(ids) - 1)) if seq.has_eos(vocab) \
        else list(range(1, len(ids)))
    op = config.corrupt_ops[rng.integers(len(config.corrupt_ops))]
    if not interior:
        return seq
    if op == "swap":
        pairs = [p for p in interior if p + 1 in interior]
        if not pairs:
            return seq
        p = pairs[rng.integers(len(pairs))]
        ids[p], ids[p + 1] = ids[p + 1], ids[p]
        return TokenSeq(tuple(ids))
    p = interior[rng.integers(len(interior))]
    if op == "drop":
        del ids[p]
    elif op == "duplicate":
        if len(ids) + 1 > config.l_max:
            return seq
        ids.insert(p, ids[p])
    elif op == "substitute":
        choices = [i for i in vocab.body_ids if i != ids[p]]
        ids[p] = choices[rng.integers(len(choices))]
    return TokenSeq(tuple(ids))


def _item_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def build_dataset(vocab: Vocab, config: GenConfig, n_train: int,
                  n_test: int) -> Dataset:
    """n_train+n_test unique programs, independently corrupted, split disjointly.

    Each item draws from its own (seed, index)-derived substream, so the
    dataset is a pure function of (seed, config, n_train, n_test) and items
    are independent of generation scheduling.
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError("n_train and n_test must be positive")
    total = n_train + n_test
    seen: set[tuple[int, ...]] = set()
    items: list[TokenSeq] = []
    for i in range(total):
        rng = _item_rng(config.seed, i)
        for _ in range(config.max_retries):
            seq = generate_program(rng, vocab, config)
            if config.p_corrupt > 0 and rng.random() < config.p_corrupt:
                seq = corrupt(rng, vocab, seq, config)
            if seq.ids not in seen:
                seen.add(seq.ids)
                items.append(seq)
                break
        else:
            raise RetriesExhaustedError(
                f"could not draw a {len(seen) + 1}-th unique program")
    manifest = {
        "seed": config.seed,
        "config": _config_echo(config),
        "n_train": n_train,
        "n_test": n_test,
    }
    return Dataset(train=items[:n_train], test=items[n_train:], manifest=manifest)


def _config_echo(config: GenConfig) -> dict:
    echo = asdict(config)
    for k, v in echo.items():
        if isinstance(v, tuple):
            echo[k] = list(v)
    return echo


def dataset_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_dataset(dataset: Dataset, vocab: Vocab, out_dir: Path) -> dict:
    """Plain-text splits (one program per line, no BOS/EOS) plus manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, split in (("train.txt", dataset.train), ("test.txt", dataset.test)):
        p = out_dir / name
        p.write_text("".join(detokenize(vocab, s) + "\n" for s in split))
        digests[name] = dataset_digest(p)
    manifest = dict(dataset.manifest)
    manifest["digests"] = digests
    manifest["vocab"] = list(vocab.tokens)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(vocab: Vocab, in_dir: Path, verify: bool = True) -> Dataset:
    in_dir = Path(in_dir)
    manifest = json.loads((in_dir / "manifest.json").read_text())
    splits = {}
    for name in ("train.txt", "test.txt"):
        p = in_dir / name
        if verify and manifest.get("digests", {}).get(name) != dataset_digest(p):
            raise ValueError(f"digest mismatch for {p}")
        lines = p.read_text().splitlines()
        splits[name] = [tokenize(vocab, line) for line in lines]
    return Dataset(train=splits["train.txt"], test=splits["test.txt"],
                   manifest=manifest)


def compilable_fraction(vocab: Vocab, seqs: list[TokenSeq]) -> float:
    if not seqs:
        return 0.0
    return sum(compile_check(vocab, s).ok for s in seqs) / len(seqs)
