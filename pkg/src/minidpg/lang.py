"""MiniLang: a tiny assignment-expression language.

The grammar (full reference in GRAMMAR.md):

    program := stmt+
    stmt    := IDENT '=' expr ';'
    expr    := term (('+'|'-') term)*
    term    := factor (('*'|'/') factor)*
    factor  := NUM | IDENT | '(' expr ')'

Sequences are lists of token ids bracketed by BOS/EOS.  The recursive
descent checker reports the leftmost error with a five-way category, so
failure modes can be histogrammed stably.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

BOS_SURFACE = "<s>"
EOS_SURFACE = "</s>"

IDENT_SURFACES = ("x", "y", "z")
NUM_SURFACES = ("0", "1", "2")
OP_SURFACES = ("+", "-", "*", "/")
PUNCT_SURFACES = ("=", ";", "(", ")")

# token surface -> grammar class
_CLASS_OF = {s: "IDENT" for s in IDENT_SURFACES}
_CLASS_OF.update({s: "NUM" for s in NUM_SURFACES})
_CLASS_OF.update({s: s for s in OP_SURFACES + PUNCT_SURFACES})
_CLASS_OF[BOS_SURFACE] = "BOS"
_CLASS_OF[EOS_SURFACE] = "EOS"


class UnknownTokenError(ValueError):
    def __init__(self, surface: str, position: int):
        super().__init__(f"unknown token {surface!r} at position {position}")
        self.surface = surface
        self.position = position


class ParseError(ValueError):
    """Raised by parse() when the sequence does not derive from `program`."""

    def __init__(self, kind: "ErrorKind", position: int):
        super().__init__(f"{kind.value} at token {position}")
        self.kind = kind
        self.position = position


class SpawnFailureError(OSError):
    pass


class CheckTimeoutError(TimeoutError):
    pass


class ErrorKind(str, Enum):
    EMPTY = "Empty"
    UNEXPECTED_TOKEN = "UnexpectedToken"
    UNBALANCED_PAREN = "UnbalancedParen"
    MISSING_SEMICOLON = "MissingSemicolon"
    TRUNCATED = "Truncated"


ERROR_KINDS = tuple(ErrorKind)


@dataclass(frozen=True)
class Vocab:
    """Ordered token inventory with designated BOS/EOS ids."""

    tokens: tuple[str, ...]
    bos_id: int
    eos_id: int

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token surfaces must be unique")
        if any(not t for t in self.tokens):
            raise ValueError("token surfaces must be non-empty")
        if self.bos_id == self.eos_id:
            raise ValueError("BOS and EOS must have distinct ids")
        for i in (self.bos_id, self.eos_id):
            if not 0 <= i < len(self.tokens):
                raise ValueError("BOS/EOS id out of range")
        unknown = [t for t in self.tokens if t not in _CLASS_OF]
        if unknown:
            raise ValueError(f"surfaces outside the MiniLang inventory: {unknown}")

    @classmethod
    def default(cls) -> "Vocab":
        """The 16-token MiniLang vocabulary."""
        tokens = (BOS_SURFACE, EOS_SURFACE) + IDENT_SURFACES + NUM_SURFACES \
            + OP_SURFACES + PUNCT_SURFACES
        return cls(tokens=tokens, bos_id=0, eos_id=1)

    @classmethod
    def subset(cls, surfaces: Sequence[str]) -> "Vocab":
        """BOS/EOS plus the given MiniLang surfaces, in the given order."""
        return cls(tokens=(BOS_SURFACE, EOS_SURFACE) + tuple(surfaces),
                   bos_id=0, eos_id=1)

    @classmethod
    def tiny(cls) -> "Vocab":
        """Six tokens: enough for `x = 0 ;` style programs."""
        return cls.subset(("x", "=", "0", ";"))

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, surface: str) -> int:
        try:
            return self._index[surface]
        except KeyError:
            raise UnknownTokenError(surface, -1) from None

    def surface_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def token_class(self, token_id: int) -> str:
        return _CLASS_OF[self.tokens[token_id]]

    @property
    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_index_cache")
        if idx is None:
            idx = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_index_cache", idx)
        return idx

    @property
    def body_ids(self) -> tuple[int, ...]:
        """All ids except BOS and EOS."""
        return tuple(i for i in range(len(self.tokens))
                     if i not in (self.bos_id, self.eos_id))

    def ids_of_class(self, cls_name: str) -> tuple[int, ...]:
        return tuple(i for i in range(len(self.tokens))
                     if self.token_class(i) == cls_name)

    def make_seq(self, body: Sequence[int]) -> "TokenSeq":
        return TokenSeq((self.bos_id, *body, self.eos_id))

    def validate_seq(self, seq: "TokenSeq", l_max: Optional[int] = None) -> None:
        ids = seq.ids
        if not ids or ids[0] != self.bos_id:
            raise ValueError("sequence must start with BOS")
        if self.bos_id in ids[1:]:
            raise ValueError("BOS may appear only at position 0")
        if self.eos_id in ids[1:-1]:
            raise ValueError("EOS may appear only in final position")
        if any(not 0 <= i < len(self.tokens) for i in ids):
            raise ValueError("token id out of range")
        if l_max is not None and len(ids) > l_max:
            raise ValueError(f"sequence longer than L_max={l_max}")


@dataclass(frozen=True)
class TokenSeq:
    """A token-id sequence including the BOS/EOS brackets."""

    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)

    def body(self, vocab: Vocab) -> tuple[int, ...]:
        ids = self.ids[1:]
        if ids and ids[-1] == vocab.eos_id:
            ids = ids[:-1]
        return ids

    def has_eos(self, vocab: Vocab) -> bool:
        return len(self.ids) >= 1 and self.ids[-1] == vocab.eos_id


@dataclass(frozen=True)
class CompileResult:
    ok: bool
    error_kind: Optional[ErrorKind] = None
    error_position: Optional[int] = None

    def __post_init__(self):
        if self.ok != (self.error_kind is None):
            raise ValueError("ok=true iff error_kind absent")
        if (self.error_kind is None) != (self.error_position is None):
            raise ValueError("error_position present iff error_kind present")


@dataclass(frozen=True)
class Node:
    """AST node; kind is one of Program, Assign, BinOp, Num, Var."""

    kind: str
    children: tuple["Node", ...] = ()
    token: Optional[int] = None


@dataclass(frozen=True)
class LintReport:
    violations: tuple[tuple[str, int], ...]
    tokens_scanned: int

    def per_token_rate(self) -> float:
        if self.tokens_scanned == 0:
            return 0.0
        return len(self.violations) / self.tokens_scanned


def tokenize(vocab: Vocab, text: str) -> TokenSeq:
    """Whitespace-split surface tokens, bracketed by BOS/EOS."""
    body = []
    for pos, surface in enumerate(text.split()):
        idx = vocab._index.get(surface)
        if idx is None or idx in (vocab.bos_id, vocab.eos_id):
            raise UnknownTokenError(surface, pos)
        body.append(idx)
    return vocab.make_seq(body)


def detokenize(vocab: Vocab, seq: TokenSeq) -> str:
    return " ".join(vocab.surface_of(i) for i in seq.body(vocab))


class _Reject(Exception):
    def __init__(self, kind: ErrorKind, position: int):
        self.kind = kind
        self.position = position


def _parse_body(classes: list[str], body: tuple[int, ...], build: bool):
    """Shared recursive-descent core.

    Raises _Reject with the leftmost error; returns the Program node when
    build is true, else None.  Error positions index the body token list.
    """
    n = len(classes)

    def factor(pos: int, depth: int):
        if pos >= n:
            if depth > 0:
                raise _Reject(ErrorKind.UNBALANCED_PAREN, n)
            raise _Reject(ErrorKind.UNEXPECTED_TOKEN, n)
        c = classes[pos]
        if c == "NUM":
            return pos + 1, (Node("Num", token=body[pos]) if build else None)
        if c == "IDENT":
            return pos + 1, (Node("Var", token=body[pos]) if build else None)
        if c == "(":
            inner_pos, node = expr(pos + 1, depth + 1)
            if inner_pos >= n:
                raise _Reject(ErrorKind.UNBALANCED_PAREN, n)
            if classes[inner_pos] != ")":
                raise _Reject(ErrorKind.UNBALANCED_PAREN, inner_pos)
            return inner_pos + 1, node  # grouping parens create no node
        raise _Reject(ErrorKind.UNEXPECTED_TOKEN, pos)

    def term(pos: int, depth: int):
        pos, node = factor(pos, depth)
        while pos < n and classes[pos] in ("*", "/"):
            op = body[pos]
            pos, rhs = factor(pos + 1, depth)
            if build:
                node = Node("BinOp", children=(node, rhs), token=op)
        return pos, node

    def expr(pos: int, depth: int):
        pos, node = term(pos, depth)
        while pos < n and classes[pos] in ("+", "-"):
            op = body[pos]
            pos, rhs = term(pos + 1, depth)
            if build:
                node = Node("BinOp", children=(node, rhs), token=op)
        return pos, node

    if n == 0:
        raise _Reject(ErrorKind.EMPTY, 0)

    stmts = []
    pos = 0
    while pos < n:
        c = classes[pos]
        if c != "IDENT":
            kind = ErrorKind.UNBALANCED_PAREN if c == ")" \
                else ErrorKind.UNEXPECTED_TOKEN
            raise _Reject(kind, pos)
        target = Node("Var", token=body[pos]) if build else None
        pos += 1
        if pos >= n or classes[pos] != "=":
            if pos < n and classes[pos] == ")":
                raise _Reject(ErrorKind.UNBALANCED_PAREN, pos)
            raise _Reject(ErrorKind.UNEXPECTED_TOKEN, pos)
        pos += 1
        pos, rhs = expr(pos, 0)
        if pos >= n:
            raise _Reject(ErrorKind.MISSING_SEMICOLON, n)
        if classes[pos] == ")":
            raise _Reject(ErrorKind.UNBALANCED_PAREN, pos)
        if classes[pos] != ";":
            raise _Reject(ErrorKind.MISSING_SEMICOLON, pos)
        pos += 1
        if build:
            stmts.append(Node("Assign", children=(target, rhs)))
    return Node("Program", children=tuple(stmts)) if build else None


def compile_check(vocab: Vocab, seq: TokenSeq) -> CompileResult:
    """Binary compilability scorer; errors are data, not exceptions."""
    if not seq.has_eos(vocab):
        return CompileResult(False, ErrorKind.TRUNCATED, max(len(seq.ids) - 1, 0))
    body = seq.body(vocab)
    classes = [vocab.token_class(i) for i in body]
    try:
        _parse_body(classes, body, build=False)
    except _Reject as r:
        return CompileResult(False, r.kind, r.position)
    return CompileResult(True)


def parse(vocab: Vocab, seq: TokenSeq) -> Node:
    """The unique AST of a compilable sequence; ParseError otherwise."""
    if not seq.has_eos(vocab):
        raise ParseError(ErrorKind.TRUNCATED, max(len(seq.ids) - 1, 0))
    body = seq.body(vocab)
    classes = [vocab.token_class(i) for i in body]
    try:
        return _parse_body(classes, body, build=True)
    except _Reject as r:
        raise ParseError(r.kind, r.position) from None


def ast_node_count(ast: Node) -> int:
    return 1 + sum(ast_node_count(c) for c in ast.children)


def lint(vocab: Vocab, seq: TokenSeq) -> LintReport:
    """Best-effort token-stream style check.

    S1: redundant parentheses around a lone NUM/IDENT (reported at the '(').
    S2: an opening parenthesis at nesting depth > 3.
    S3: the same identifier assigned more than once (reported at the repeat).
    """
    body = seq.body(vocab)
    classes = [vocab.token_class(i) for i in body]
    n = len(body)
    violations: list[tuple[str, int]] = []
    depth = 0
    assigned: set[int] = set()
    for i, c in enumerate(classes):
        if c == "(":
            depth += 1
            if depth > 3:
                violations.append(("S2", i))
            if i + 2 < n and classes[i + 1] in ("NUM", "IDENT") \
                    and classes[i + 2] == ")":
                violations.append(("S1", i))
        elif c == ")":
            depth = max(depth - 1, 0)
        elif c == "IDENT" and i + 1 < n and classes[i + 1] == "=":
            if body[i] in assigned:
                violations.append(("S3", i))
            assigned.add(body[i])
    violations.sort(key=lambda v: (v[1], v[0]))
    return LintReport(violations=tuple(violations), tokens_scanned=n)


def external_check(command: Sequence[str], vocab: Vocab, seq: TokenSeq,
                   timeout_ms: int = 1000) -> CompileResult:
    """Delegate the compilability decision to an external program.

    The program text is fed on stdin; exit status 0 means compilable.
    Nonzero status maps to a generic UnexpectedToken at position 0.
    """
    text = detokenize(vocab, seq)
    try:
        proc = subprocess.run(list(command), input=text.encode(),
                              capture_output=True, timeout=timeout_ms / 1000.0)
    except (FileNotFoundError, PermissionError, NotADirectoryError) as e:
        raise SpawnFailureError(str(e)) from e
    except subprocess.TimeoutExpired as e:
        raise CheckTimeoutError(f"external check exceeded {timeout_ms} ms") from e
    if proc.returncode == 0:
        return CompileResult(True)
    return CompileResult(False, ErrorKind.UNEXPECTED_TOKEN, 0)


def grammar_oracle_language(vocab: Vocab, surfaces: Sequence[str],
                            max_len: int) -> set[tuple[int, ...]]:
    """Bottom-up enumeration of every derivable body up to max_len tokens.

    Independent of the recursive-descent checker: builds the token-string
    languages of factor/term/expr/stmt/program by length, straight from the
    production rules, and returns the program language as a set of id tuples.
    """
    ids = [vocab.id_of(s) for s in surfaces]
    idents = [i for i in ids if vocab.token_class(i) == "IDENT"]
    nums = [i for i in ids if vocab.token_class(i) == "NUM"]
    addops = [i for i in ids if vocab.token_class(i) in ("+", "-")]
    mulops = [i for i in ids if vocab.token_class(i) in ("*", "/")]
    by_class = {c: [i for i in ids if vocab.token_class(i) == c]
                for c in ("=", ";", "(", ")")}

    factor: dict[int, set[tuple[int, ...]]] = {l: set() for l in range(max_len + 1)}
    term: dict[int, set[tuple[int, ...]]] = {l: set() for l in range(max_len + 1)}
    expr: dict[int, set[tuple[int, ...]]] = {l: set() for l in range(max_len + 1)}

    for i in idents + nums:
        if max_len >= 1:
            factor[1].add((i,))

    # grow the three mutually recursive languages to a fixed point
    changed = True
    while changed:
        changed = False
        for l in range(1, max_len + 1):
            before = len(term[l]) + len(expr[l]) + len(factor[l])
            # term := factor | term mulop factor
            term[l] |= factor[l]
            for l1 in range(1, l - 1):
                for t in term[l1]:
                    for f in factor[l - l1 - 1]:
                        for op in mulops:
                            term[l].add(t + (op,) + f)
            # expr := term | expr addop term
            expr[l] |= term[l]
            for l1 in range(1, l - 1):
                for e in expr[l1]:
                    for t in term[l - l1 - 1]:
                        for op in addops:
                            expr[l].add(e + (op,) + t)
            # factor := '(' expr ')'
            if l >= 3 and by_class["("] and by_class[")"]:
                for e in expr[l - 2]:
                    for lp in by_class["("]:
                        for rp in by_class[")"]:
                            factor[l].add((lp,) + e + (rp,))
            if len(term[l]) + len(expr[l]) + len(factor[l]) != before:
                changed = True

    stmt: dict[int, set[tuple[int, ...]]] = {l: set() for l in range(max_len + 1)}
    for l in range(4, max_len + 1):
        for e in expr[l - 3]:
            for ident in idents:
                for eq in by_class["="]:
                    for semi in by_class[";"]:
                        stmt[l].add((ident, eq) + e + (semi,))

    program: set[tuple[int, ...]] = set()
    frontier: dict[int, set[tuple[int, ...]]] = {l: set(stmt[l])
                                                 for l in range(max_len + 1)}
    while any(frontier.values()):
        new_frontier: dict[int, set[tuple[int, ...]]] = {
            l: set() for l in range(max_len + 1)}
        for l, seqs in frontier.items():
            program |= seqs
            for s in seqs:
                for l2 in range(4, max_len - l + 1):
                    for st in stmt[l2]:
                        cand = s + st
                        if cand not in program:
                            new_frontier[l + l2].add(cand)
        frontier = new_frontier
    return program
