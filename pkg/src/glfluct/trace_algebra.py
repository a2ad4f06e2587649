"""Commutative algebra of trace polynomials.

A trace polynomial is a complex linear combination of monomials, each a
multiset of cyclic words. A word is a tuple of ``Letter(index, star)``;
``star=True`` stands for the adjoint of the matrix with that index. Words are
always stored in their lexicographically least rotation, because the
normalized trace cannot tell rotations apart.

Text syntax (whitespace is ignored)::

    expr   := term (('+'|'-') term)*
    term   := factor ('*' factor)*
    factor := number | 'tr' '(' word ')' ('^' int)? | '(' expr ')' ('^' int)?
    word   := atom+
    atom   := 'X' int '*'?

Numbers may carry an imaginary suffix ``j`` or ``i`` (``0.5j``, ``2i``).
"""
from __future__ import annotations

import functools
import math
import re
from collections.abc import Iterable, Mapping, Sequence
from typing import NamedTuple

import numpy as np


class Letter(NamedTuple):
    index: int
    star: bool = False

    def flip(self) -> "Letter":
        return Letter(self.index, not self.star)

    def __str__(self):
        return f"X{self.index}{'*' if self.star else ''}"


Word = tuple  # tuple[Letter, ...], canonical rotation
Monomial = tuple  # sorted tuple[Word, ...]; () is the constant monomial

ONE: Monomial = ()


class TraceAlgebraError(ValueError):
    pass


class ParseError(TraceAlgebraError):
    def __init__(self, message, text, pos):
        super().__init__(f"{message} at position {pos}: {text!r}")
        self.text = text
        self.pos = pos


@functools.lru_cache(maxsize=1 << 18)
def _least_rotation(letters: tuple) -> tuple:
    n = len(letters)
    best = letters
    for k in range(1, n):
        rot = letters[k:] + letters[:k]
        if rot < best:
            best = rot
    return best


def canonical_word(letters: Iterable) -> Word:
    """Least cyclic rotation of ``letters``; accepts Letters or (index, star) pairs."""
    letters = tuple(l if isinstance(l, Letter) else Letter(int(l[0]), bool(l[1])) for l in letters)
    if not letters:
        raise TraceAlgebraError("words must be nonempty")
    return _least_rotation(letters)


def word_degree(word: Word) -> int:
    return len(word)


def monomial_degree(mono: Monomial) -> int:
    return sum(len(w) for w in mono)


def mono_mul(a: Monomial, b: Monomial) -> Monomial:
    if not a:
        return b
    if not b:
        return a
    return tuple(sorted(a + b))


def conjugate_word(word: Word) -> Word:
    return _least_rotation(tuple(l.flip() for l in reversed(word)))


def word_str(word: Word) -> str:
    return " ".join(str(l) for l in word)


def _add_into(acc: dict, mono, coef):
    v = acc.get(mono, 0) + coef
    if v == 0:
        acc.pop(mono, None)
    else:
        acc[mono] = v


class TracePoly:
    """Immutable element of the trace polynomial algebra.

    ``terms`` maps monomials (sorted tuples of canonical words) to nonzero
    complex coefficients.
    """

    __slots__ = ("_terms", "_hash")

    def __init__(self, terms: Mapping | None = None):
        clean = {}
        if terms:
            for mono, c in terms.items():
                c = complex(c)
                if c != 0:
                    clean[mono] = clean.get(mono, 0) + c
        self._terms = {m: c for m, c in clean.items() if c != 0}
        self._hash = None

    # construction -----------------------------------------------------------
    @classmethod
    def constant(cls, c) -> "TracePoly":
        return cls({ONE: c})

    @classmethod
    def var(cls, letters, coef=1.0) -> "TracePoly":
        """The trace of a single word, ``tr(X_{i1}^{e1} ... X_{in}^{en})``."""
        return cls({(canonical_word(letters),): coef})

    @classmethod
    def from_monomials(cls, items: Iterable) -> "TracePoly":
        acc: dict = {}
        for mono, c in items:
            _add_into(acc, mono, complex(c))
        return cls(acc)

    # access -------------------------------------------------------------------
    @property
    def terms(self) -> Mapping:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def monomials(self):
        return self._terms.keys()

    def coefficient(self, mono: Monomial) -> complex:
        return self._terms.get(mono, 0j)

    def __len__(self):
        return len(self._terms)

    def __bool__(self):
        return bool(self._terms)

    @property
    def degree(self) -> int:
        return max((monomial_degree(m) for m in self._terms), default=0)

    def index_set(self) -> frozenset:
        return frozenset(l.index for m in self._terms for w in m for l in w)

    def words(self) -> set:
        return {w for m in self._terms for w in m}

    def is_constant(self) -> bool:
        return all(m == ONE for m in self._terms)

    # arithmetic -------------------------------------------------------------
    @staticmethod
    def _coerce(other):
        if isinstance(other, TracePoly):
            return other
        if isinstance(other, (int, float, complex, np.number)):
            return TracePoly.constant(other)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        acc = dict(self._terms)
        for m, c in other._terms.items():
            _add_into(acc, m, c)
        return TracePoly(acc)

    __radd__ = __add__

    def __neg__(self):
        return TracePoly({m: -c for m, c in self._terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, complex, np.number)):
            return TracePoly({m: c * other for m, c in self._terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        acc: dict = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                _add_into(acc, mono_mul(m1, m2), c1 * c2)
        return TracePoly(acc)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        if not isinstance(k, int) or k < 0:
            raise TraceAlgebraError("only nonnegative integer powers are defined")
        out = TracePoly.constant(1)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    def __eq__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(frozenset(self._terms.items()))
        return self._hash

    def allclose(self, other, atol=1e-12) -> bool:
        other = self._coerce(other)
        keys = set(self._terms) | set(other._terms)
        return all(abs(self.coefficient(k) - other.coefficient(k)) <= atol for k in keys)

    def map_words(self, fn) -> "TracePoly":
        """Apply ``fn(word) -> TracePoly`` to every variable (algebra homomorphism)."""
        cache: dict = {}
        out = TracePoly()
        for mono, c in self._terms.items():
            term = TracePoly.constant(c)
            for w in mono:
                if w not in cache:
                    cache[w] = fn(w)
                term = term * cache[w]
            out = out + term
        return out

    # semantics ----------------------------------------------------------------
    def conjugate(self) -> "TracePoly":
        return conjugate(self)

    def evaluate(self, mats):
        return evaluate(self, mats)

    def at_one(self) -> complex:
        return evaluate_at_one(self)

    def __repr__(self):
        return f"TracePoly({format_poly(self)!r})"

    def __str__(self):
        return format_poly(self)


# --------------------------------------------------------------------------
# conjugation and evaluation


def conjugate(P: TracePoly) -> TracePoly:
    """Adjoint: conjugate coefficients, reverse every word and flip its stars."""
    acc: dict = {}
    for mono, c in P.items():
        _add_into(acc, tuple(sorted(conjugate_word(w) for w in mono)), c.conjugate())
    return TracePoly(acc)


def _as_matrix_map(mats) -> dict:
    if isinstance(mats, Mapping):
        out = {int(k): np.asarray(v) for k, v in mats.items()}
    elif isinstance(mats, np.ndarray) and mats.ndim == 2:
        out = {1: mats}
    else:
        out = {i + 1: np.asarray(m) for i, m in enumerate(mats)}
    shapes = {m.shape for m in out.values()}
    if len(shapes) != 1:
        raise TraceAlgebraError(f"matrices must share one shape, got {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) < 2 or shape[-1] != shape[-2] or shape[-1] < 1:
        raise TraceAlgebraError(f"expected square matrices, got shape {shape}")
    return out


def word_traces(words: Iterable, mats) -> dict:
    """Normalized traces of words; ``mats`` may carry leading batch dimensions."""
    mats = _as_matrix_map(mats)
    adj: dict = {}

    def letter_matrix(l: Letter):
        try:
            m = mats[l.index]
        except KeyError:
            raise TraceAlgebraError(f"no matrix supplied for index {l.index}") from None
        if not l.star:
            return m
        if l.index not in adj:
            adj[l.index] = np.conj(np.swapaxes(m, -1, -2))
        return adj[l.index]

    n = next(iter(mats.values())).shape[-1]
    out = {}
    for w in words:
        if len(w) == 1:
            out[w] = np.trace(letter_matrix(w[0]), axis1=-2, axis2=-1) / n
            continue
        prod = letter_matrix(w[0])
        for l in w[1:-1]:
            prod = prod @ letter_matrix(l)
        last = letter_matrix(w[-1])
        # tr(AB) = sum_ij A_ij B_ji, avoids the final product
        out[w] = np.einsum("...ij,...ji->...", prod, last) / n
    return out


def evaluate(P: TracePoly, mats):
    """Evaluate on a tuple of N x N matrices (index j <-> ``mats[j-1]`` or ``mats[j]`` for dicts).

    Matrices may be stacked as ``(..., N, N)`` to evaluate many samples at once.
    """
    traces = word_traces(P.words(), mats)
    batch = next(iter(_as_matrix_map(mats).values())).shape[:-2]
    total = np.zeros(batch, dtype=complex)
    for mono, c in P.items():
        term = np.full(batch, c, dtype=complex)
        for w in mono:
            term = term * traces[w]
        total = total + term
    return complex(total) if not batch else total


def evaluate_at_one(P: TracePoly) -> complex:
    """Value with every matrix set to the identity: the sum of the coefficients."""
    return complex(math.fsum(c.real for _, c in P.items()) + 1j * math.fsum(c.imag for _, c in P.items()))


# --------------------------------------------------------------------------
# multi-time substitution


def expand_increments(P: TracePoly, times: Sequence[float]):
    """Rewrite a polynomial in B(t_1), ..., B(t_n) of a single Brownian motion
    as a polynomial in its independent multiplicative increments.

    Letter ``X_k`` becomes ``X_1 X_2 ... X_k`` and ``X_k*`` becomes
    ``X_k* ... X_1*``. Returns ``(poly, increments)`` with
    ``increments = (t_1, t_2 - t_1, ...)``.
    """
    times = [float(t) for t in times]
    if any(t < 0 for t in times):
        raise TraceAlgebraError("times must be nonnegative")
    if any(b < a for a, b in zip(times, times[1:])):
        raise TraceAlgebraError("times must be sorted in nondecreasing order")
    bad = [j for j in P.index_set() if not 1 <= j <= len(times)]
    if bad:
        raise TraceAlgebraError(f"indices {sorted(bad)} have no time")

    def subst(word):
        letters = []
        for l in word:
            if l.star:
                letters.extend(Letter(i, True) for i in range(l.index, 0, -1))
            else:
                letters.extend(Letter(i, False) for i in range(1, l.index + 1))
        return TracePoly.var(letters)

    increments = tuple([times[0]] + [b - a for a, b in zip(times, times[1:])]) if times else ()
    return P.map_words(subst), increments


# --------------------------------------------------------------------------
# printer


def _format_number(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def _format_coef(c: complex) -> tuple[str, str]:
    """Return (sign, body) where body is empty for a unit coefficient."""
    if c.imag == 0:
        sign = "-" if math.copysign(1.0, c.real) < 0 else "+"
        mag = abs(c.real)
        return sign, ("" if mag == 1 else _format_number(mag))
    if c.real == 0:
        sign = "-" if c.imag < 0 else "+"
        return sign, _format_number(abs(c.imag)) + "j"
    im = c.imag
    return "+", f"({_format_number(c.real)} {'-' if im < 0 else '+'} {_format_number(abs(im))}j)"


def mono_sort_key(mono: Monomial):
    return (monomial_degree(mono), len(mono), mono)


def format_monomial(mono: Monomial) -> str:
    parts = []
    i = 0
    while i < len(mono):
        k = i
        while k < len(mono) and mono[k] == mono[i]:
            k += 1
        mult = k - i
        parts.append(f"tr({word_str(mono[i])})" + (f"^{mult}" if mult > 1 else ""))
        i = k
    return "*".join(parts)


def format_poly(P: TracePoly) -> str:
    """Deterministic text form; monomials sorted by degree, then lexicographically."""
    if not P:
        return "0"
    pieces = []
    for mono in sorted(P.monomials(), key=mono_sort_key):
        sign, body = _format_coef(P.coefficient(mono))
        mtext = format_monomial(mono)
        if not mtext:
            text = body or "1"
        elif body:
            text = f"{body}*{mtext}"
        else:
            text = mtext
        pieces.append((sign, text))
    first_sign, first = pieces[0]
    out = ("-" if first_sign == "-" else "") + first
    for sign, text in pieces[1:]:
        out += f" {sign} {text}"
    return out


# --------------------------------------------------------------------------
# parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?[ij]?)"
    r"|(?P<imag>[ij](?![A-Za-z0-9]))"
    r"|(?P<tr>tr)"
    r"|(?P<X>X)(?P<idx>\d+)"
    r"|(?P<op>[-+*^()]))"
)


class _Parser:
    def __init__(self, text: str, index_set):
        self.text = text
        self.J = None if index_set is None else frozenset(int(j) for j in index_set)
        self.tokens = []
        pos = 0
        stripped_end = len(text.rstrip())
        while pos < stripped_end:
            m = _TOKEN.match(text, pos)
            if not m or m.end() == pos:
                raise ParseError("unexpected character", text, pos)
            kind = m.lastgroup if m.lastgroup != "idx" else "X"
            start = m.start(kind if kind != "X" else "X")
            value = m.group("idx") if kind == "X" else m.group(kind)
            self.tokens.append((kind, value, start))
            pos = m.end()
        self.tokens.append(("end", None, len(text)))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.i]
        if kind is not None and (tok[0] != kind or (value is not None and tok[1] != value)):
            want = value or kind
            raise ParseError(f"expected {want!r}", self.text, tok[2])
        self.i += 1
        return tok

    def at(self, kind, value=None):
        tok = self.tokens[self.i]
        return tok[0] == kind and (value is None or tok[1] == value)

    def parse(self) -> TracePoly:
        out = self.expr()
        if not self.at("end"):
            raise ParseError("unexpected trailing input", self.text, self.peek()[2])
        return out

    def expr(self):
        sign = 1
        if self.at("op", "-") or self.at("op", "+"):
            sign = -1 if self.take()[1] == "-" else 1
        out = self.term() * sign
        while self.at("op", "+") or self.at("op", "-"):
            op = self.take()[1]
            t = self.term()
            out = out + t if op == "+" else out - t
        return out

    def term(self):
        out = self.factor()
        while self.at("op", "*"):
            self.take()
            out = out * self.factor()
        return out

    def power(self, base):
        if self.at("op", "^"):
            self.take()
            kind, value, pos = self.take()
            if kind != "num" or not value.isdigit() or int(value) < 1:
                raise ParseError("expected positive integer exponent", self.text, pos)
            return base ** int(value)
        return base

    def factor(self):
        kind, value, pos = self.peek()
        if kind == "num":
            self.take()
            if value[-1] in "ij":
                return TracePoly.constant(complex(0, float(value[:-1])))
            return TracePoly.constant(float(value))
        if kind == "imag":
            self.take()
            return TracePoly.constant(1j)
        if kind == "tr":
            self.take()
            self.take("op", "(")
            letters = self.word()
            self.take("op", ")")
            return self.power(TracePoly.var(letters))
        if kind == "op" and value == "(":
            self.take()
            inner = self.expr()
            self.take("op", ")")
            return self.power(inner)
        raise ParseError("expected a number, tr(...) or '('", self.text, pos)

    def word(self):
        letters = []
        while self.at("X"):
            _, idx, pos = self.take()
            j = int(idx)
            if self.J is not None and j not in self.J:
                raise ParseError(f"index {j} outside declared index set {sorted(self.J)}", self.text, pos)
            star = False
            if self.at("op", "*"):
                self.take()
                star = True
            letters.append(Letter(j, star))
        if not letters:
            raise ParseError("expected a word of X<j> atoms", self.text, self.peek()[2])
        return letters


def parse(text: str, index_set=None) -> TracePoly:
    """Parse the text form of a trace polynomial; see the module docstring."""
    return _Parser(text, index_set).parse()
