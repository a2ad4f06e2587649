import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glfluct.trace_algebra import (
    ONE,
    Letter,
    ParseError,
    TraceAlgebraError,
    TracePoly,
    canonical_word,
    conjugate,
    evaluate,
    evaluate_at_one,
    expand_increments,
    format_poly,
    parse,
)

from conftest import polys, random_mats, words

X1, X1s = Letter(1, False), Letter(1, True)
X2, X2s = Letter(2, False), Letter(2, True)


def v(*letters):
    return TracePoly.var(letters)


# -- parse ------------------------------------------------------------------


def test_parse_single_variable():
    P = parse("tr(X1)")
    assert P == v(X1)
    assert P.coefficient(((X1,),)) == 1


def test_parse_two_letter_word():
    assert parse("tr(X1 X1*)") == v(X1, X1s)


def test_parse_composition():
    P = parse("tr(X1)^2 - 0.5*tr(X1 X1)")
    assert P == v(X1) * v(X1) - 0.5 * v(X1, X1)


def test_parse_misc_forms():
    assert parse("  tr( X1X2 )") == v(X1, X2)
    assert parse("-tr(X1)") == -v(X1)
    assert parse("(tr(X1) + 1)^2") == v(X1) ** 2 + 2 * v(X1) + 1
    assert parse("2i*tr(X1*)") == 2j * v(X1s)
    assert parse("(1+2j)") == TracePoly.constant(1 + 2j)
    assert parse("tr(X2 X1)") == parse("tr(X1 X2)")  # cyclic


@pytest.mark.parametrize("text,pos", [("tr(X1", 5), ("tr()", 3), ("tr(X1) +", 8), ("tr(Y1)", 3), ("3 ** 2", 3)])
def test_parse_errors_have_position(text, pos):
    with pytest.raises(ParseError) as e:
        parse(text)
    assert e.value.pos == pos


def test_parse_index_outside_J():
    with pytest.raises(ParseError, match="outside"):
        parse("tr(X1 X3)", {1, 2})


# -- conjugate ----------------------------------------------------------------


def test_conjugate_star_flip():
    assert conjugate(v(X1)) == v(X1s)


def test_conjugate_reverses_order():
    # tr(AB)* = tr(B* A*)
    assert conjugate(v(X1, X2)) == v(X2s, X1s)
    rng = np.random.default_rng(1)
    A = random_mats(rng, 3)
    assert np.isclose(evaluate(conjugate(v(X1, X2, X2)), A), np.conj(evaluate(v(X1, X2, X2), A)))


def test_conjugate_constant():
    assert conjugate(TracePoly.constant(2 + 1j)) == TracePoly.constant(2 - 1j)


# -- evaluate -----------------------------------------------------------------


def test_evaluate_identity():
    assert evaluate(v(X1), {1: np.eye(4)}) == pytest.approx(1)


def test_evaluate_normalized_trace():
    assert evaluate(v(X1, X1), {1: np.diag([1.0, 2.0])}) == pytest.approx(2.5)


def test_evaluate_product_of_traces(rng):
    A = random_mats(rng, 3, (1,))
    got = evaluate(v(X1) * v(X1s), A)
    a = np.trace(A[1]) / 3
    assert got == pytest.approx(a * np.conj(a))


def test_evaluate_batched(rng):
    stack = rng.standard_normal((5, 3, 3)) + 0j
    P = parse("tr(X1 X1*) + 2*tr(X1)^2")
    batch = evaluate(P, {1: stack})
    single = [evaluate(P, {1: m}) for m in stack]
    assert np.allclose(batch, single)


def test_evaluate_dimension_mismatch():
    with pytest.raises(ValueError):
        evaluate(v(X1, X2), {1: np.eye(2), 2: np.eye(3)})


def test_evaluate_at_one():
    assert evaluate_at_one(v(X1, X2s)) == 1
    assert evaluate_at_one(3 * v(X1) ** 2 - 2) == 1
    assert evaluate_at_one(TracePoly()) == 0


# -- expand_increments ------------------------------------------------------


def test_expand_single_time():
    P = parse("tr(X1 X1*)")
    Q, inc = expand_increments(P, [0.7])
    assert Q == P and inc == (0.7,)


def test_expand_two_times():
    Q, inc = expand_increments(parse("tr(X2)"), [0.5, 1.25])
    assert Q == parse("tr(X1 X2)")
    assert inc == pytest.approx((0.5, 0.75))
    Q, _ = expand_increments(parse("tr(X2 X1*)"), [0.5, 1.25])
    assert Q == parse("tr(X1 X2 X1*)")


def test_expand_star_ordering(rng):
    # B(t2)* = (B1 B2)* = B2* B1*
    Q, _ = expand_increments(parse("tr(X2*)"), [1, 2])
    A = random_mats(rng, 3)
    assert np.isclose(evaluate(Q, A), np.trace((A[1] @ A[2]).conj().T) / 3)


def test_expand_unsorted_times():
    with pytest.raises(TraceAlgebraError):
        expand_increments(parse("tr(X1)"), [2.0, 1.0])


# -- structure ---------------------------------------------------------------


def test_canonical_word_is_least_rotation():
    w = (X2, X1s, X1)
    c = canonical_word(w)
    rots = [w[i:] + w[:i] for i in range(3)]
    assert c == min(rots)


def test_degree_and_zero_coefficients():
    P = parse("tr(X1 X1* X2) + tr(X1)") - parse("tr(X1)")
    assert P.degree == 3
    assert len(P) == 1
    assert TracePoly.constant(0) == TracePoly()
    assert TracePoly().degree == 0


def test_printer_is_deterministic():
    P = parse("tr(X2) + tr(X1)^2 + (0.5-1j)*tr(X1 X2*)")
    Q = parse("(0.5-1j)*tr(X2* X1) + tr(X1)*tr(X1) + tr(X2)")
    assert format_poly(P) == format_poly(Q)


# -- properties ---------------------------------------------------------------


@given(polys(), polys(), polys())
def test_ring_axioms(P, Q, R):
    assert (P + Q) * R == P * R + Q * R
    assert P * Q == Q * P
    assert (P * Q) * R == P * (Q * R)
    assert P - P == TracePoly()


@given(polys(integer=False), polys(integer=False), st.integers(2, 6), st.integers(0, 2**31))
def test_evaluation_homomorphism(P, Q, N, seed):
    A = random_mats(np.random.default_rng(seed), N)
    lhs = evaluate(P * Q, A)
    rhs = evaluate(P, A) * evaluate(Q, A)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs), abs(evaluate(P, A)) * abs(evaluate(Q, A)))


@given(polys(integer=False), st.integers(2, 5), st.integers(0, 2**31))
def test_conjugation_matches_complex_conjugate(P, N, seed):
    A = random_mats(np.random.default_rng(seed), N)
    a = evaluate(P, A)
    assert abs(evaluate(conjugate(P), A) - np.conj(a)) <= 1e-12 * max(1.0, abs(a))
    assert conjugate(conjugate(P)) == P


@given(words(max_len=5), st.integers(1, 5), st.integers(0, 2**31))
def test_cyclic_invariance(w, N, seed):
    A = random_mats(np.random.default_rng(seed), N)
    # evaluate the literal (non-canonical) product for every rotation
    vals = []
    for i in range(len(w)):
        rot = w[i:] + w[:i]
        M = np.eye(N, dtype=complex)
        for l in rot:
            M = M @ (A[l.index].conj().T if l.star else A[l.index])
        vals.append(np.trace(M) / N)
    assert np.allclose(vals, vals[0])
    assert np.isclose(evaluate(TracePoly.var(w), A), vals[0])


@given(polys())
def test_parse_print_roundtrip(P):
    assert parse(format_poly(P)) == P


@given(polys(integer=False))
def test_parse_print_roundtrip_float(P):
    assert parse(format_poly(P)).allclose(P, atol=1e-12)


def test_letter_order_total():
    ls = [Letter(j, s) for j, s in itertools.product((1, 2), (False, True))]
    assert sorted(ls) == [X1, X1s, X2, X2s]
    assert str(X1s) == "X1*"
    assert ONE == ()
