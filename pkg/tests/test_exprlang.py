import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cusplab.exprlang import (
    DomainError,
    EvalEnv,
    ExprSyntaxError,
    UnboundVariableError,
    eval_dual,
    eval_expr,
    gradient,
    parse,
    to_source,
)

H = "x^2 - y^3 + lambda*y"


def test_parse_freevars():
    assert parse(H).freevars == {"x", "y", "lambda"}
    assert parse("1").freevars == frozenset()


def test_unclosed_paren_offset():
    with pytest.raises(ExprSyntaxError) as exc:
        parse("sin(x")
    assert exc.value.offset == 5


def test_unknown_function():
    with pytest.raises(ExprSyntaxError):
        parse("foo(x)")


def test_precedence():
    assert parse("2^3^2")() == 512.0
    assert parse("-2^2")() == -4.0
    assert parse("1 - 2 - 3")() == -4.0
    assert parse("8 / 2 / 2")() == 2.0
    assert parse("2 + 3*4")() == 14.0


def test_eval_examples():
    assert parse(H)(x=1, y=1, **{"lambda": 1}) == 1.0
    assert parse("pi")() == math.pi
    with pytest.raises(DomainError):
        parse("1/x")(x=0.0)
    with pytest.raises(DomainError):
        parse("sqrt(x)")(x=-1.0)
    with pytest.raises(UnboundVariableError):
        parse("x + y")(x=1.0)


def test_fractional_power_needs_positive_base():
    assert parse("x^0.5")(x=4.0) == pytest.approx(2.0, rel=1e-15)
    with pytest.raises(DomainError):
        parse("x^0.5")(x=-4.0)


def test_dual_examples():
    env = {"x": 0.0, "y": 1.0, "lambda": 0.0}
    assert eval_dual(parse(H), EvalEnv(env, {"y": 1.0})) == (-1.0, -3.0)
    assert eval_dual(parse("x*y"), EvalEnv({"x": 2.0, "y": 3.0}, {"x": 1.0})) == (6.0, 3.0)
    assert eval_dual(parse("sin(x)*exp(y)"), EvalEnv({"x": 0.3, "y": 0.2}, {}))[1] == 0.0


def test_sqrt_derivative_at_zero():
    with pytest.raises(DomainError):
        eval_dual(parse("sqrt(x)"), EvalEnv({"x": 0.0}, {"x": 1.0}))


def test_vectorized_eval():
    x = np.linspace(-1, 1, 5)
    np.testing.assert_array_equal(parse("x^2")(x=x), x * x)


_leaf = st.one_of(
    st.sampled_from(["x", "y", "lambda", "pi"]),
    st.floats(0, 100, allow_nan=False).map(lambda v: repr(v)),
)


def _combine(children):
    binop = st.tuples(children, st.sampled_from(["+", "-", "*", "/", "^"]), children).map(
        lambda t: f"({t[0]} {t[1]} {t[2]})"
    )
    call = st.tuples(st.sampled_from(["sin", "cos", "exp", "sqrt", "tanh", "abs"]), children).map(
        lambda t: f"{t[0]}({t[1]})"
    )
    neg = children.map(lambda c: f"-{c}")
    return st.one_of(binop, call, neg)


exprs = st.recursive(_leaf, _combine, max_leaves=12)


@settings(max_examples=50, deadline=None)
@given(exprs)
def test_print_roundtrip(src):
    a = parse(src)
    b = parse(to_source(a.root))
    assert a.root == b.root
    assert parse(to_source(b.root)).root == b.root


def test_dual_matches_symbolic_polynomial():
    # error measured in ulps of sum |k c_k x^(k-1)|, the conditioning scale of the sum
    from fractions import Fraction

    rng = np.random.default_rng(1)
    coeffs = [int(c) for c in rng.integers(-5, 6, size=5)]
    e = parse(" + ".join(f"{c}*x^{k}" for k, c in enumerate(coeffs)))
    xs = rng.uniform(-2, 2, size=1000)
    _, d = eval_dual(e, EvalEnv({"x": xs}, {"x": 1.0}))
    for x, dv in zip(xs, d):
        fx = Fraction(float(x))
        exact = sum(k * c * fx ** (k - 1) for k, c in enumerate(coeffs) if k)
        scale = sum(abs(k * c) * abs(float(x)) ** (k - 1) for k, c in enumerate(coeffs) if k)
        assert abs(Fraction(float(dv)) - exact) <= 4 * Fraction(float(np.spacing(scale)))


SMOOTH = [H, "sin(x)*cos(y) + exp(lambda/3)", "tanh(x+y)*sqrt(2+lambda)", "x^3/(2+y^2) - abs(lambda+3)"]


@pytest.mark.parametrize("src", SMOOTH)
def test_dual_matches_central_differences(src):
    e = parse(src)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-1, 1, size=(40, 3))
    for p in pts:
        b = {"x": p[0], "y": p[1], "lambda": p[2]}
        _, grad = gradient(e, b, ["x", "y", "lambda"])
        for name, d in zip(["x", "y", "lambda"], grad):
            hi = dict(b, **{name: b[name] + 1e-6})
            lo = dict(b, **{name: b[name] - 1e-6})
            fd = (eval_expr(e, EvalEnv(hi)) - eval_expr(e, EvalEnv(lo))) / 2e-6
            assert abs(fd - d) <= 1e-6 * max(1.0, abs(d))
