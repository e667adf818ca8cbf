import math

import numpy as np
import pytest

from cusplab.errors import ConfigError, ValidationError
from cusplab.flow import flow_displacement, integrate_batch, reduced_rhs
from cusplab.model import (
    Detail,
    ParabolicModel,
    Stratum,
    bifurcation_diagram,
    classify,
    cubic_roots,
    hamiltonian,
    is_critical,
    roots_array,
    section_roots,
    stratum_codes,
)


def test_hamiltonian_examples():
    assert hamiltonian(0, 0, 0) == 0
    assert hamiltonian(1, 1, 1) == 1
    assert hamiltonian(0, 1, 3) == 2


def test_is_critical_examples():
    assert is_critical(0, 1, 3, 1e-9)
    assert is_critical(0, 0, 0, 1e-9)
    assert not is_critical(0.5, 0, 0, 1e-9)


def test_cubic_roots_examples():
    cr = cubic_roots(1, 0)
    assert cr.discriminant == 4
    np.testing.assert_allclose(cr.roots, (-1, 0, 1), atol=1e-15)
    cr = cubic_roots(0, 0)
    assert cr.roots == (0.0,) and cr.multiplicities == (3,) and cr.discriminant == 0
    assert math.copysign(1, cr.roots[0]) == 1
    cr = cubic_roots(3, 2)
    assert cr.discriminant == 0
    assert cr.roots == (-2.0, 1.0) and cr.multiplicities == (1, 2)
    assert cr.n_real == 3


def test_cubic_residuals_random():
    rng = np.random.default_rng(0)
    lam = rng.uniform(-1.2, 1.2, 10_000)
    h = rng.uniform(-4.6, 4.6, 10_000)
    for l, hh in zip(lam, h):
        cr = cubic_roots(l, hh)
        assert (cr.discriminant >= 0) == (cr.n_real == 3)
        assert list(cr.roots) == sorted(cr.roots)
        for r in cr.roots:
            assert abs(r**3 - l * r + hh) <= 1e-12 * max(1.0, abs(r) ** 3)


def test_roots_array_matches_scalar():
    rng = np.random.default_rng(1)
    lam = rng.uniform(-1, 1, 500)
    h = rng.uniform(-0.5, 0.5, 500)
    r1, r2, r3, three = roots_array(lam, h)
    for i in range(500):
        cr = cubic_roots(lam[i], h[i])
        if cr.multiplicities == (1, 1, 1):
            assert three[i]
            np.testing.assert_allclose((r1[i], r2[i], r3[i]), cr.roots, atol=1e-12)
        elif cr.multiplicities == (1,):
            assert r1[i] == pytest.approx(cr.roots[0], abs=1e-12)


def test_positivity_intervals():
    rng = np.random.default_rng(2)
    for _ in range(200):
        lam = rng.uniform(0.01, 1.2)
        hp = 2 * (lam / 3) ** 1.5
        h = rng.uniform(-0.95, 0.95) * hp
        r1, r2, r3 = cubic_roots(lam, h).roots
        ys = np.linspace(-2, 2, 2001)
        p = ys**3 - lam * ys + h
        inside = ((ys >= r1) & (ys <= r2)) | (ys >= r3)
        margin = 1e-9
        near = np.min(np.abs(ys[:, None] - np.array([r1, r2, r3])[None, :]), axis=1) < margin
        assert np.all((p >= 0)[~near] == inside[~near])


def test_classify_examples():
    c = classify(0, 0, 1)
    assert (c.stratum, c.detail) == (Stratum.SWALLOWTAIL, Detail.COMPACT_OVAL)
    c = classify(0, 2, 1)
    assert (c.stratum, c.detail) == (Stratum.OUTER, Detail.UNBOUNDED_BRANCH)
    c = classify(0, 1, 3)
    assert (c.stratum, c.detail) == (Stratum.BOUNDARY, Detail.HYPERBOLIC_LEVEL)
    c = classify(0, 0, 0)
    assert (c.stratum, c.detail) == (Stratum.BOUNDARY, Detail.CUSP_POINT)
    c = classify(0, -1, 3)
    assert (c.stratum, c.detail) == (Stratum.BOUNDARY, Detail.ELLIPTIC_POINT)


def test_section_interval_matches_swallowtail():
    ys = np.linspace(-1.1, 1.1, 89)
    lams = np.linspace(-1.1, 1.1, 67)
    for lam in lams:
        for y in ys:
            c = classify(0.0, y, lam)
            if c.stratum == Stratum.BOUNDARY:
                continue
            expect = lam > 0 and -2 * math.sqrt(lam / 3) < y < math.sqrt(lam / 3)
            assert (c.stratum == Stratum.SWALLOWTAIL) == expect, (y, lam)


def test_stratum_codes_agree_with_classify():
    rng = np.random.default_rng(3)
    P = rng.uniform(-1, 1, size=(2000, 3))
    code, h, root = stratum_codes(P[:, 0], P[:, 1], P[:, 2])
    for i, p in enumerate(P):
        c = classify(*p)
        want = {Stratum.OUTER: 0, Stratum.SWALLOWTAIL: 1, Stratum.BOUNDARY: 2}[c.stratum]
        assert code[i] == want


def test_section_roots_examples():
    sr = section_roots(0, 1)
    np.testing.assert_allclose([r for r, _ in sr], [-1, 0, 1], atol=1e-15)
    assert [c.detail for _, c in sr] == [Detail.COMPACT_OVAL, Detail.COMPACT_OVAL, Detail.UNBOUNDED_BRANCH]
    sr = section_roots(0, -1)
    assert len(sr) == 1 and sr[0][0] == 0 and sr[0][1].detail == Detail.UNBOUNDED_BRANCH
    sr = section_roots(2, 3)
    assert sr[0] == (-2.0, sr[0][1]) and sr[0][1].detail == Detail.UNBOUNDED_BRANCH
    assert sr[1][0] == 1.0 and sr[1][1].stratum == Stratum.BOUNDARY


def test_bifurcation_examples():
    rows = bifurcation_diagram(3, 4)
    assert rows[-1] == (3.0, 2.0, -2.0)
    assert bifurcation_diagram(0.75, 5)[-1] == (0.75, 0.25, -0.25)
    assert bifurcation_diagram(1, 2)[0] == (0.0, 0.0, 0.0)
    with pytest.raises(ConfigError):
        bifurcation_diagram(1, 1)
    for lam, hp, hm in bifurcation_diagram(1.2, 500):
        for h in (hp, hm):
            assert abs(27 * h * h - 4 * lam**3) <= 1e-12 * max(1e-300, 4 * lam**3) or lam == 0


def test_model_invariants():
    with pytest.raises(ValidationError):
        ParabolicModel.create(g="x")
    with pytest.raises(ConfigError):
        ParabolicModel.create(radius=0)
    with pytest.raises(ConfigError):
        ParabolicModel.create(g="1+phi")


def test_classification_constant_along_flow(model):
    rng = np.random.default_rng(4)
    P = rng.uniform(-0.4, 0.4, size=(200, 3))
    code0, _, _ = stratum_codes(P[:, 0], P[:, 1], P[:, 2])
    res = integrate_batch(reduced_rhs(model), P, np.full(200, 0.3), rtol=1e-11, atol=1e-13, radius=model.radius)
    ok = res.status == 0
    Q = res.y
    code1, _, _ = stratum_codes(Q[:, 0], Q[:, 1], Q[:, 2])
    live = ok & (code0 != 2) & (code1 != 2)
    assert live.sum() > 150
    assert np.all(code0[live] == code1[live])
